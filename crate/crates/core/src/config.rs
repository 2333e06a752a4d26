//! Declarative pipeline configuration.
//!
//! One TOML document drives every command. Every field has a fixed
//! default, so an empty file is a complete configuration; unknown keys are
//! rejected rather than silently ignored. Seeds are explicit integers —
//! nothing is ever seeded from the clock.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, TrainSchedule};
use crate::lstm::{LstmConfig, ScanTrainSchedule};
use crate::metrics::{ClassWeights, DEFAULT_CLASS_WEIGHTS};
use crate::preprocess::{AugmentConfig, NormStats};
use crate::select::{SelectorSpec, WeightMode};
use crate::synth::PhantomConfig;
use crate::{Error, Result};

// ── Sections ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory of CTV volumes and label sidecars.
    pub dir: PathBuf,
    /// Directory all commands write their artifacts to.
    pub out_dir: PathBuf,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { dir: "data".into(), out_dir: "artifacts".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_scans: usize,
    pub side: usize,
    pub slice_min: usize,
    pub slice_max: usize,
    pub noise_sigma: f64,
    pub positive_prob: f64,
    pub epidural_rarity: f64,
    /// Train/val/test fractions; must sum to 1.
    pub fractions: [f64; 3],
}

impl Default for SynthSection {
    fn default() -> Self {
        let phantom = PhantomConfig::default();
        SynthSection {
            n_scans: 40,
            side: phantom.side,
            slice_min: phantom.slice_range.0,
            slice_max: phantom.slice_range.1,
            noise_sigma: phantom.noise_sigma,
            positive_prob: phantom.positive_prob,
            epidural_rarity: phantom.epidural_rarity,
            fractions: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub cardinality: usize,
    pub bottleneck_width: usize,
    pub embed_dim: usize,
    pub input_side: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let c = EncoderConfig::default();
        EncoderSection {
            stage_widths: c.stage_widths,
            blocks_per_stage: c.blocks_per_stage,
            cardinality: c.cardinality,
            bottleneck_width: c.bottleneck_width,
            embed_dim: c.embed_dim,
            input_side: c.input_side,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnTrainSection {
    pub epoch_lrs: Vec<f64>,
    pub batch_size: usize,
    pub augment: bool,
}

impl Default for CnnTrainSection {
    fn default() -> Self {
        CnnTrainSection { epoch_lrs: vec![1e-4, 1e-4, 2e-5], batch_size: 16, augment: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectorMethod {
    Std,
    HeadWeight,
    Pca,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectorModeName {
    Largest,
    Smallest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectorSection {
    pub method: SelectorMethod,
    pub k: usize,
    /// Head-weight ranking direction; ignored by the other methods.
    pub mode: SelectorModeName,
}

impl Default for SelectorSection {
    fn default() -> Self {
        SelectorSection { method: SelectorMethod::Pca, k: 16, mode: SelectorModeName::Largest }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LstmSection {
    pub layers: usize,
    pub feature_width: usize,
    pub dropout: f64,
    pub include_cnn_probs: bool,
}

impl Default for LstmSection {
    fn default() -> Self {
        let c = LstmConfig::new(1);
        LstmSection {
            layers: c.layers,
            feature_width: c.feature_width,
            dropout: c.dropout,
            include_cnn_probs: c.include_cnn_probs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LstmTrainSection {
    pub epoch_lrs: Vec<f64>,
}

impl Default for LstmTrainSection {
    fn default() -> Self {
        LstmTrainSection { epoch_lrs: vec![1e-4; 4] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub class_weights: ClassWeights,
    pub threshold: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { class_weights: DEFAULT_CLASS_WEIGHTS, threshold: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedsSection {
    pub synth: u64,
    pub cnn: u64,
    pub selector: u64,
    pub lstm: u64,
}

impl Default for SeedsSection {
    fn default() -> Self {
        SeedsSection { synth: 11, cnn: 22, selector: 33, lstm: 44 }
    }
}

// ── The pipeline config ─────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: DataSection,
    pub synth: SynthSection,
    pub encoder: EncoderSection,
    pub cnn_train: CnnTrainSection,
    pub selector: SelectorSection,
    pub lstm: LstmSection,
    pub lstm_train: LstmTrainSection,
    pub eval: EvalSection,
    pub seeds: SeedsSection,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: PipelineConfig =
            toml::from_str(&text).map_err(|e| Error::format(path.display(), e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom_config().validate()?;
        self.encoder_config().validate()?;
        self.train_schedule().validate()?;
        self.lstm_config().validate()?;
        self.scan_schedule().validate()?;
        let [ft, fv, fe] = self.synth.fractions;
        if (ft + fv + fe - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions {:?} do not sum to 1",
                self.synth.fractions
            )));
        }
        if self.synth.n_scans == 0 {
            return Err(Error::Config("synth.n_scans must be at least 1".into()));
        }
        if self.selector.k == 0 || self.selector.k > self.encoder.embed_dim {
            return Err(Error::Config(format!(
                "selector.k = {} outside 1..={}",
                self.selector.k, self.encoder.embed_dim
            )));
        }
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return Err(Error::Config(format!(
                "eval.threshold {} outside [0, 1]",
                self.eval.threshold
            )));
        }
        if self.eval.class_weights.iter().any(|&w| w < 0.0 || !w.is_finite())
            || self.eval.class_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Config(format!(
                "eval.class_weights {:?} must be non-negative with a positive sum",
                self.eval.class_weights
            )));
        }
        Ok(())
    }

    /// The fully-resolved document, printed by every command.
    pub fn effective_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    // ── Domain views ────────────────────────────────────────────────────

    pub fn phantom_config(&self) -> PhantomConfig {
        PhantomConfig {
            side: self.synth.side,
            slice_range: (self.synth.slice_min, self.synth.slice_max),
            noise_sigma: self.synth.noise_sigma,
            positive_prob: self.synth.positive_prob,
            epidural_rarity: self.synth.epidural_rarity,
            ..Default::default()
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            stage_widths: self.encoder.stage_widths.clone(),
            blocks_per_stage: self.encoder.blocks_per_stage,
            cardinality: self.encoder.cardinality,
            bottleneck_width: self.encoder.bottleneck_width,
            embed_dim: self.encoder.embed_dim,
            input_side: self.encoder.input_side,
        }
    }

    pub fn train_schedule(&self) -> TrainSchedule {
        TrainSchedule {
            epoch_lrs: self.cnn_train.epoch_lrs.clone(),
            batch_size: self.cnn_train.batch_size,
            class_weights: self.eval.class_weights,
            augment: self.cnn_train.augment.then(AugmentConfig::default),
            norm: NormStats::default(),
        }
    }

    pub fn selector_spec(&self) -> SelectorSpec {
        let k = self.selector.k;
        match self.selector.method {
            SelectorMethod::Std => SelectorSpec::StdTopK { k },
            SelectorMethod::HeadWeight => SelectorSpec::HeadWeight {
                k,
                mode: match self.selector.mode {
                    SelectorModeName::Largest => WeightMode::Largest,
                    SelectorModeName::Smallest => WeightMode::Smallest,
                },
            },
            SelectorMethod::Pca => SelectorSpec::Pca { k },
        }
    }

    pub fn lstm_config(&self) -> LstmConfig {
        LstmConfig {
            layers: self.lstm.layers,
            feature_width: self.lstm.feature_width,
            dropout: self.lstm.dropout,
            input_dim: self.selector.k,
            include_cnn_probs: self.lstm.include_cnn_probs,
        }
    }

    pub fn scan_schedule(&self) -> ScanTrainSchedule {
        ScanTrainSchedule {
            epoch_lrs: self.lstm_train.epoch_lrs.clone(),
            class_weights: self.eval.class_weights,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_config(text: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pipeline.toml");
        std::fs::write(&path, text).unwrap();
        (dir, path)
    }

    #[test]
    fn empty_file_yields_the_default_config() {
        let (_dir, path) = write_config("");
        let config = PipelineConfig::load(&path).unwrap();
        assert_eq!(config, PipelineConfig::default());
        assert!(config.validate().is_ok());
        assert_eq!(config.cnn_train.epoch_lrs, vec![1e-4, 1e-4, 2e-5]);
        assert_eq!(config.lstm_train.epoch_lrs, vec![1e-4; 4]);
        assert_eq!(config.eval.class_weights, DEFAULT_CLASS_WEIGHTS);
    }

    #[test]
    fn partial_override_keeps_other_defaults() {
        let (_dir, path) = write_config("[selector]\nmethod = \"std\"\nk = 8\n");
        let config = PipelineConfig::load(&path).unwrap();
        assert_eq!(config.selector.method, SelectorMethod::Std);
        assert_eq!(config.selector.k, 8);
        assert_eq!(config.lstm, PipelineConfig::default().lstm);
        assert_eq!(config.selector_spec(), SelectorSpec::StdTopK { k: 8 });
        assert_eq!(config.lstm_config().input_dim, 8);
    }

    #[test]
    fn unknown_keys_are_rejected_with_the_path() {
        let (_dir, path) = write_config("[selector]\nmethd = \"std\"\n");
        let err = PipelineConfig::load(&path).unwrap_err();
        assert!(err.to_string().contains("pipeline.toml"), "{err}");
        let (_dir, path) = write_config("[typo_section]\nx = 1\n");
        assert!(PipelineConfig::load(&path).is_err());
    }

    #[test]
    fn invalid_values_fail_validation() {
        let (_dir, path) = write_config("[lstm]\ndropout = 1.5\n");
        assert!(PipelineConfig::load(&path).is_err());
        let (_dir, path) = write_config("[synth]\nfractions = [0.8, 0.3, 0.1]\n");
        assert!(PipelineConfig::load(&path).is_err());
        let (_dir, path) = write_config("[selector]\nk = 4096\n");
        assert!(PipelineConfig::load(&path).is_err());
        let (_dir, path) = write_config("[eval]\nthreshold = 7.0\n");
        assert!(PipelineConfig::load(&path).is_err());
    }

    #[test]
    fn selector_spec_maps_all_methods() {
        let mut config = PipelineConfig::default();
        config.selector.method = SelectorMethod::Pca;
        assert_eq!(config.selector_spec(), SelectorSpec::Pca { k: 16 });
        config.selector.method = SelectorMethod::HeadWeight;
        config.selector.mode = SelectorModeName::Smallest;
        assert_eq!(
            config.selector_spec(),
            SelectorSpec::HeadWeight { k: 16, mode: WeightMode::Smallest }
        );
    }

    #[test]
    fn effective_dump_round_trips() {
        let mut config = PipelineConfig::default();
        config.selector.k = 24;
        config.cnn_train.epoch_lrs = vec![3e-4];
        let dump = config.effective_toml();
        let back: PipelineConfig = toml::from_str(&dump).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn schedule_views_carry_the_config() {
        let mut config = PipelineConfig::default();
        config.cnn_train.augment = false;
        assert!(config.train_schedule().augment.is_none());
        config.cnn_train.augment = true;
        assert!(config.train_schedule().augment.is_some());
        assert_eq!(config.scan_schedule().epoch_lrs, vec![1e-4; 4]);
    }
}
