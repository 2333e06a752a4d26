//! Pipeline commands.
//!
//! Each command reads and validates every input before it writes anything,
//! prints the fully-resolved configuration first, and leaves its artifact
//! as a file so the stages stay independently runnable: `synth` writes the
//! dataset, `train-cnn` the encoder checkpoint, `extract` the per-slice
//! features, `fit-selector` the fitted selector, `train-lstm` the scan
//! model, `predict` the prediction table, `evaluate` the metric report,
//! and `gradcam` the heatmap overlays.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng as _;
use rayon::prelude::*;

use crate::config::{PipelineConfig, SelectorMethod};
use crate::encoder::{train_slice_model, EncoderModel, EpochLog, SliceSample};
use crate::gradcam::{
    combined_any_map, grad_cam, overlay, overlay_filename, save_overlay, Heatmap,
};
use crate::io::{
    read_ctv, sidecar_path, Checkpoint, FeatureSet, HuVolume, LabelSidecar, PredictionTable,
    ScanFeatures,
};
use crate::lstm::{train_scan_model, ScanModel, ScanSequence};
use crate::metrics::{
    roc_auc, scan_aggregate, threshold_metrics, weighted_mean_log_loss, LabelVec, PredVec,
};
use crate::preprocess::{prepare_slice, NormStats};
use crate::select::{fit_head_weight, fit_pca, fit_std, FittedSelector};
use crate::synth::{generate_dataset, DatasetManifest, SPLITS};
use crate::{Error, Result, Rng, CLASS_NAMES, NUM_CLASSES};

// ── Artifact locations ──────────────────────────────────────────────────

pub fn encoder_ckpt_path(out_dir: &Path) -> PathBuf {
    out_dir.join("encoder.ckpt")
}

pub fn features_path(out_dir: &Path) -> PathBuf {
    out_dir.join("features.ckpt")
}

pub fn selector_ckpt_path(out_dir: &Path) -> PathBuf {
    out_dir.join("selector.ckpt")
}

pub fn lstm_ckpt_path(out_dir: &Path) -> PathBuf {
    out_dir.join("lstm.ckpt")
}

pub fn predictions_path(out_dir: &Path) -> PathBuf {
    out_dir.join("predictions.csv")
}

pub fn report_path(out_dir: &Path) -> PathBuf {
    out_dir.join("evaluation.txt")
}

pub fn metrics_kv_path(out_dir: &Path) -> PathBuf {
    out_dir.join("metrics.kv")
}

pub fn gradcam_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("gradcam")
}

fn print_preamble(name: &str, config: &PipelineConfig) {
    println!("== {name} ==");
    println!("effective configuration:");
    for line in config.effective_toml().lines() {
        println!("  {line}");
    }
}

fn ensure_out_dir(config: &PipelineConfig) -> Result<&Path> {
    let dir = config.data.out_dir.as_path();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir)
}

// ── Scan inventory ──────────────────────────────────────────────────────

/// One dataset scan: its volume path and parsed sidecar.
#[derive(Debug, Clone)]
pub struct ScanRecord {
    pub scan_id: String,
    pub split: Option<String>,
    pub volume_path: PathBuf,
    pub sidecar: LabelSidecar,
}

impl ScanRecord {
    /// Loads the volume and checks its slice count against the sidecar.
    pub fn load_volume(&self) -> Result<HuVolume> {
        let volume = read_ctv(&self.volume_path)?;
        if volume.n_slices() != self.sidecar.n_slices() {
            return Err(Error::Invalid(format!(
                "scan {}: volume has {} slices but the sidecar lists {}",
                self.scan_id,
                volume.n_slices(),
                self.sidecar.n_slices()
            )));
        }
        Ok(volume)
    }
}

/// Every `.ctv` in the data directory with its sidecar, sorted by scan id.
pub fn scan_inventory(dir: &Path) -> Result<Vec<ScanRecord>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("ctv") {
            continue;
        }
        let sidecar = LabelSidecar::load(&sidecar_path(&path))?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Invalid(format!("unreadable file name {}", path.display())))?;
        if sidecar.scan_id != stem {
            return Err(Error::Invalid(format!(
                "sidecar of {} names scan {} instead of {stem}",
                path.display(),
                sidecar.scan_id
            )));
        }
        records.push(ScanRecord {
            scan_id: sidecar.scan_id.clone(),
            split: sidecar.split.clone(),
            volume_path: path,
            sidecar,
        });
    }
    if records.is_empty() {
        return Err(Error::Invalid(format!("no .ctv volumes under {}", dir.display())));
    }
    records.sort_by(|a, b| a.scan_id.cmp(&b.scan_id));
    Ok(records)
}

fn records_in_split<'a>(records: &'a [ScanRecord], split: &str) -> Vec<&'a ScanRecord> {
    records.iter().filter(|r| r.split.as_deref() == Some(split)).collect()
}

// ── synth ───────────────────────────────────────────────────────────────

pub fn cmd_synth(
    config: &PipelineConfig,
    n_override: Option<usize>,
    seed_override: Option<u64>,
) -> Result<DatasetManifest> {
    print_preamble("synth", config);
    let n_scans = n_override.unwrap_or(config.synth.n_scans);
    if n_scans == 0 {
        return Err(Error::Config("cannot generate a dataset of 0 scans".into()));
    }
    let seed = seed_override.unwrap_or(config.seeds.synth);
    let [ft, fv, fe] = config.synth.fractions;
    let manifest = generate_dataset(
        &config.phantom_config(),
        n_scans,
        (ft, fv, fe),
        seed,
        &config.data.dir,
    )?;
    for split in SPLITS {
        println!("{split}: {} scans", manifest.ids(split).len());
    }
    println!("wrote {} volumes to {}", n_scans, config.data.dir.display());
    Ok(manifest)
}

// ── train-cnn ───────────────────────────────────────────────────────────

fn split_samples(records: &[ScanRecord], split: &str) -> Result<Vec<SliceSample>> {
    let mut samples = Vec::new();
    for record in records_in_split(records, split) {
        let volume = record.load_volume()?;
        for s in 0..volume.n_slices() {
            samples.push(SliceSample {
                hu: volume.slice(s)?,
                label: record.sidecar.label_vec(s),
            });
        }
    }
    if samples.is_empty() {
        return Err(Error::Invalid(format!("the {split} split has no slices")));
    }
    Ok(samples)
}

fn write_train_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut text = String::new();
    for entry in log {
        let line = format!(
            "epoch={} lr={:e} train_loss={:.6} val_weighted_log_loss={:.6}",
            entry.epoch, entry.lr, entry.train_loss, entry.val_loss
        );
        println!("{line}");
        writeln!(text, "{line}").expect("string write");
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_train_cnn(
    config: &PipelineConfig,
    seed_override: Option<u64>,
) -> Result<(EncoderModel, Vec<EpochLog>)> {
    print_preamble("train-cnn", config);
    let records = scan_inventory(&config.data.dir)?;
    let train = split_samples(&records, "train")?;
    let val = split_samples(&records, "val")?;
    println!("training on {} slices, validating on {}", train.len(), val.len());

    let mut rng = Rng::seed_from_u64(seed_override.unwrap_or(config.seeds.cnn));
    let (model, log) = train_slice_model(
        &config.encoder_config(),
        &config.train_schedule(),
        &train,
        &val,
        &mut rng,
    )?;

    let out_dir = ensure_out_dir(config)?;
    write_train_log(&out_dir.join("train_cnn.log"), &log)?;
    let ckpt_path = encoder_ckpt_path(out_dir);
    model.to_checkpoint()?.save(&ckpt_path)?;
    println!("encoder checkpoint: {}", ckpt_path.display());
    Ok((model, log))
}

// ── extract ─────────────────────────────────────────────────────────────

pub fn cmd_extract(config: &PipelineConfig) -> Result<FeatureSet> {
    print_preamble("extract", config);
    let records = scan_inventory(&config.data.dir)?;
    let out_dir = config.data.out_dir.as_path();
    let model = EncoderModel::from_checkpoint(&Checkpoint::load(&encoder_ckpt_path(out_dir))?)?;
    let side = model.config().input_side;
    let norm = NormStats::default();

    let mut features = FeatureSet::new(model.config().embed_dim);
    for record in &records {
        let volume = record.load_volume()?;
        let outputs: Vec<(Vec<f64>, PredVec)> = (0..volume.n_slices())
            .into_par_iter()
            .map(|s| {
                let image = prepare_slice(&volume.slice(s)?, side, &norm, None)?;
                let out = model.encode(&image)?;
                Ok((out.embedding, out.probs))
            })
            .collect::<Result<_>>()?;
        let (embeddings, probs) = outputs.into_iter().unzip();
        features.add(ScanFeatures {
            scan_id: record.scan_id.clone(),
            embeddings,
            probs,
        })?;
    }

    ensure_out_dir(config)?;
    let path = features_path(out_dir);
    features.save(&path)?;
    println!(
        "extracted {} slices x {} dims for {} scans to {}",
        features.n_slices_total(),
        features.dim(),
        records.len(),
        path.display()
    );
    Ok(features)
}

// ── fit-selector ────────────────────────────────────────────────────────

pub fn cmd_fit_selector(config: &PipelineConfig) -> Result<FittedSelector> {
    print_preamble("fit-selector", config);
    let records = scan_inventory(&config.data.dir)?;
    let out_dir = config.data.out_dir.as_path();
    let features = FeatureSet::load(&features_path(out_dir))?;

    // Selection sees training-split features only.
    let mut rows = Vec::new();
    let mut n = 0usize;
    for record in records_in_split(&records, "train") {
        let scan = features.get(&record.scan_id).ok_or_else(|| {
            Error::Invalid(format!("feature file has no scan {}", record.scan_id))
        })?;
        for row in &scan.embeddings {
            rows.extend_from_slice(row);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Invalid("no training-split features to fit on".into()));
    }

    let d = features.dim();
    let k = config.selector.k;
    let selector = match config.selector.method {
        SelectorMethod::Std => fit_std(&rows, n, d, k)?,
        SelectorMethod::Pca => fit_pca(&rows, n, d, k)?,
        SelectorMethod::HeadWeight => {
            let encoder =
                EncoderModel::from_checkpoint(&Checkpoint::load(&encoder_ckpt_path(out_dir))?)?;
            if encoder.config().embed_dim != d {
                return Err(Error::Invalid(format!(
                    "encoder embeds {} dims but the feature file holds {d}",
                    encoder.config().embed_dim
                )));
            }
            let mode = match config.selector_spec() {
                crate::select::SelectorSpec::HeadWeight { mode, .. } => mode,
                _ => unreachable!("method is head-weight"),
            };
            fit_head_weight(&encoder.head_weights(), NUM_CLASSES, d, k, mode)?
        }
    };

    let mut ckpt = Checkpoint::new();
    selector.to_checkpoint(&mut ckpt)?;
    let path = selector_ckpt_path(out_dir);
    ckpt.save(&path)?;
    println!(
        "fitted {:?} selector on {n} rows: {d} -> {} dims, saved to {}",
        config.selector.method,
        selector.output_dim(),
        path.display()
    );
    Ok(selector)
}

// ── train-lstm ──────────────────────────────────────────────────────────

fn scan_sequence(
    record: &ScanRecord,
    features: &FeatureSet,
    selector: &FittedSelector,
    with_labels: bool,
) -> Result<ScanSequence> {
    let scan = features
        .get(&record.scan_id)
        .ok_or_else(|| Error::Invalid(format!("feature file has no scan {}", record.scan_id)))?;
    if scan.embeddings.len() != record.sidecar.n_slices() {
        return Err(Error::Invalid(format!(
            "scan {}: {} feature rows but the sidecar lists {} slices",
            record.scan_id,
            scan.embeddings.len(),
            record.sidecar.n_slices()
        )));
    }
    let selected: Vec<Vec<f64>> =
        scan.embeddings.iter().map(|row| selector.transform(row)).collect::<Result<_>>()?;
    let labels: Vec<LabelVec> =
        (0..record.sidecar.n_slices()).map(|s| record.sidecar.label_vec(s)).collect();
    Ok(ScanSequence {
        scan_id: record.scan_id.clone(),
        features: selected,
        cnn_probs: scan.probs.clone(),
        labels: with_labels.then_some(labels),
    })
}

pub fn cmd_train_lstm(
    config: &PipelineConfig,
    seed_override: Option<u64>,
) -> Result<(ScanModel, Vec<EpochLog>)> {
    print_preamble("train-lstm", config);
    let records = scan_inventory(&config.data.dir)?;
    let out_dir = config.data.out_dir.as_path();
    let features = FeatureSet::load(&features_path(out_dir))?;
    if features.scans().is_empty() {
        return Err(Error::Invalid("feature file holds no scans".into()));
    }
    let selector =
        FittedSelector::from_checkpoint(&Checkpoint::load(&selector_ckpt_path(out_dir))?)?;

    let sequences = |split: &str| -> Result<Vec<ScanSequence>> {
        let seqs: Vec<ScanSequence> = records_in_split(&records, split)
            .into_iter()
            .map(|record| scan_sequence(record, &features, &selector, true))
            .collect::<Result<_>>()?;
        if seqs.is_empty() {
            return Err(Error::Invalid(format!("the {split} split has no scans")));
        }
        Ok(seqs)
    };
    let train = sequences("train")?;
    let val = sequences("val")?;
    println!("training on {} scans, validating on {}", train.len(), val.len());

    let mut lstm_config = config.lstm_config();
    lstm_config.input_dim = selector.output_dim();
    let mut rng = Rng::seed_from_u64(seed_override.unwrap_or(config.seeds.lstm));
    let (model, log) =
        train_scan_model(&lstm_config, &config.scan_schedule(), &train, &val, &mut rng)?;

    write_train_log(&out_dir.join("train_lstm.log"), &log)?;
    let path = lstm_ckpt_path(out_dir);
    model.to_checkpoint()?.save(&path)?;
    println!("scan-model checkpoint: {}", path.display());
    Ok((model, log))
}

// ── predict ─────────────────────────────────────────────────────────────

/// The three trained stages wired together for inference.
pub struct ScanPipeline {
    encoder: EncoderModel,
    selector: FittedSelector,
    lstm: ScanModel,
}

impl ScanPipeline {
    /// Loads the stages from three checkpoint files and checks that their
    /// dimensions line up.
    pub fn load_parts(encoder: &Path, selector: &Path, lstm: &Path) -> Result<Self> {
        let encoder = EncoderModel::from_checkpoint(&Checkpoint::load(encoder)?)?;
        let selector = FittedSelector::from_checkpoint(&Checkpoint::load(selector)?)?;
        let lstm = ScanModel::from_checkpoint(&Checkpoint::load(lstm)?)?;
        if selector.input_dim() != encoder.config().embed_dim {
            return Err(Error::Invalid(format!(
                "selector expects {}-dim embeddings, encoder produces {}",
                selector.input_dim(),
                encoder.config().embed_dim
            )));
        }
        if lstm.config().input_dim != selector.output_dim() {
            return Err(Error::Invalid(format!(
                "scan model expects {} inputs, selector produces {}",
                lstm.config().input_dim,
                selector.output_dim()
            )));
        }
        Ok(ScanPipeline { encoder, selector, lstm })
    }

    /// Loads the stages from their standard artifact-directory layout.
    pub fn load_dir(out_dir: &Path) -> Result<Self> {
        ScanPipeline::load_parts(
            &encoder_ckpt_path(out_dir),
            &selector_ckpt_path(out_dir),
            &lstm_ckpt_path(out_dir),
        )
    }

    /// Per-slice class probabilities for one volume.
    pub fn predict_volume(&self, volume: &HuVolume, scan_id: &str) -> Result<Vec<PredVec>> {
        let side = self.encoder.config().input_side;
        let norm = NormStats::default();
        let outputs: Vec<(Vec<f64>, PredVec)> = (0..volume.n_slices())
            .into_par_iter()
            .map(|s| {
                let image = prepare_slice(&volume.slice(s)?, side, &norm, None)?;
                let out = self.encoder.encode(&image)?;
                Ok((self.selector.transform(&out.embedding)?, out.probs))
            })
            .collect::<Result<_>>()?;
        let (features, cnn_probs) = outputs.into_iter().unzip();
        self.lstm.predict(&ScanSequence {
            scan_id: scan_id.to_string(),
            features,
            cnn_probs,
            labels: None,
        })
    }
}

pub fn cmd_predict(config: &PipelineConfig, split: Option<&str>) -> Result<PredictionTable> {
    print_preamble("predict", config);
    let records = scan_inventory(&config.data.dir)?;
    let records: Vec<&ScanRecord> = match split {
        Some(split) => {
            let subset = records_in_split(&records, split);
            if subset.is_empty() {
                return Err(Error::Invalid(format!("no scans in split {split}")));
            }
            subset
        }
        None => records.iter().collect(),
    };
    let out_dir = config.data.out_dir.as_path();
    let pipeline = ScanPipeline::load_dir(out_dir)?;

    let mut table = PredictionTable::default();
    for record in records {
        let volume = record.load_volume()?;
        for (s, probs) in
            pipeline.predict_volume(&volume, &record.scan_id)?.into_iter().enumerate()
        {
            table.push(&record.scan_id, s, probs)?;
        }
    }
    let path = predictions_path(out_dir);
    table.save(&path)?;
    println!("wrote {} rows to {}", table.rows().len() * NUM_CLASSES, path.display());
    Ok(table)
}

// ── evaluate ────────────────────────────────────────────────────────────

/// One class's metric row; `None` marks an undefined metric (e.g. AUC with
/// a single class present).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub auc: Option<f64>,
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub weighted_log_loss: f64,
    pub slice_level: [ClassMetrics; NUM_CLASSES],
    pub scan_level: [ClassMetrics; NUM_CLASSES],
    pub n_slices: usize,
    pub n_scans: usize,
}

fn class_metrics(labels: &[f64], preds: &[f64], threshold: f64) -> Result<ClassMetrics> {
    let tm = threshold_metrics(labels, preds, threshold)?;
    Ok(ClassMetrics {
        auc: roc_auc(labels, preds).ok(),
        accuracy: tm.accuracy,
        sensitivity: tm.sensitivity,
        specificity: tm.specificity,
    })
}

fn metric_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"))
}

impl EvalReport {
    pub fn render(&self, weights: &[f64; NUM_CLASSES], threshold: f64) -> String {
        let mut out = String::new();
        writeln!(out, "weighted mean log loss = {:.6}", self.weighted_log_loss).unwrap();
        writeln!(out, "class weights = {weights:?}").unwrap();
        writeln!(out, "threshold = {threshold}").unwrap();
        writeln!(out, "slices = {}, scans = {}", self.n_slices, self.n_scans).unwrap();
        for (title, block) in
            [("slice level", &self.slice_level), ("scan level", &self.scan_level)]
        {
            writeln!(out, "\n== {title} ==").unwrap();
            for (t, m) in block.iter().enumerate() {
                writeln!(
                    out,
                    "{:<18} auc={} accuracy={:.6} sensitivity={} specificity={}",
                    CLASS_NAMES[t],
                    metric_cell(m.auc),
                    m.accuracy,
                    metric_cell(m.sensitivity),
                    metric_cell(m.specificity),
                )
                .unwrap();
            }
        }
        out
    }

    /// Flat `key=value` lines; undefined metrics render as `-`.
    pub fn render_kv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "weighted_log_loss={:.6}", self.weighted_log_loss).unwrap();
        writeln!(out, "n_slices={}", self.n_slices).unwrap();
        writeln!(out, "n_scans={}", self.n_scans).unwrap();
        for (level, block) in [("slice", &self.slice_level), ("scan", &self.scan_level)] {
            for (t, m) in block.iter().enumerate() {
                let name = CLASS_NAMES[t];
                writeln!(out, "{level}.{name}.auc={}", metric_cell(m.auc)).unwrap();
                writeln!(out, "{level}.{name}.accuracy={:.6}", m.accuracy).unwrap();
                writeln!(out, "{level}.{name}.sensitivity={}", metric_cell(m.sensitivity))
                    .unwrap();
                writeln!(out, "{level}.{name}.specificity={}", metric_cell(m.specificity))
                    .unwrap();
            }
        }
        out
    }
}

/// Scores a prediction table against the sidecars of the scans it names.
pub fn evaluate_table(
    table: &PredictionTable,
    records: &[ScanRecord],
    config: &PipelineConfig,
) -> Result<EvalReport> {
    let by_id = |id: &str| -> Result<&ScanRecord> {
        records
            .iter()
            .find(|r| r.scan_id == id)
            .ok_or_else(|| Error::Invalid(format!("predictions name unknown scan {id}")))
    };

    let mut slice_labels: Vec<LabelVec> = Vec::new();
    let mut slice_preds: Vec<PredVec> = Vec::new();
    let mut scan_labels: Vec<LabelVec> = Vec::new();
    let mut scan_preds: Vec<PredVec> = Vec::new();
    let scan_ids = table.scan_ids();
    for scan_id in &scan_ids {
        let record = by_id(scan_id)?;
        let rows = table.scan_rows(scan_id);
        if rows.len() != record.sidecar.n_slices() {
            return Err(Error::Invalid(format!(
                "scan {scan_id}: {} predicted slices but the sidecar lists {}",
                rows.len(),
                record.sidecar.n_slices()
            )));
        }
        let mut scan_label = [0.0; NUM_CLASSES];
        let mut preds = Vec::with_capacity(rows.len());
        for (slice, pred) in rows {
            let label = record.sidecar.label_vec(slice);
            for t in 0..NUM_CLASSES {
                scan_label[t] = f64::max(scan_label[t], label[t]);
            }
            slice_labels.push(label);
            slice_preds.push(pred);
            preds.push(pred);
        }
        scan_labels.push(scan_label);
        scan_preds.push(scan_aggregate(&preds)?);
    }

    let threshold = config.eval.threshold;
    let column = |rows: &[[f64; NUM_CLASSES]], t: usize| -> Vec<f64> {
        rows.iter().map(|r| r[t]).collect()
    };
    let block = |labels: &[LabelVec], preds: &[PredVec]| -> Result<[ClassMetrics; NUM_CLASSES]> {
        let mut out = Vec::with_capacity(NUM_CLASSES);
        for t in 0..NUM_CLASSES {
            out.push(class_metrics(&column(labels, t), &column(preds, t), threshold)?);
        }
        Ok(out.try_into().expect("six classes"))
    };

    Ok(EvalReport {
        weighted_log_loss: weighted_mean_log_loss(
            &slice_labels,
            &slice_preds,
            &config.eval.class_weights,
        )?,
        slice_level: block(&slice_labels, &slice_preds)?,
        scan_level: block(&scan_labels, &scan_preds)?,
        n_slices: slice_labels.len(),
        n_scans: scan_labels.len(),
    })
}

pub fn cmd_evaluate(
    config: &PipelineConfig,
    predictions: Option<&Path>,
) -> Result<EvalReport> {
    print_preamble("evaluate", config);
    let out_dir = config.data.out_dir.as_path();
    let default_path = predictions_path(out_dir);
    let table = PredictionTable::load(predictions.unwrap_or(&default_path))?;
    let records = scan_inventory(&config.data.dir)?;
    let report = evaluate_table(&table, &records, config)?;

    let text = report.render(&config.eval.class_weights, config.eval.threshold);
    print!("{text}");
    ensure_out_dir(config)?;
    std::fs::write(report_path(out_dir), &text).map_err(|e| Error::io(report_path(out_dir), e))?;
    std::fs::write(metrics_kv_path(out_dir), report.render_kv())
        .map_err(|e| Error::io(metrics_kv_path(out_dir), e))?;
    println!("report: {}", report_path(out_dir).display());
    Ok(report)
}

// ── gradcam ─────────────────────────────────────────────────────────────

/// Heatmap for one prepared slice image; class 0 is reported as the
/// pixelwise max of the five subtype maps.
pub fn class_heatmap(model: &EncoderModel, image: &crate::tensor::Tensor, class: usize) -> Result<Heatmap> {
    if class == 0 {
        let subtype_maps: Vec<Heatmap> =
            (1..NUM_CLASSES).map(|t| grad_cam(model, image, t)).collect::<Result<_>>()?;
        combined_any_map(&subtype_maps)
    } else {
        grad_cam(model, image, class)
    }
}

/// Writes one overlay per (slice, class). With no explicit class list,
/// each slice gets its positively-labeled classes.
pub fn cmd_gradcam(
    config: &PipelineConfig,
    scan_id: &str,
    classes: Option<&[usize]>,
) -> Result<Vec<PathBuf>> {
    print_preamble("gradcam", config);
    if let Some(classes) = classes {
        if classes.iter().any(|&t| t >= NUM_CLASSES) {
            return Err(Error::Invalid(format!(
                "class indices {classes:?} outside 0..{NUM_CLASSES}"
            )));
        }
    }
    let records = scan_inventory(&config.data.dir)?;
    let record = records
        .iter()
        .find(|r| r.scan_id == scan_id)
        .ok_or_else(|| Error::Invalid(format!("no scan {scan_id} in the data directory")))?;
    let volume = record.load_volume()?;
    let out_dir = config.data.out_dir.as_path();
    let model = EncoderModel::from_checkpoint(&Checkpoint::load(&encoder_ckpt_path(out_dir))?)?;
    let side = model.config().input_side;
    if volume.height() != side || volume.width() != side {
        return Err(Error::Invalid(format!(
            "scan {scan_id} slices are {}x{}, overlays need the model side {side}",
            volume.height(),
            volume.width()
        )));
    }

    let dir = gradcam_dir(out_dir);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let norm = NormStats::default();
    let mut written = Vec::new();
    for s in 0..volume.n_slices() {
        let label = record.sidecar.label_vec(s);
        let slice_classes: Vec<usize> = match classes {
            Some(list) => list.to_vec(),
            None => (0..NUM_CLASSES).filter(|&t| label[t] == 1.0).collect(),
        };
        if slice_classes.is_empty() {
            continue;
        }
        let slice = volume.slice(s)?;
        let image = prepare_slice(&slice, side, &norm, None)?;
        for class in slice_classes {
            let mut map = class_heatmap(&model, &image, class)?;
            map.source = Some(format!("{scan_id} slice {s}"));
            if map.zero {
                println!("warning: all-zero heatmap for {scan_id} slice {s} class {class}");
            }
            let path = dir.join(overlay_filename(scan_id, s, class));
            save_overlay(&path, &overlay(&map, &slice)?)?;
            written.push(path);
        }
    }
    println!("wrote {} overlays to {}", written.len(), dir.display());
    Ok(written)
}

// Tests for the command layer live in `tests/cli.rs` and the workspace
// acceptance suite; the fast path-level checks stay here.
#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{PipelineConfig, SelectorMethod};
    use sha2::{Digest as _, Sha256};

    fn tiny_config(root: &Path) -> PipelineConfig {
        let mut config = PipelineConfig::default();
        config.data.dir = root.join("data");
        config.data.out_dir = root.join("out");
        config.synth.n_scans = 6;
        config.synth.side = 32;
        config.synth.slice_min = 3;
        config.synth.slice_max = 4;
        config.synth.fractions = [0.7, 0.15, 0.15];
        config.encoder.stage_widths = vec![4, 8];
        config.encoder.cardinality = 2;
        config.encoder.bottleneck_width = 2;
        config.encoder.embed_dim = 8;
        config.encoder.input_side = 32;
        config.cnn_train.epoch_lrs = vec![1e-3];
        config.cnn_train.batch_size = 8;
        config.cnn_train.augment = false;
        config.selector.method = SelectorMethod::Pca;
        config.selector.k = 4;
        config.lstm.layers = 1;
        config.lstm.feature_width = 8;
        config.lstm.dropout = 0.0;
        config.lstm_train.epoch_lrs = vec![1e-3];
        config.validate().unwrap();
        config
    }

    fn sha256_file(path: &Path) -> String {
        let bytes = std::fs::read(path).unwrap();
        format!("{:x}", Sha256::digest(bytes))
    }

    #[test]
    fn full_chain_produces_consistent_artifacts() {
        let root = tempfile::tempdir().unwrap();
        let config = tiny_config(root.path());

        let manifest = cmd_synth(&config, None, None).unwrap();
        assert_eq!(manifest.ids("train").len(), 4);
        assert_eq!(manifest.ids("val").len(), 1);
        assert_eq!(manifest.ids("test").len(), 1);
        let ctv_count = std::fs::read_dir(&config.data.dir)
            .unwrap()
            .filter(|e| {
                e.as_ref().unwrap().path().extension().and_then(|x| x.to_str()) == Some("ctv")
            })
            .count();
        assert_eq!(ctv_count, 6);

        let (_, log) = cmd_train_cnn(&config, None).unwrap();
        assert_eq!(log.len(), 1);
        let log_text = std::fs::read_to_string(config.data.out_dir.join("train_cnn.log")).unwrap();
        assert!(log_text.contains("val_weighted_log_loss="));

        let features = cmd_extract(&config).unwrap();
        let records = scan_inventory(&config.data.dir).unwrap();
        let total_slices: usize = records.iter().map(|r| r.sidecar.n_slices()).sum();
        assert_eq!(features.n_slices_total(), total_slices);
        assert_eq!(features.dim(), 8);
        let features_hash = sha256_file(&features_path(&config.data.out_dir));
        cmd_extract(&config).unwrap();
        assert_eq!(sha256_file(&features_path(&config.data.out_dir)), features_hash);

        let selector = cmd_fit_selector(&config).unwrap();
        assert_eq!(selector.output_dim(), 4);

        let (model, _) = cmd_train_lstm(&config, None).unwrap();
        assert_eq!(model.config().input_dim, 4);

        let table = cmd_predict(&config, None).unwrap();
        assert_eq!(table.rows().len(), total_slices);
        let csv_hash = sha256_file(&predictions_path(&config.data.out_dir));
        cmd_predict(&config, None).unwrap();
        assert_eq!(sha256_file(&predictions_path(&config.data.out_dir)), csv_hash);

        let report = cmd_evaluate(&config, None).unwrap();
        assert_eq!(report.n_slices, total_slices);
        let text = std::fs::read_to_string(report_path(&config.data.out_dir)).unwrap();
        for name in CLASS_NAMES {
            assert_eq!(text.matches(name).count(), 2, "{name} should appear in both blocks");
        }
        let kv = std::fs::read_to_string(metrics_kv_path(&config.data.out_dir)).unwrap();
        assert!(kv.contains("slice.any.accuracy="));
        assert!(kv.lines().all(|l| l.contains('=')));

        // Test-split predictions only.
        let table = cmd_predict(&config, Some("test")).unwrap();
        assert_eq!(table.scan_ids().len(), 1);
    }

    #[test]
    fn gradcam_any_overlay_is_the_subtype_max() {
        let root = tempfile::tempdir().unwrap();
        let mut config = tiny_config(root.path());
        config.synth.positive_prob = 1.0;
        config.synth.n_scans = 3;
        config.synth.fractions = [0.34, 0.33, 0.33];
        cmd_synth(&config, None, None).unwrap();
        cmd_train_cnn(&config, None).unwrap();

        let records = scan_inventory(&config.data.dir).unwrap();
        let record = &records[0];
        let positive_slice = (0..record.sidecar.n_slices())
            .find(|&s| record.sidecar.label_vec(s)[0] == 1.0)
            .expect("an all-positive dataset has a positive slice");

        let written = cmd_gradcam(&config, &record.scan_id, Some(&[0])).unwrap();
        let path = written
            .iter()
            .find(|p| p.ends_with(overlay_filename(&record.scan_id, positive_slice, 0)))
            .expect("overlay for the positive slice");

        // Recompute the combined map independently.
        let model = EncoderModel::from_checkpoint(
            &Checkpoint::load(&encoder_ckpt_path(&config.data.out_dir)).unwrap(),
        )
        .unwrap();
        let volume = record.load_volume().unwrap();
        let slice = volume.slice(positive_slice).unwrap();
        let image = prepare_slice(&slice, 32, &NormStats::default(), None).unwrap();
        let maps: Vec<Heatmap> =
            (1..NUM_CLASSES).map(|t| grad_cam(&model, &image, t).unwrap()).collect();
        let want = overlay(&combined_any_map(&maps).unwrap(), &slice).unwrap();
        let got = image::open(path).unwrap().to_rgb8();
        assert_eq!(got.as_raw(), want.as_raw());
    }

    #[test]
    fn predict_rejects_slice_count_mismatch_naming_the_scan() {
        let root = tempfile::tempdir().unwrap();
        let config = tiny_config(root.path());
        cmd_synth(&config, None, None).unwrap();
        cmd_train_cnn(&config, None).unwrap();
        cmd_extract(&config).unwrap();
        cmd_fit_selector(&config).unwrap();
        cmd_train_lstm(&config, None).unwrap();

        // Shorten one sidecar so volume and labels disagree.
        let records = scan_inventory(&config.data.dir).unwrap();
        let victim = &records[2];
        let mut sidecar = victim.sidecar.clone();
        sidecar.labels.pop();
        sidecar.save(&sidecar_path(&victim.volume_path)).unwrap();

        let err = cmd_predict(&config, None).unwrap_err();
        assert!(err.to_string().contains(&victim.scan_id), "{err}");
    }

    #[test]
    fn commands_validate_inputs_before_writing() {
        let root = tempfile::tempdir().unwrap();
        let config = tiny_config(root.path());
        // No dataset yet: every consumer fails and creates nothing.
        assert!(cmd_train_cnn(&config, None).is_err());
        assert!(cmd_extract(&config).is_err());
        assert!(cmd_predict(&config, None).is_err());
        assert!(cmd_evaluate(&config, None).is_err());
        assert!(!config.data.out_dir.exists());
        assert!(cmd_synth(&config, Some(0), None).is_err());
        assert!(!config.data.dir.exists());
    }

    #[test]
    fn perfect_predictions_score_a_vanishing_loss() {
        let root = tempfile::tempdir().unwrap();
        let config = tiny_config(root.path());
        cmd_synth(&config, None, None).unwrap();
        let records = scan_inventory(&config.data.dir).unwrap();
        let mut table = PredictionTable::default();
        for record in &records {
            for s in 0..record.sidecar.n_slices() {
                let label = record.sidecar.label_vec(s);
                table.push(&record.scan_id, s, label).unwrap();
            }
        }
        std::fs::create_dir_all(&config.data.out_dir).unwrap();
        let path = config.data.out_dir.join("perfect.csv");
        table.save(&path).unwrap();
        let report = cmd_evaluate(&config, Some(&path)).unwrap();
        assert!(report.weighted_log_loss < 1e-6, "{}", report.weighted_log_loss);
        for m in &report.slice_level {
            assert_eq!(m.accuracy, 1.0);
        }
    }
}
