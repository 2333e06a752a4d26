//! Stage three: the scan model.
//!
//! A stacked bidirectional LSTM reads the ordered, selected slice features
//! of one scan and re-scores every slice with scan-level context. Each
//! slice's final classifier input is its BiLSTM feature, optionally
//! concatenated with the encoder's six class probabilities. One scan is
//! one training batch.

use crate::encoder::EpochLog;
use crate::io::Checkpoint;
use crate::metrics::{self, ClassWeights, LabelVec, PredVec};
use crate::tensor::{AdamState, NodeId, ParamSet, Tape, Tensor};
use crate::{Error, Result, Rng, NUM_CLASSES};

#[derive(Debug, Clone, PartialEq)]
pub struct LstmConfig {
    pub layers: usize,
    /// Total per-slice feature width; each direction carries half.
    pub feature_width: usize,
    /// Inter-layer inverted dropout, train mode only.
    pub dropout: f64,
    /// Per-slice input dimension (the selector's k).
    pub input_dim: usize,
    pub include_cnn_probs: bool,
}

impl LstmConfig {
    pub fn new(input_dim: usize) -> Self {
        LstmConfig {
            layers: 3,
            feature_width: 256,
            dropout: 0.3,
            input_dim,
            include_cnn_probs: true,
        }
    }

    pub fn hidden(&self) -> usize {
        self.feature_width / 2
    }

    pub fn classifier_input(&self) -> usize {
        self.feature_width + if self.include_cnn_probs { NUM_CLASSES } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("LSTM needs at least one layer".into()));
        }
        if self.feature_width < 2 || self.feature_width % 2 != 0 {
            return Err(Error::Config(format!(
                "LSTM feature width {} must be even and >= 2",
                self.feature_width
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("LSTM dropout {} outside [0, 1)", self.dropout)));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("LSTM input dim must be >= 1".into()));
        }
        Ok(())
    }

    fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let h = self.hidden();
        let mut out = Vec::new();
        let mut in_dim = self.input_dim;
        for l in 0..self.layers {
            for dir in ["fwd", "bwd"] {
                out.push((format!("l{l}.{dir}.weight"), vec![4 * h, in_dim + h]));
                out.push((format!("l{l}.{dir}.bias"), vec![4 * h]));
            }
            in_dim = self.feature_width;
        }
        out.push(("cls.weight".into(), vec![NUM_CLASSES, self.classifier_input()]));
        out.push(("cls.bias".into(), vec![NUM_CLASSES]));
        out
    }
}

/// One scan's ordered slice records.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanSequence {
    pub scan_id: String,
    /// `[T][k]` selected features in slice order.
    pub features: Vec<Vec<f64>>,
    /// `[T]` encoder class probabilities.
    pub cnn_probs: Vec<PredVec>,
    /// `[T]` binary labels; required for training and validation.
    pub labels: Option<Vec<LabelVec>>,
}

impl ScanSequence {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn validate(&self, input_dim: usize) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::Invalid(format!("scan {}: empty sequence", self.scan_id)));
        }
        if self.cnn_probs.len() != self.features.len() {
            return Err(Error::Invalid(format!(
                "scan {}: {} feature rows vs {} probability rows",
                self.scan_id,
                self.features.len(),
                self.cnn_probs.len()
            )));
        }
        for (t, row) in self.features.iter().enumerate() {
            if row.len() != input_dim {
                return Err(Error::Invalid(format!(
                    "scan {} slice {t}: feature dim {} vs model input dim {input_dim}",
                    self.scan_id,
                    row.len()
                )));
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.features.len() {
                return Err(Error::Invalid(format!(
                    "scan {}: {} label rows vs {} slices",
                    self.scan_id,
                    labels.len(),
                    self.features.len()
                )));
            }
        }
        Ok(())
    }
}

/// One standard LSTM cell step. `weight` is `[4H, in+H]` over the
/// concatenated `[x; h_prev]`, gate blocks in i, f, g, o order; returns
/// `(h, c)`, each `[1, H]`.
pub fn lstm_cell_step(
    tape: &mut Tape,
    weight: NodeId,
    bias: NodeId,
    x: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
) -> Result<(NodeId, NodeId)> {
    let rows = tape.shape(weight)[0];
    if rows % 4 != 0 {
        return Err(Error::Shape {
            op: "lstm_cell_step",
            msg: format!("weight rows {rows} not a multiple of 4"),
        });
    }
    let h = rows / 4;
    let xh = tape.concat(&[x, h_prev], 1)?;
    let gates = tape.linear(xh, weight)?;
    let gates = tape.add_row_bias(gates, bias)?;
    let i_raw = tape.slice(gates, 1, 0, h)?;
    let f_raw = tape.slice(gates, 1, h, h)?;
    let g_raw = tape.slice(gates, 1, 2 * h, h)?;
    let o_raw = tape.slice(gates, 1, 3 * h, h)?;
    let i = tape.sigmoid(i_raw);
    let f = tape.sigmoid(f_raw);
    let g = tape.tanh(g_raw);
    let o = tape.sigmoid(o_raw);
    let fc = tape.mul(f, c_prev)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c);
    let hh = tape.mul(o, tc)?;
    Ok((hh, c))
}

#[derive(Debug, Clone)]
pub struct ScanModel {
    config: LstmConfig,
    params: ParamSet,
}

impl ScanModel {
    /// LSTM weights uniform(±1/√F), biases zero except the forget-gate
    /// block at +1; classifier He-uniform with zero bias. Deterministic in
    /// the seed.
    pub fn build(config: &LstmConfig, rng: &mut Rng) -> Result<Self> {
        use rand::Rng as _;
        config.validate()?;
        let h = config.hidden();
        let lstm_bound = 1.0 / (config.feature_width as f64).sqrt();
        let mut params = ParamSet::new();
        for (name, shape) in config.param_shapes() {
            let n: usize = shape.iter().product();
            let tensor = if name == "cls.weight" {
                let bound = (6.0 / shape[1] as f64).sqrt();
                Tensor::from_vec(&shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())?
            } else if name.ends_with(".bias") {
                let mut data = vec![0.0; n];
                if name != "cls.bias" {
                    data[h..2 * h].fill(1.0);
                }
                Tensor::from_vec(&shape, data)?
            } else {
                Tensor::from_vec(
                    &shape,
                    (0..n).map(|_| rng.gen_range(-lstm_bound..lstm_bound)).collect(),
                )?
            };
            params.add(&name, tensor)?;
        }
        Ok(ScanModel { config: config.clone(), params })
    }

    pub fn config(&self) -> &LstmConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Per-slice BiLSTM features `[T][F]`: each slice's forward-direction
    /// hidden state concatenated with its backward-direction one.
    pub fn bilstm_forward(
        &self,
        features: &[Vec<f64>],
        train: bool,
        rng: Option<&mut Rng>,
    ) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let leaves = self.register_leaves(&mut tape);
        let inputs = self.feature_nodes(&mut tape, features)?;
        let outs = self.bilstm_graph(&mut tape, &leaves, &inputs, train, rng)?;
        Ok(outs.into_iter().map(|id| tape.value(id).to_vec()).collect())
    }

    /// Per-slice sigmoid probabilities from BiLSTM features and encoder
    /// probabilities.
    pub fn classify_slices(
        &self,
        lstm_features: &[Vec<f64>],
        cnn_probs: &[PredVec],
    ) -> Result<Vec<PredVec>> {
        if lstm_features.len() != cnn_probs.len() {
            return Err(Error::Shape {
                op: "classify_slices",
                msg: format!("{} features vs {} prob rows", lstm_features.len(), cnn_probs.len()),
            });
        }
        let mut tape = Tape::new();
        let leaves = self.register_leaves(&mut tape);
        let mut out = Vec::with_capacity(lstm_features.len());
        for (feat, probs) in lstm_features.iter().zip(cnn_probs) {
            if feat.len() != self.config.feature_width {
                return Err(Error::Shape {
                    op: "classify_slices",
                    msg: format!(
                        "feature width {} vs model {}",
                        feat.len(),
                        self.config.feature_width
                    ),
                });
            }
            let f = tape.constant(&[1, feat.len()], feat)?;
            let logits = self.classifier_logits(&mut tape, &leaves, f, probs)?;
            let p = tape.sigmoid(logits);
            let v = tape.value(p);
            out.push(std::array::from_fn(|t| v[t]));
        }
        Ok(out)
    }

    /// Eval-mode slice probabilities for one scan.
    pub fn predict(&self, seq: &ScanSequence) -> Result<Vec<PredVec>> {
        seq.validate(self.config.input_dim)?;
        let feats = self.bilstm_forward(&seq.features, false, None)?;
        self.classify_slices(&feats, &seq.cnn_probs)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new();
        ckpt.add_scalars(
            "lstm.config",
            &[
                self.config.layers as f64,
                self.config.feature_width as f64,
                (self.config.dropout * 1e6).round(),
                self.config.input_dim as f64,
                f64::from(u8::from(self.config.include_cnn_probs)),
            ],
        )?;
        ckpt.add_params("lstm", &self.params)?;
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let c = ckpt.scalars("lstm.config")?;
        if c.len() != 5 {
            return Err(Error::Invalid(format!("lstm.config wants 5 values, got {}", c.len())));
        }
        let config = LstmConfig {
            layers: c[0] as usize,
            feature_width: c[1] as usize,
            dropout: c[2] / 1e6,
            input_dim: c[3] as usize,
            include_cnn_probs: c[4] != 0.0,
        };
        config.validate()?;
        let mut params = ParamSet::new();
        for (name, shape) in config.param_shapes() {
            params.add(&name, Tensor::zeros(&shape))?;
        }
        ckpt.load_params("lstm", &mut params)?;
        if params.tensors().any(|t| t.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Invalid("LSTM checkpoint holds non-finite weights".into()));
        }
        Ok(ScanModel { config, params })
    }

    fn register_leaves(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.params.iter().map(|(_, t)| tape.leaf(t)).collect()
    }

    fn feature_nodes(&self, tape: &mut Tape, features: &[Vec<f64>]) -> Result<Vec<NodeId>> {
        if features.is_empty() {
            return Err(Error::Invalid("BiLSTM input sequence is empty".into()));
        }
        features
            .iter()
            .enumerate()
            .map(|(t, row)| {
                if row.len() != self.config.input_dim {
                    return Err(Error::Shape {
                        op: "bilstm_forward",
                        msg: format!(
                            "slice {t}: input dim {} vs model {}",
                            row.len(),
                            self.config.input_dim
                        ),
                    });
                }
                tape.constant(&[1, row.len()], row)
            })
            .collect()
    }

    /// Runs the stacked BiLSTM over `inputs`, returning one `[1, F]` node
    /// per slice: forward hidden state then backward hidden state.
    ///
    /// Within hidden layers each direction receives its own previous-layer
    /// output first (`[h_same; h_other]`), which keeps the two directions
    /// exactly mirror-symmetric.
    fn bilstm_graph(
        &self,
        tape: &mut Tape,
        leaves: &[NodeId],
        inputs: &[NodeId],
        train: bool,
        mut rng: Option<&mut Rng>,
    ) -> Result<Vec<NodeId>> {
        let t_len = inputs.len();
        let h = self.config.hidden();
        let mut fwd: Vec<NodeId> = Vec::new();
        let mut bwd: Vec<NodeId> = Vec::new();

        for l in 0..self.config.layers {
            let layer_in = |dir_first: &[NodeId], dir_second: &[NodeId], t: usize, tape: &mut Tape| {
                if l == 0 {
                    Ok(inputs[t])
                } else {
                    tape.concat(&[dir_first[t], dir_second[t]], 1)
                }
            };

            let mut fwd_next = Vec::with_capacity(t_len);
            let w = leaves[l * 4];
            let b = leaves[l * 4 + 1];
            let mut hx = tape.constant(&[1, h], &vec![0.0; h])?;
            let mut cx = tape.constant(&[1, h], &vec![0.0; h])?;
            for t in 0..t_len {
                let x = layer_in(&fwd, &bwd, t, tape)?;
                let (hn, cn) = lstm_cell_step(tape, w, b, x, hx, cx)?;
                hx = hn;
                cx = cn;
                fwd_next.push(hn);
            }

            let mut bwd_next = vec![fwd_next[0]; t_len];
            let w = leaves[l * 4 + 2];
            let b = leaves[l * 4 + 3];
            let mut hx = tape.constant(&[1, h], &vec![0.0; h])?;
            let mut cx = tape.constant(&[1, h], &vec![0.0; h])?;
            for t in (0..t_len).rev() {
                let x = layer_in(&bwd, &fwd, t, tape)?;
                let (hn, cn) = lstm_cell_step(tape, w, b, x, hx, cx)?;
                hx = hn;
                cx = cn;
                bwd_next[t] = hn;
            }

            fwd = fwd_next;
            bwd = bwd_next;
            if train && self.config.dropout > 0.0 && l + 1 < self.config.layers {
                let r = rng.as_deref_mut().ok_or_else(|| {
                    Error::Invalid("train-mode BiLSTM needs an RNG for dropout".into())
                })?;
                for t in 0..t_len {
                    fwd[t] = tape.dropout(fwd[t], self.config.dropout, r)?;
                }
                for t in 0..t_len {
                    bwd[t] = tape.dropout(bwd[t], self.config.dropout, r)?;
                }
            }
        }

        (0..t_len).map(|t| tape.concat(&[fwd[t], bwd[t]], 1)).collect()
    }

    fn classifier_logits(
        &self,
        tape: &mut Tape,
        leaves: &[NodeId],
        feature: NodeId,
        cnn_probs: &PredVec,
    ) -> Result<NodeId> {
        let w = leaves[self.config.layers * 4];
        let b = leaves[self.config.layers * 4 + 1];
        let cls_in = if self.config.include_cnn_probs {
            let p = tape.constant(&[1, NUM_CLASSES], cnn_probs)?;
            tape.concat(&[feature, p], 1)?
        } else {
            feature
        };
        let logits = tape.linear(cls_in, w)?;
        tape.add_row_bias(logits, b)
    }

    /// Full training graph for one scan: mean over slices of the six-class
    /// BCE. Returns the parameter leaves and the scalar loss node.
    fn scan_loss_graph(
        &self,
        tape: &mut Tape,
        seq: &ScanSequence,
        train: bool,
        rng: Option<&mut Rng>,
    ) -> Result<(Vec<NodeId>, NodeId)> {
        seq.validate(self.config.input_dim)?;
        let labels = seq
            .labels
            .as_ref()
            .ok_or_else(|| Error::Train(format!("scan {} has no labels", seq.scan_id)))?;
        let leaves = self.register_leaves(tape);
        let inputs = self.feature_nodes(tape, &seq.features)?;
        let feats = self.bilstm_graph(tape, &leaves, &inputs, train, rng)?;
        let mut losses = Vec::with_capacity(feats.len());
        for (t, feat) in feats.iter().enumerate() {
            let logits = self.classifier_logits(tape, &leaves, *feat, &seq.cnn_probs[t])?;
            losses.push(tape.multi_bce_loss(logits, &labels[t])?);
        }
        let stacked = tape.concat(&losses, 0)?;
        let loss = tape.mean_all(stacked);
        Ok((leaves, loss))
    }
}

#[derive(Debug, Clone)]
pub struct ScanTrainSchedule {
    /// One learning rate per epoch; the length is the epoch count.
    pub epoch_lrs: Vec<f64>,
    /// Class weights for validation model selection.
    pub class_weights: ClassWeights,
}

impl Default for ScanTrainSchedule {
    fn default() -> Self {
        ScanTrainSchedule {
            epoch_lrs: vec![1e-4; 4],
            class_weights: metrics::DEFAULT_CLASS_WEIGHTS,
        }
    }
}

impl ScanTrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epoch_lrs.iter().any(|lr| !lr.is_finite() || *lr <= 0.0) {
            return Err(Error::Config(format!(
                "learning rates {:?} must be positive",
                self.epoch_lrs
            )));
        }
        Ok(())
    }
}

/// Slice-level weighted mean log loss of the scan model over labeled
/// sequences.
pub fn validation_loss(
    model: &ScanModel,
    val: &[ScanSequence],
    class_weights: &ClassWeights,
) -> Result<f64> {
    let mut labels = Vec::new();
    let mut preds = Vec::new();
    for seq in val {
        let seq_labels = seq
            .labels
            .as_ref()
            .ok_or_else(|| Error::Train(format!("scan {} has no labels", seq.scan_id)))?;
        preds.extend(model.predict(seq)?);
        labels.extend_from_slice(seq_labels);
    }
    metrics::weighted_mean_log_loss(&labels, &preds, class_weights)
}

/// Trains a fresh scan model, one scan per optimizer step, and returns the
/// epoch-end checkpoint with the lowest validation weighted mean log loss
/// plus the per-epoch log. An empty schedule returns the initialized model.
pub fn train_scan_model(
    config: &LstmConfig,
    schedule: &ScanTrainSchedule,
    train: &[ScanSequence],
    val: &[ScanSequence],
    rng: &mut Rng,
) -> Result<(ScanModel, Vec<EpochLog>)> {
    use rand::seq::SliceRandom as _;
    schedule.validate()?;
    let mut model = ScanModel::build(config, rng)?;
    if schedule.epoch_lrs.is_empty() {
        return Ok((model, Vec::new()));
    }
    if train.is_empty() {
        return Err(Error::Train("scan-model training set is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Train("scan-model validation set is empty".into()));
    }

    let mut adam = AdamState::new(&model.params);
    let mut log = Vec::new();
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;

    for (epoch, &lr) in schedule.epoch_lrs.iter().enumerate() {
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        for &si in &order {
            step += 1;
            let seq = &train[si];
            let mut tape = Tape::new();
            let (leaves, loss) = model.scan_loss_graph(&mut tape, seq, true, Some(rng))?;
            let value = tape.value(loss)[0];
            if !value.is_finite() {
                return Err(Error::Train(format!(
                    "loss became {value} on scan {} at epoch {epoch}, step {step}",
                    seq.scan_id
                )));
            }
            loss_sum += value;
            tape.backward(loss)?;
            model.params.accumulate_grads(&tape.leaf_grads(&leaves))?;
            adam.step(&mut model.params, lr)?;
            model.params.zero_grads();
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_loss = validation_loss(&model, val, &schedule.class_weights)?;
        if !val_loss.is_finite() {
            return Err(Error::Train(format!("validation loss became {val_loss} at epoch {epoch}")));
        }
        log.push(EpochLog { epoch, lr, train_loss, val_loss });
        let snapshot = || model.params.tensors().map(|t| t.data().to_vec()).collect();
        match &best {
            Some((b, _)) if *b <= val_loss => {}
            _ => best = Some((val_loss, snapshot())),
        }
    }

    if let Some((_, weights)) = best {
        for ((_, tensor), data) in model.params.iter_mut().zip(weights) {
            tensor.data_mut().copy_from_slice(&data);
        }
    }
    Ok((model, log))
}
