//! Training: three-term edge-classification loss, Adam with exponential
//! learning-rate decay, on-the-fly data generation, and checkpoint I/O.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, IxDyn, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Constraint, Gradients, ParamStore, Real, Tape, Var};
use crate::graphs::{ThreeClassLabels, WorldRanges};
use crate::net::{self, ModelConfig, NetError};
use crate::rng::substream;
use crate::semgen::{self, SemError};

/// Probabilities are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]` inside logs.
pub const PROB_FLOOR: f64 = 1e-7;
/// Floor applied under the element-wise square root of the two-hop support
/// matrix, so its gradient stays bounded when support entries reach zero.
const SUPPORT_FLOOR: f64 = 1e-12;

/// Adam first-moment decay rate.
pub const ADAM_BETA1: f64 = 0.9;
/// Adam second-moment decay rate.
pub const ADAM_BETA2: f64 = 0.999;
/// Adam denominator stabilizer.
pub const ADAM_EPS: f64 = 1e-8;

/// Failure modes of loss evaluation, optimization, and training.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("prediction shape {found:?} does not match the {d} x {d} x 3 label grid")]
    PredictionShape { d: usize, found: Vec<usize> },
    #[error("non-finite gradient for parameter '{name}' at epoch {epoch}")]
    NonFiniteGradient { name: String, epoch: usize },
    #[error("non-finite loss at epoch {epoch}, sample {sample} (suspect parameter '{suspect}')")]
    NonFiniteLoss {
        epoch: usize,
        sample: usize,
        suspect: String,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("training data generation failed: {0}")]
    Data(#[from] SemError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// The loss value split into its three additive terms.
///
/// `total` always equals `binary + categorical + penalty` exactly: it is
/// computed from the three parts rather than stored independently.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub binary: f64,
    pub categorical: f64,
    pub penalty: f64,
}

impl LossBreakdown {
    /// Assembles a breakdown from the three terms, deriving `total`.
    pub fn from_parts(binary: f64, categorical: f64, penalty: f64) -> Self {
        LossBreakdown {
            total: binary + categorical + penalty,
            binary,
            categorical,
            penalty,
        }
    }
}

/// Tape handles for the loss terms; `total` is the root to differentiate.
pub struct LossTerms<'t, F: Real> {
    pub total: Var<'t, F>,
    pub binary: Var<'t, F>,
    pub categorical: Var<'t, F>,
    pub penalty: Var<'t, F>,
}

impl<F: Real> LossTerms<'_, F> {
    /// Reads the term values off the tape.
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown::from_parts(
            self.binary.scalar_value().to_f64(),
            self.categorical.scalar_value().to_f64(),
            self.penalty.scalar_value().to_f64(),
        )
    }
}

/// Builds the full training loss on `pred`'s tape.
///
/// All three terms reduce over the strict lower triangle of the variable
/// grid, so each unordered pair is counted once:
/// - categorical: cross-entropy against the one-hot class tensor;
/// - binary: cross-entropy of "any edge" (skeleton or moralized classes
///   pooled on both sides) against the pooled predicted probability;
/// - penalty: `max(p_m - sqrt(P_s P_s), 0)` summed over pairs, where `P_s`
///   is the predicted skeleton-probability matrix, the product is a matrix
///   product, and the square root is element-wise. A moralized pair needs a
///   two-hop skeleton path through a common child; the penalty charges
///   moralized mass that lacks such support.
///
/// Probabilities are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]` inside the
/// logs; the penalty term sees the raw probabilities.
pub fn loss_total<'t, F: Real>(
    pred: Var<'t, F>,
    labels: &ThreeClassLabels,
) -> Result<LossTerms<'t, F>, TrainError> {
    let d = labels.d();
    if pred.shape() != [d, d, 3] {
        return Err(TrainError::PredictionShape {
            d,
            found: pred.shape().to_vec(),
        });
    }
    let tape = pred.tape();
    let lo = F::cast(PROB_FLOOR);
    let hi = F::cast(1.0 - PROB_FLOOR);

    let mut tri = Array2::<f64>::zeros((d, d));
    for i in 1..d {
        for j in 0..i {
            tri[[i, j]] = 1.0;
        }
    }
    let mask = tape.constant(tri.mapv(F::cast).into_dyn());
    let mask3 = mask.reshape(&[d, d, 1]);

    let one_hot = labels.one_hot();
    let target = tape.constant(one_hot.mapv(F::cast).into_dyn());
    let categorical = (target * pred.clamp(lo, hi).log() * mask3)
        .sum_all()
        .mul_scalar(F::cast(-1.0));

    let class_ids = labels.class_matrix();
    let edge = Array2::from_shape_fn((d, d), |(i, j)| f64::from(class_ids[[i, j]] >= 1));
    let edge_target = tape.constant(edge.mapv(F::cast).into_dyn());
    let no_edge_target = tape.constant(edge.mapv(|v| F::cast(1.0 - v)).into_dyn());
    let skeleton = pred.slice_axis(2, 1, 1).reshape(&[d, d]);
    let moralized = pred.slice_axis(2, 2, 1).reshape(&[d, d]);
    let edge_prob = (skeleton + moralized).clamp(lo, hi);
    let miss_prob = edge_prob.mul_scalar(F::cast(-1.0)).add_scalar(F::one());
    let binary = ((edge_target * edge_prob.log() + no_edge_target * miss_prob.log()) * mask)
        .sum_all()
        .mul_scalar(F::cast(-1.0));

    let stacked = skeleton.reshape(&[1, d, d]);
    let support = stacked
        .batched_matmul(stacked)
        .reshape(&[d, d])
        .clamp_min(F::cast(SUPPORT_FLOOR))
        .sqrt();
    let penalty = ((moralized - support).relu() * mask).sum_all();

    let total = binary + categorical + penalty;
    Ok(LossTerms {
        total,
        binary,
        categorical,
        penalty,
    })
}

/// Evaluates the loss of a fixed prediction tensor without keeping a tape.
pub fn loss_of_prediction(
    pred: &Array3<f64>,
    labels: &ThreeClassLabels,
) -> Result<LossBreakdown, TrainError> {
    let tape: Tape<f64> = Tape::new();
    let var = tape.constant(pred.clone().into_dyn());
    Ok(loss_total(var, labels)?.breakdown())
}

/// Adam optimizer state: per-parameter first and second moment estimates.
#[derive(Debug, Default)]
pub struct Adam<F: Real> {
    first: BTreeMap<String, ArrayD<F>>,
    second: BTreeMap<String, ArrayD<F>>,
    step_count: u64,
}

impl<F: Real> Adam<F> {
    pub fn new() -> Self {
        Adam {
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            step_count: 0,
        }
    }

    /// Applies one Adam update with the given learning rate, then re-applies
    /// parameter constraints. Parameters without a gradient entry are left
    /// untouched; a non-finite gradient aborts the step and names the
    /// offending parameter.
    pub fn step(
        &mut self,
        store: &mut ParamStore<F>,
        grads: &BTreeMap<String, ArrayD<F>>,
        lr: f64,
    ) -> Result<(), TrainError> {
        for (name, grad) in grads {
            if grad.iter().any(|g| !g.is_finite()) {
                // Callers running an epoch loop rewrite `epoch` with the
                // real position; the optimizer itself cannot know it.
                return Err(TrainError::NonFiniteGradient {
                    name: name.clone(),
                    epoch: 0,
                });
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let beta1 = F::cast(ADAM_BETA1);
        let beta2 = F::cast(ADAM_BETA2);
        let eps = F::cast(ADAM_EPS);
        let rate = F::cast(lr);
        let bias1 = F::one() - beta1.powi(t);
        let bias2 = F::one() - beta2.powi(t);
        for (name, entry) in store.iter_mut() {
            let Some(grad) = grads.get(name) else {
                continue;
            };
            let m = self
                .first
                .entry(name.to_owned())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self
                .second
                .entry(name.to_owned())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            Zip::from(&mut *m).and(grad).for_each(|m, &g| {
                *m = beta1 * *m + (F::one() - beta1) * g;
            });
            Zip::from(&mut *v).and(grad).for_each(|v, &g| {
                *v = beta2 * *v + (F::one() - beta2) * g * g;
            });
            Zip::from(&mut entry.value)
                .and(&*m)
                .and(&*v)
                .for_each(|w, &m, &v| {
                    let m_hat = m / bias1;
                    let v_hat = v / bias2;
                    *w = *w - rate * m_hat / (v_hat.sqrt() + eps);
                });
        }
        store.apply_constraints();
        Ok(())
    }
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub initial_lr: f64,
    /// The learning rate at epoch `e` is `initial_lr * decay^e`.
    pub lr_decay_factor_per_epoch: f64,
    /// Gradient steps average this many consecutive samples.
    pub minibatch: usize,
    pub seed: u64,
    pub model: ModelConfig,
    /// Ranges the per-sample world parameters are drawn from.
    pub world: WorldRanges,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1000,
            samples_per_epoch: 128,
            initial_lr: 5e-4,
            lr_decay_factor_per_epoch: 0.1f64.powf(1.0 / 500.0),
            minibatch: 1,
            seed: 0,
            model: ModelConfig::default(),
            world: WorldRanges::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "initial_lr must be positive and finite, got {}",
                self.initial_lr
            )));
        }
        let decay = self.lr_decay_factor_per_epoch;
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(TrainError::InvalidConfig(format!(
                "lr_decay_factor_per_epoch must lie in (0, 1], got {decay}"
            )));
        }
        if self.minibatch == 0 {
            return Err(TrainError::InvalidConfig(
                "minibatch must be at least 1".to_owned(),
            ));
        }
        if self.samples_per_epoch == 0 {
            return Err(TrainError::InvalidConfig(
                "samples_per_epoch must be at least 1".to_owned(),
            ));
        }
        let w = &self.world;
        if w.d_min < 2 || w.d_min > w.d_max || w.m_min < 2 || w.m_min > w.m_max {
            return Err(TrainError::InvalidConfig(format!(
                "world ranges need 2 <= d_min <= d_max and 2 <= m_min <= m_max, \
                 got d in [{}, {}], m in [{}, {}]",
                w.d_min, w.d_max, w.m_min, w.m_max
            )));
        }
        Ok(())
    }

    /// Learning rate used throughout epoch `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.initial_lr * self.lr_decay_factor_per_epoch.powi(epoch as i32)
    }
}

/// Mean loss over the samples of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: LossBreakdown,
}

/// The result of a training run: fitted parameters and the per-epoch trace.
pub struct TrainOutcome<F: Real> {
    pub params: ParamStore<F>,
    pub trace: Vec<EpochStats>,
}

/// Sums gradients of one backward sweep per parameter name.
pub(crate) fn named_gradients<F: Real>(
    tape: &Tape<F>,
    grads: &Gradients<F>,
) -> BTreeMap<String, ArrayD<F>> {
    let mut out: BTreeMap<String, ArrayD<F>> = BTreeMap::new();
    for (name, index) in tape.named_params() {
        let Some(grad) = grads.by_index(index) else {
            continue;
        };
        out.entry(name)
            .and_modify(|acc| *acc = &*acc + grad)
            .or_insert_with(|| grad.clone());
    }
    out
}

/// Trains a fresh model on data simulated on the fly.
///
/// Every epoch draws `samples_per_epoch` new (data, labels) pairs, takes one
/// averaged gradient step per `minibatch` consecutive samples, and records
/// the mean loss breakdown. Parameter initialization and data generation use
/// independent named substreams of `config.seed`, so runs are reproducible.
/// `on_epoch` observes each epoch's statistics as they are produced.
pub fn train_on_the_fly<F: Real>(
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome<F>, TrainError> {
    config.validate()?;
    let mut init_rng = substream(config.seed, "train/init");
    let store = net::init_params::<F>(&config.model, &mut init_rng);
    continue_training(config, store, 0, on_epoch)
}

/// Runs `config.epochs` further epochs on top of existing parameters,
/// numbering them from `start_epoch` so the learning-rate schedule and the
/// per-epoch data streams pick up where an earlier run left off. Optimizer
/// moments start fresh; the loss trace stays continuous because the
/// parameters do.
/// Picks the parameter to blame for a non-finite loss: the first one holding
/// a non-finite entry, or — when all parameters are still finite — the one
/// with the largest magnitude (the usual culprit in a diverging run).
pub(crate) fn suspect_param<F: Real>(store: &ParamStore<F>) -> String {
    let mut largest_name = String::new();
    let mut largest_mag = -1.0f64;
    for (name, entry) in store.iter() {
        for &v in entry.value.iter() {
            let x = v.to_f64();
            if !x.is_finite() {
                return name.to_owned();
            }
            if x.abs() > largest_mag {
                largest_mag = x.abs();
                largest_name = name.to_owned();
            }
        }
    }
    largest_name
}

pub fn continue_training<F: Real>(
    config: &TrainConfig,
    mut store: ParamStore<F>,
    start_epoch: usize,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome<F>, TrainError> {
    config.validate()?;
    let mut adam = Adam::new();
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in start_epoch..start_epoch + config.epochs {
        let mut data_rng = substream(config.seed, &format!("train/data/e{epoch}"));
        let lr = config.learning_rate_at(epoch);
        let mut sums = [0.0f64; 3];
        let mut pending: BTreeMap<String, ArrayD<F>> = BTreeMap::new();
        let mut pending_count = 0usize;
        for sample in 0..config.samples_per_epoch {
            let (data, labels) = semgen::generate_training_pair_in(&config.world, &mut data_rng)?;
            let input = data.mapv(F::cast);
            let tape: Tape<F> = Tape::new();
            let pred = net::model_forward(&tape, &store, &input, &config.model)?;
            let terms = loss_total(pred, &labels)?;
            let breakdown = terms.breakdown();
            if !breakdown.total.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    sample,
                    suspect: suspect_param(&store),
                });
            }
            sums[0] += breakdown.binary;
            sums[1] += breakdown.categorical;
            sums[2] += breakdown.penalty;
            let grads = tape.backward(terms.total);
            for (name, grad) in named_gradients(&tape, &grads) {
                pending
                    .entry(name)
                    .and_modify(|acc| *acc = &*acc + &grad)
                    .or_insert(grad);
            }
            pending_count += 1;
            if pending_count == config.minibatch || sample + 1 == config.samples_per_epoch {
                if pending_count > 1 {
                    let scale = F::cast(1.0 / pending_count as f64);
                    for grad in pending.values_mut() {
                        grad.mapv_inplace(|g| g * scale);
                    }
                }
                adam.step(&mut store, &pending, lr).map_err(|e| match e {
                    TrainError::NonFiniteGradient { name, .. } => {
                        TrainError::NonFiniteGradient { name, epoch }
                    }
                    other => other,
                })?;
                pending.clear();
                pending_count = 0;
            }
        }
        let n = config.samples_per_epoch as f64;
        let stats = EpochStats {
            epoch,
            loss: LossBreakdown::from_parts(sums[0] / n, sums[1] / n, sums[2] / n),
        };
        on_epoch(&stats);
        trace.push(stats);
    }
    Ok(TrainOutcome {
        params: store,
        trace,
    })
}

/// Mean loss of a fixed parameter set over held-out (data, labels) pairs.
pub fn mean_eval_loss<F: Real>(
    store: &ParamStore<F>,
    model: &ModelConfig,
    pairs: &[(Array2<f64>, ThreeClassLabels)],
) -> Result<LossBreakdown, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::InvalidConfig(
            "evaluation set is empty".to_owned(),
        ));
    }
    let mut sums = [0.0f64; 3];
    for (data, labels) in pairs {
        let tape: Tape<F> = Tape::new();
        let pred = net::model_forward(&tape, store, &data.mapv(F::cast), model)?;
        let breakdown = loss_total(pred, labels)?.breakdown();
        sums[0] += breakdown.binary;
        sums[1] += breakdown.categorical;
        sums[2] += breakdown.penalty;
    }
    let n = pairs.len() as f64;
    Ok(LossBreakdown::from_parts(
        sums[0] / n,
        sums[1] / n,
        sums[2] / n,
    ))
}

/// Magic bytes opening every checkpoint file; the trailing digit is the
/// format version.
pub const CHECKPOINT_MAGIC: [u8; 8] = *b"BAMCKPT1";

/// Failure modes of checkpoint serialization.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version '{found}', this build reads version '1'")]
    VersionMismatch { found: char },
    #[error("corrupt checkpoint: expected at least {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("corrupt checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("unsupported tensor dtype '{0}'")]
    UnsupportedDtype(String),
    #[error("unsupported constraint tag '{0}'")]
    UnsupportedConstraint(String),
    #[error(
        "checkpoint does not match the model: missing parameters {missing:?}, \
         unexpected parameters {extra:?}"
    )]
    ParamMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },
    #[error("parameter '{name}' has shape {found:?}, the model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("corrupt checkpoint: parameter '{name}' contains non-finite values")]
    NonFinite { name: String },
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset of the tensor's values within the blob section.
    offset: u64,
    constraint: String,
}

fn constraint_tag(constraint: Constraint) -> &'static str {
    match constraint {
        Constraint::Free => "free",
        Constraint::NonNegative => "non_negative",
        Constraint::SimplexSubOne => "simplex_sub_one",
    }
}

fn parse_constraint(tag: &str) -> Result<Constraint, CheckpointError> {
    match tag {
        "free" => Ok(Constraint::Free),
        "non_negative" => Ok(Constraint::NonNegative),
        "simplex_sub_one" => Ok(Constraint::SimplexSubOne),
        other => Err(CheckpointError::UnsupportedConstraint(other.to_owned())),
    }
}

/// Writes the parameter store to `path`.
///
/// Layout: 8 magic bytes, a little-endian `u64` header length, a JSON header
/// mapping each parameter name to its shape, dtype, blob offset, and
/// constraint tag, then the values packed as little-endian 64-bit floats.
/// Parameters are laid out in name order, so the bytes are deterministic.
pub fn checkpoint_save<F: Real>(store: &ParamStore<F>, path: &Path) -> Result<(), CheckpointError> {
    let mut header = BTreeMap::new();
    let mut blob: Vec<u8> = Vec::new();
    for (name, entry) in store.iter() {
        let offset = blob.len() as u64;
        for &value in entry.value.iter() {
            blob.extend_from_slice(&value.to_f64().to_le_bytes());
        }
        header.insert(
            name.to_owned(),
            HeaderEntry {
                shape: entry.value.shape().to_vec(),
                dtype: F::DTYPE.to_owned(),
                offset,
                constraint: constraint_tag(entry.constraint).to_owned(),
            },
        );
    }
    let header_json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(16 + header_json.len() + blob.len());
    bytes.extend_from_slice(&CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&blob);
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a parameter store back from `path`, casting values to `F`.
pub fn checkpoint_load<F: Real>(path: &Path) -> Result<ParamStore<F>, CheckpointError> {
    let bytes = fs::read(path)?;
    let len = bytes.len() as u64;
    if len < 16 {
        return Err(CheckpointError::Truncated {
            expected: 16,
            found: len,
        });
    }
    if bytes[..8] != CHECKPOINT_MAGIC {
        if bytes.starts_with(b"BAMCKPT") {
            return Err(CheckpointError::VersionMismatch {
                found: bytes[7] as char,
            });
        }
        return Err(CheckpointError::BadMagic);
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("eight bytes"));
    let blob_start = 16u64 + header_len;
    if len < blob_start {
        return Err(CheckpointError::Truncated {
            expected: blob_start,
            found: len,
        });
    }
    let header: BTreeMap<String, HeaderEntry> =
        serde_json::from_slice(&bytes[16..blob_start as usize])?;
    let blob = &bytes[blob_start as usize..];
    let mut store = ParamStore::new();
    for (name, entry) in &header {
        let count: usize = entry.shape.iter().product();
        if entry.dtype != "f64" && entry.dtype != "f32" {
            return Err(CheckpointError::UnsupportedDtype(entry.dtype.clone()));
        }
        let end = entry.offset + 8 * count as u64;
        if (blob.len() as u64) < end {
            return Err(CheckpointError::Truncated {
                expected: blob_start + end,
                found: len,
            });
        }
        let start = entry.offset as usize;
        let values: Vec<F> = blob[start..start + 8 * count]
            .chunks_exact(8)
            .map(|chunk| F::cast(f64::from_le_bytes(chunk.try_into().expect("eight bytes"))))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CheckpointError::NonFinite { name: name.clone() });
        }
        let value = ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
            .expect("shape and value count agree by construction");
        store.insert(name, value, parse_constraint(&entry.constraint)?);
    }
    Ok(store)
}

/// Loads a checkpoint and verifies it carries exactly the parameters the
/// model configuration defines, with matching shapes.
pub fn checkpoint_load_for_model<F: Real>(
    path: &Path,
    model: &ModelConfig,
) -> Result<ParamStore<F>, CheckpointError> {
    let probe = net::init_params::<F>(model, &mut substream(0, "checkpoint/shape-probe"));
    checkpoint_load_matching(path, &probe)
}

/// Loads a checkpoint and verifies that its parameter names and shapes
/// match `probe`, a freshly initialized parameter set of the intended
/// architecture.
pub fn checkpoint_load_matching<F: Real>(
    path: &Path,
    probe: &ParamStore<F>,
) -> Result<ParamStore<F>, CheckpointError> {
    let store = checkpoint_load::<F>(path)?;
    let missing: Vec<String> = probe
        .iter()
        .map(|(name, _)| name.to_owned())
        .filter(|name| store.get(name).is_none())
        .collect();
    let extra: Vec<String> = store
        .iter()
        .map(|(name, _)| name.to_owned())
        .filter(|name| probe.get(name).is_none())
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(CheckpointError::ParamMismatch { missing, extra });
    }
    for (name, expected) in probe.iter() {
        let found = &store.get(name).expect("name sets match").value;
        if found.shape() != expected.value.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_owned(),
                expected: expected.value.shape().to_vec(),
                found: found.shape().to_vec(),
            });
        }
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::graphs::{derive_three_class_labels, sample_er_dag};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn labels_for(d: usize, seed: u64) -> ThreeClassLabels {
        let mut rng = substream(seed, "train-test/labels");
        let g = sample_er_dag(d, 2, &mut rng).unwrap();
        derive_three_class_labels(&g)
    }

    fn random_prediction(d: usize, seed: u64) -> Array3<f64> {
        let mut rng = substream(seed, "train-test/pred");
        let mut pred = Array3::zeros((d, d, 3));
        for i in 0..d {
            for j in 0..d {
                let raw: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..1.0));
                let norm: f64 = raw.iter().sum();
                for c in 0..3 {
                    pred[[i, j, c]] = raw[c] / norm;
                }
            }
        }
        pred
    }

    fn scalar_loss_oracle(pred: &Array3<f64>, labels: &ThreeClassLabels) -> LossBreakdown {
        let d = labels.d();
        let clamp = |p: f64| p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        let one_hot = labels.one_hot();
        let mut categorical = 0.0;
        let mut binary = 0.0;
        let mut penalty = 0.0;
        for i in 1..d {
            for j in 0..i {
                for c in 0..3 {
                    categorical -= one_hot[[i, j, c]] * clamp(pred[[i, j, c]]).ln();
                }
                let edge = f64::from(labels.class_matrix()[[i, j]] >= 1);
                let edge_prob = clamp(pred[[i, j, 1]] + pred[[i, j, 2]]);
                binary -= edge * edge_prob.ln() + (1.0 - edge) * (1.0 - edge_prob).ln();
                let support: f64 = (0..d).map(|k| pred[[i, k, 1]] * pred[[k, j, 1]]).sum();
                penalty += (pred[[i, j, 2]] - support.max(SUPPORT_FLOOR).sqrt()).max(0.0);
            }
        }
        LossBreakdown::from_parts(binary, categorical, penalty)
    }

    #[test]
    fn loss_matches_scalar_oracle() {
        for seed in 0..5 {
            let labels = labels_for(5, seed);
            let pred = random_prediction(5, seed + 100);
            let got = loss_of_prediction(&pred, &labels).unwrap();
            let want = scalar_loss_oracle(&pred, &labels);
            assert_abs_diff_eq!(got.binary, want.binary, epsilon = 1e-10);
            assert_abs_diff_eq!(got.categorical, want.categorical, epsilon = 1e-10);
            assert_abs_diff_eq!(got.penalty, want.penalty, epsilon = 1e-10);
            assert_abs_diff_eq!(got.total, want.total, epsilon = 1e-10);
        }
    }

    #[test]
    fn total_is_exactly_the_sum_of_terms() {
        let labels = labels_for(6, 3);
        let pred = random_prediction(6, 9);
        let b = loss_of_prediction(&pred, &labels).unwrap();
        assert_eq!(b.total, b.binary + b.categorical + b.penalty);
    }

    #[test]
    fn perfect_prediction_has_near_zero_loss() {
        let labels = labels_for(6, 11);
        let d = labels.d();
        let pred = labels.one_hot();
        let b = loss_of_prediction(&pred, &labels).unwrap();
        let budget = (d * d) as f64 * 1e-6;
        assert!(b.categorical <= budget, "categorical = {}", b.categorical);
        assert!(b.binary <= budget, "binary = {}", b.binary);
        assert_eq!(b.penalty, 0.0);
    }

    #[test]
    fn unsupported_moralized_mass_is_penalized() {
        // No skeleton mass anywhere, all moralized mass at one pair: the
        // penalty must equal that pair's moralized probability.
        let labels = labels_for(3, 17);
        let mut pred = Array3::zeros((3, 3, 3));
        for i in 0..3 {
            for j in 0..3 {
                pred[[i, j, 0]] = 1.0;
            }
        }
        pred[[2, 1, 0]] = 0.5;
        pred[[2, 1, 2]] = 0.5;
        let b = loss_of_prediction(&pred, &labels).unwrap();
        assert_abs_diff_eq!(b.penalty, 0.5, epsilon = 1e-5);
    }

    #[test]
    fn supported_moralized_mass_is_not_penalized() {
        // Moralized mass at (1, 0) backed by skeleton edges 1-2 and 2-0.
        let labels = labels_for(3, 19);
        let mut pred = Array3::zeros((3, 3, 3));
        for i in 0..3 {
            for j in 0..3 {
                pred[[i, j, 0]] = 1.0;
            }
        }
        for (i, j) in [(1, 2), (2, 1), (0, 2), (2, 0)] {
            pred[[i, j, 0]] = 0.0;
            pred[[i, j, 1]] = 1.0;
        }
        pred[[1, 0, 0]] = 0.1;
        pred[[1, 0, 2]] = 0.9;
        let b = loss_of_prediction(&pred, &labels).unwrap();
        assert_eq!(b.penalty, 0.0);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let labels = labels_for(4, 23);
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert(
            "pred",
            random_prediction(4, 29).into_dyn(),
            Constraint::Free,
        );
        let err = grad_check(&mut store, 1e-5, |tape, store| {
            let pred = tape.param(store, "pred");
            loss_total(pred, &labels).unwrap().total
        });
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn rejects_mismatched_prediction_shape() {
        let labels = labels_for(4, 31);
        let pred = random_prediction(5, 31);
        let err = loss_of_prediction(&pred, &labels).unwrap_err();
        assert!(matches!(err, TrainError::PredictionShape { d: 4, .. }));
    }

    #[test]
    fn learning_rate_decays_tenfold_over_half_the_default_schedule() {
        let config = TrainConfig::default();
        assert_abs_diff_eq!(config.learning_rate_at(0), 5e-4, epsilon = 1e-18);
        assert_abs_diff_eq!(config.learning_rate_at(500), 5e-5, epsilon = 1e-12);
    }

    #[test]
    fn adam_matches_a_scalar_reference() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert(
            "w",
            ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.0, 2.0]).unwrap(),
            Constraint::Free,
        );
        let grad = ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.5, -1.0]).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_owned(), grad.clone());
        let mut adam = Adam::new();
        let lr = 0.1;
        for _ in 0..3 {
            adam.step(&mut store, &grads, lr).unwrap();
        }

        let mut expected = [1.0f64, 2.0];
        let mut m = [0.0f64; 2];
        let mut v = [0.0f64; 2];
        for t in 1..=3 {
            for k in 0..2 {
                let g = grad[[k]];
                m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g;
                v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = m[k] / (1.0 - ADAM_BETA1.powi(t));
                let v_hat = v[k] / (1.0 - ADAM_BETA2.powi(t));
                expected[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        let got = &store.get("w").unwrap().value;
        for k in 0..2 {
            assert_abs_diff_eq!(got[[k]], expected[k], epsilon = 1e-15);
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradients_by_name() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert(
            "w",
            ArrayD::from_shape_vec(IxDyn(&[1]), vec![1.0]).unwrap(),
            Constraint::Free,
        );
        let mut grads = BTreeMap::new();
        grads.insert(
            "w".to_owned(),
            ArrayD::from_shape_vec(IxDyn(&[1]), vec![f64::NAN]).unwrap(),
        );
        let err = Adam::new().step(&mut store, &grads, 0.1).unwrap_err();
        match err {
            TrainError::NonFiniteGradient { name, .. } => assert_eq!(name, "w"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn adam_projects_constrained_parameters() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert(
            "cone",
            ArrayD::from_shape_vec(IxDyn(&[1]), vec![0.01]).unwrap(),
            Constraint::NonNegative,
        );
        let mut grads = BTreeMap::new();
        grads.insert(
            "cone".to_owned(),
            ArrayD::from_shape_vec(IxDyn(&[1]), vec![5.0]).unwrap(),
        );
        Adam::new().step(&mut store, &grads, 0.1).unwrap();
        assert_eq!(store.get("cone").unwrap().value[[0]], 0.0);
    }

    #[test]
    fn config_validation_rejects_bad_hyperparameters() {
        let good = TrainConfig {
            model: ModelConfig::tiny(),
            ..TrainConfig::default()
        };
        assert!(good.validate().is_ok());
        for breakage in [
            |c: &mut TrainConfig| c.initial_lr = 0.0,
            |c: &mut TrainConfig| c.lr_decay_factor_per_epoch = 0.0,
            |c: &mut TrainConfig| c.lr_decay_factor_per_epoch = 1.5,
            |c: &mut TrainConfig| c.minibatch = 0,
            |c: &mut TrainConfig| c.samples_per_epoch = 0,
            |c: &mut TrainConfig| c.world.d_min = 1,
            |c: &mut TrainConfig| c.world.m_max = 0,
        ] {
            let mut bad = good.clone();
            breakage(&mut bad);
            assert!(matches!(bad.validate(), Err(TrainError::InvalidConfig(_))));
        }
    }

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            samples_per_epoch: 2,
            initial_lr: 1e-3,
            lr_decay_factor_per_epoch: 0.99,
            minibatch: 1,
            seed: 42,
            model: ModelConfig::tiny(),
            world: WorldRanges {
                d_min: 3,
                d_max: 4,
                m_min: 12,
                m_max: 16,
            },
        }
    }

    #[test]
    fn training_is_reproducible_from_the_seed() {
        let config = tiny_train_config();
        let a = train_on_the_fly::<f64>(&config, |_| {}).unwrap();
        let b = train_on_the_fly::<f64>(&config, |_| {}).unwrap();
        assert_eq!(a.trace.len(), 2);
        for (x, y) in a.trace.iter().zip(&b.trace) {
            assert_eq!(x.epoch, y.epoch);
            assert_eq!(x.loss.total.to_bits(), y.loss.total.to_bits());
            assert_eq!(x.loss.binary.to_bits(), y.loss.binary.to_bits());
            assert_eq!(x.loss.categorical.to_bits(), y.loss.categorical.to_bits());
            assert_eq!(x.loss.penalty.to_bits(), y.loss.penalty.to_bits());
        }
        for (name, entry) in a.params.iter() {
            let other = &b.params.get(name).unwrap().value;
            assert_eq!(entry.value.shape(), other.shape());
            for (x, y) in entry.value.iter().zip(other.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "parameter {name} diverged");
            }
        }
    }

    #[test]
    fn minibatch_grouping_changes_the_step_count_not_the_data() {
        let mut config = tiny_train_config();
        config.minibatch = 2;
        let outcome = train_on_the_fly::<f64>(&config, |_| {}).unwrap();
        assert_eq!(outcome.trace.len(), config.epochs);
        assert!(outcome.trace.iter().all(|s| s.loss.total.is_finite()));
    }

    #[test]
    fn epoch_callback_sees_every_epoch_in_order() {
        let config = tiny_train_config();
        let mut seen = Vec::new();
        let outcome = train_on_the_fly::<f64>(&config, |s| seen.push(s.epoch)).unwrap();
        assert_eq!(seen, vec![0, 1]);
        assert_eq!(outcome.trace[0].epoch, 0);
    }

    #[test]
    fn mean_eval_loss_averages_per_pair_losses() {
        let config = tiny_train_config();
        let mut rng = substream(5, "train-test/eval-pairs");
        let pairs: Vec<_> = (0..2)
            .map(|_| semgen::generate_training_pair_in(&config.world, &mut rng).unwrap())
            .collect();
        let store = net::init_params::<f64>(&config.model, &mut substream(5, "train-test/init"));
        let mean = mean_eval_loss(&store, &config.model, &pairs).unwrap();
        let mut sums = [0.0f64; 3];
        for (data, labels) in &pairs {
            let tape: Tape<f64> = Tape::new();
            let pred = net::model_forward(&tape, &store, data, &config.model).unwrap();
            let b = loss_total(pred, labels).unwrap().breakdown();
            sums[0] += b.binary;
            sums[1] += b.categorical;
            sums[2] += b.penalty;
        }
        assert_abs_diff_eq!(mean.binary, sums[0] / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(mean.categorical, sums[1] / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(mean.penalty, sums[2] / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let model = ModelConfig::tiny();
        let store = net::init_params::<f64>(&model, &mut substream(7, "train-test/ckpt"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        checkpoint_save(&store, &path).unwrap();
        let loaded = checkpoint_load::<f64>(&path).unwrap();
        assert_eq!(store.scalar_count(), loaded.scalar_count());
        for (name, entry) in store.iter() {
            let other = loaded.get(name).unwrap();
            assert_eq!(entry.constraint, other.constraint, "constraint of {name}");
            assert_eq!(entry.value.shape(), other.value.shape());
            for (a, b) in entry.value.iter().zip(other.value.iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "values of {name}");
            }
        }
    }

    #[test]
    fn checkpoint_bytes_are_deterministic() {
        let model = ModelConfig::tiny();
        let store = net::init_params::<f64>(&model, &mut substream(9, "train-test/ckpt"));
        let dir = tempfile::tempdir().unwrap();
        let first = dir.path().join("a.ckpt");
        let second = dir.path().join("b.ckpt");
        checkpoint_save(&store, &first).unwrap();
        let reloaded = checkpoint_load::<f64>(&first).unwrap();
        checkpoint_save(&reloaded, &second).unwrap();
        assert_eq!(fs::read(&first).unwrap(), fs::read(&second).unwrap());
    }

    #[test]
    fn checkpoint_rejects_foreign_and_future_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"PNGDATA!plus some trailing bytes").unwrap();
        assert!(matches!(
            checkpoint_load::<f64>(&path).unwrap_err(),
            CheckpointError::BadMagic
        ));
        fs::write(&path, b"BAMCKPT9\0\0\0\0\0\0\0\0").unwrap();
        assert!(matches!(
            checkpoint_load::<f64>(&path).unwrap_err(),
            CheckpointError::VersionMismatch { found: '9' }
        ));
    }

    #[test]
    fn checkpoint_reports_truncation_with_expected_size() {
        let model = ModelConfig::tiny();
        let store = net::init_params::<f64>(&model, &mut substream(11, "train-test/ckpt"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        checkpoint_save(&store, &path).unwrap();
        let full = fs::read(&path).unwrap();
        fs::write(&path, &full[..full.len() - 9]).unwrap();
        match checkpoint_load::<f64>(&path).unwrap_err() {
            CheckpointError::Truncated { expected, found } => {
                assert_eq!(found, (full.len() - 9) as u64);
                assert!(expected > found);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn checkpoint_for_mismatched_model_lists_parameter_names() {
        let small = ModelConfig::tiny();
        let mut bigger = ModelConfig::tiny();
        bigger.bilinear_layers = 2;
        let store = net::init_params::<f64>(&small, &mut substream(13, "train-test/ckpt"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        checkpoint_save(&store, &path).unwrap();
        assert!(checkpoint_load_for_model::<f64>(&path, &small).is_ok());
        match checkpoint_load_for_model::<f64>(&path, &bigger).unwrap_err() {
            CheckpointError::ParamMismatch { missing, extra } => {
                assert!(missing.iter().any(|n| n.starts_with("bilin1.")));
                assert!(extra.is_empty());
            }
            other => panic!("unexpected error {other:?}"),
        }
    }
}
