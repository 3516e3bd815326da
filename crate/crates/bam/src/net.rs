//! Shape-agnostic three-class edge classifier: channel embedding, axial
//! observational attention, per-channel covariance, bilinear attention on the
//! SPD cone with a spectrum-regularizing softmax, Log-Eig, and a softmax head.

use std::fmt;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    concat, eig_values, eig_vectors, layer_norm, scaled_dot_attention, sym_eig_packed, Constraint,
    DiffError, ParamStore, Real, Tape, Var,
};

/// Eigenvalues are floored here before the matrix logarithm.
pub const LOG_EIG_FLOOR: f64 = 1e-6;
/// Diagonal floor used when converting covariance to correlation form.
pub const CORRELATION_FLOOR: f64 = 1e-12;
const LAYER_NORM_EPS: f64 = 1e-5;

/// Floating-point width used by the CLI when instantiating the generic model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::F32 => write!(f, "f32"),
            Precision::F64 => write!(f, "f64"),
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("unknown precision {other:?}; use f32 or f64")),
        }
    }
}

/// Architecture hyperparameters. All layer counts may be zero, which skips
/// the corresponding stage entirely.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Channel count `C` of the hidden representation.
    pub channels: usize,
    /// Inner key/query width `c` of the observational attention.
    pub attn_channels: usize,
    /// Head count; must divide both channel widths.
    pub heads: usize,
    /// Attention layers across the variable axis.
    pub attr_layers: usize,
    /// Attention layers across the sample axis.
    pub sample_layers: usize,
    /// Feed-forward channel mixers interleaved with the attention pairs.
    pub dense_layers: usize,
    /// Bilinear attention + activation rounds on the covariance stack.
    pub bilinear_layers: usize,
    /// Maximal degree of the learnable matrix-power activation.
    pub activation_degree: usize,
    /// Floating-point width the CLI should run this model at.
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 100,
            attn_channels: 100,
            heads: 5,
            attr_layers: 10,
            sample_layers: 10,
            dense_layers: 10,
            bilinear_layers: 10,
            activation_degree: 3,
            precision: Precision::F64,
        }
    }
}

impl ModelConfig {
    /// A small configuration that trains on one desktop core in minutes.
    pub fn desk() -> Self {
        ModelConfig {
            channels: 32,
            attn_channels: 32,
            heads: 4,
            attr_layers: 2,
            sample_layers: 2,
            dense_layers: 2,
            bilinear_layers: 2,
            activation_degree: 3,
            precision: Precision::F64,
        }
    }

    /// A toy configuration small enough for finite-difference tests.
    pub fn tiny() -> Self {
        ModelConfig {
            channels: 6,
            attn_channels: 6,
            heads: 2,
            attr_layers: 1,
            sample_layers: 1,
            dense_layers: 1,
            bilinear_layers: 1,
            activation_degree: 3,
            precision: Precision::F64,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.channels == 0 || self.attn_channels == 0 || self.heads == 0 {
            return Err(NetError::InvalidConfig(
                "channels, attn_channels and heads must be positive".into(),
            ));
        }
        if self.channels % self.heads != 0 {
            return Err(NetError::InvalidConfig(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if self.attn_channels % self.heads != 0 {
            return Err(NetError::InvalidConfig(format!(
                "attn_channels {} not divisible by heads {}",
                self.attn_channels, self.heads
            )));
        }
        if self.activation_degree == 0 {
            return Err(NetError::InvalidConfig(
                "activation_degree must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("input matrix contains non-finite entries")]
    NonFiniteInput,
    #[error("input must have at least 2 rows and 2 columns, got {rows}x{cols}")]
    InputTooSmall { rows: usize, cols: usize },
    #[error(transparent)]
    Eig(#[from] DiffError),
}

/// Which space a traced intermediate value lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSpace {
    Euclidean,
    Spd,
    Probability,
}

/// A named intermediate tensor captured during a traced forward pass.
#[derive(Debug, Clone)]
pub struct TraceStage<F: Real> {
    pub name: String,
    pub space: StageSpace,
    pub value: ArrayD<F>,
}

/// Intermediate tensors of one forward pass, in evaluation order.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace<F: Real> {
    pub stages: Vec<TraceStage<F>>,
}

impl<F: Real> ForwardTrace<F> {
    pub fn stage(&self, name: &str) -> Option<&TraceStage<F>> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// All traced stages lying on the SPD manifold.
    pub fn spd_stages(&self) -> impl Iterator<Item = &TraceStage<F>> {
        self.stages.iter().filter(|s| s.space == StageSpace::Spd)
    }
}

pub(crate) struct TraceSink<F: Real> {
    enabled: bool,
    stages: Vec<TraceStage<F>>,
}

impl<F: Real> TraceSink<F> {
    pub(crate) fn disabled() -> Self {
        TraceSink {
            enabled: false,
            stages: Vec::new(),
        }
    }

    fn record(&mut self, name: String, space: StageSpace, var: Var<'_, F>) {
        if self.enabled {
            self.stages.push(TraceStage {
                name,
                space,
                value: (*var.value()).clone(),
            });
        }
    }
}

pub(crate) fn glorot_uniform<F: Real>(rng: &mut impl Rng, rows: usize, cols: usize) -> ArrayD<F> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(&[rows, cols]), |_| {
        F::cast(rng.random_range(-limit..=limit))
    })
}

fn cone_uniform<F: Real>(rng: &mut impl Rng, rows: usize, cols: usize) -> ArrayD<F> {
    let hi = 2.0 / rows as f64;
    ArrayD::from_shape_fn(IxDyn(&[rows, cols]), |_| F::cast(rng.random_range(0.0..hi)))
}

pub(crate) fn zeros<F: Real>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::from_elem(IxDyn(shape), F::zero())
}

fn ones<F: Real>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::from_elem(IxDyn(shape), F::one())
}

fn insert_norm_and_gate<F: Real>(store: &mut ParamStore<F>, prefix: &str, width: usize) {
    store.insert(
        &format!("{prefix}.ln.gain"),
        ones(&[width]),
        Constraint::Free,
    );
    store.insert(
        &format!("{prefix}.ln.bias"),
        zeros(&[width]),
        Constraint::Free,
    );
    store.insert(&format!("{prefix}.gamma"), zeros(&[1]), Constraint::Free);
}

/// Fresh parameters for `config`, keyed by a stable naming scheme so that
/// optimizer state, checkpoints, and gradients all align.
pub fn init_params<F: Real>(config: &ModelConfig, rng: &mut impl Rng) -> ParamStore<F> {
    let c = config.channels;
    let mut store = ParamStore::new();

    store.insert("embed.w1", glorot_uniform(rng, 1, c), Constraint::Free);
    store.insert("embed.w2", glorot_uniform(rng, c, c), Constraint::Free);

    init_trunk_params(&mut store, config, rng);

    // The head starts at zero so an untrained model emits the uniform
    // three-class distribution; class gradients break the symmetry at step 1.
    store.insert("head.w", zeros(&[c, 3]), Constraint::Free);
    store.insert("head.b", zeros(&[3]), Constraint::Free);
    store
}

/// Parameters of the shared observation-to-dependency trunk: attention
/// rounds, dense blocks, bilinear stack, and activation weights.
pub(crate) fn init_trunk_params<F: Real>(
    store: &mut ParamStore<F>,
    config: &ModelConfig,
    rng: &mut impl Rng,
) {
    let c = config.channels;
    let ch = c / config.heads;
    let inner_h = config.attn_channels / config.heads;

    for (kind, count) in [("attr", config.attr_layers), ("samp", config.sample_layers)] {
        for i in 0..count {
            let prefix = format!("{kind}{i}");
            for h in 0..config.heads {
                store.insert(
                    &format!("{prefix}.h{h}.wk"),
                    glorot_uniform(rng, ch, inner_h),
                    Constraint::Free,
                );
                store.insert(
                    &format!("{prefix}.h{h}.wq"),
                    glorot_uniform(rng, ch, inner_h),
                    Constraint::Free,
                );
                store.insert(
                    &format!("{prefix}.h{h}.wv"),
                    glorot_uniform(rng, ch, ch),
                    Constraint::Free,
                );
            }
            insert_norm_and_gate(store, &prefix, c);
        }
    }

    for i in 0..config.dense_layers {
        let prefix = format!("dense{i}");
        store.insert(
            &format!("{prefix}.w1"),
            glorot_uniform(rng, c, c),
            Constraint::Free,
        );
        store.insert(&format!("{prefix}.b1"), zeros(&[c]), Constraint::Free);
        store.insert(
            &format!("{prefix}.w2"),
            glorot_uniform(rng, c, c),
            Constraint::Free,
        );
        store.insert(&format!("{prefix}.b2"), zeros(&[c]), Constraint::Free);
        insert_norm_and_gate(store, &prefix, c);
    }

    for i in 0..config.bilinear_layers {
        let prefix = format!("bilin{i}");
        for h in 0..config.heads {
            store.insert(
                &format!("{prefix}.h{h}.wk"),
                cone_uniform(rng, ch, ch),
                Constraint::NonNegative,
            );
            store.insert(
                &format!("{prefix}.h{h}.wq"),
                cone_uniform(rng, ch, ch),
                Constraint::NonNegative,
            );
        }
        store.insert(
            &format!("{prefix}.gamma"),
            zeros(&[1]),
            Constraint::NonNegative,
        );
        let mut raw = zeros::<F>(&[config.activation_degree]);
        raw.iter_mut().enumerate().for_each(|(k, v)| {
            *v = F::cast(if k == 0 { 2.0 } else { -2.0 });
        });
        store.insert(&format!("act{i}.raw"), raw, Constraint::SimplexSubOne);
    }
}

/// Lifts a scalar input matrix into `C` channels:
/// `H = X̃ + relu(X̃ W₁) W₂` with broadcasting over the new channel axis.
pub fn channel_embed<'t, F: Real>(
    tape: &'t Tape<F>,
    store: &ParamStore<F>,
    x: &Array2<F>,
) -> Var<'t, F> {
    let (m, d) = x.dim();
    let lifted = tape.constant(
        ArrayD::from_shape_vec(IxDyn(&[m, d, 1]), x.iter().copied().collect())
            .expect("matrix reshapes to [M, d, 1]"),
    );
    let w1 = tape.param(store, "embed.w1");
    let w2 = tape.param(store, "embed.w2");
    lifted + lifted.contract_last(w1).relu().contract_last(w2)
}

/// One pre-normalized, gated multi-head attention layer over the middle axis
/// of a `[batch, tokens, C]` tensor.
pub fn attention_layer<'t, F: Real>(
    store: &ParamStore<F>,
    h: Var<'t, F>,
    prefix: &str,
    config: &ModelConfig,
) -> Var<'t, F> {
    let tape = h.tape();
    let gain = tape.param(store, &format!("{prefix}.ln.gain"));
    let bias = tape.param(store, &format!("{prefix}.ln.bias"));
    let normed = layer_norm(h, gain, bias, F::cast(LAYER_NORM_EPS));
    let ch = config.channels / config.heads;
    let mut heads = Vec::with_capacity(config.heads);
    for i in 0..config.heads {
        let slice = normed.slice_axis(2, i * ch, ch);
        let k = slice.contract_last(tape.param(store, &format!("{prefix}.h{i}.wk")));
        let q = slice.contract_last(tape.param(store, &format!("{prefix}.h{i}.wq")));
        let v = slice.contract_last(tape.param(store, &format!("{prefix}.h{i}.wv")));
        heads.push(scaled_dot_attention(k, q, v));
    }
    let attended = concat(2, &heads);
    let gamma = tape.param(store, &format!("{prefix}.gamma"));
    h + gamma * attended
}

/// One pre-normalized, gated feed-forward channel mixer.
pub fn dense_layer<'t, F: Real>(store: &ParamStore<F>, h: Var<'t, F>, prefix: &str) -> Var<'t, F> {
    let tape = h.tape();
    let gain = tape.param(store, &format!("{prefix}.ln.gain"));
    let bias = tape.param(store, &format!("{prefix}.ln.bias"));
    let normed = layer_norm(h, gain, bias, F::cast(LAYER_NORM_EPS));
    let w1 = tape.param(store, &format!("{prefix}.w1"));
    let b1 = tape.param(store, &format!("{prefix}.b1"));
    let w2 = tape.param(store, &format!("{prefix}.w2"));
    let b2 = tape.param(store, &format!("{prefix}.b2"));
    let f = (normed.contract_last(w1) + b1).relu().contract_last(w2) + b2;
    let gamma = tape.param(store, &format!("{prefix}.gamma"));
    h + gamma * f
}

/// Per-channel sample covariance of a `[M, d, C]` representation, returned as
/// a `[C, d, d]` stack with the unbiased `M − 1` denominator.
pub fn channel_covariance<'t, F: Real>(h: Var<'t, F>) -> Var<'t, F> {
    let shape = h.shape();
    let (m, d, c) = (shape[0], shape[1], shape[2]);
    let per_channel = h.permute_axes(&[2, 0, 1]);
    let mean = per_channel.mean_axis(1).reshape(&[c, 1, d]);
    let centered = per_channel - mean;
    centered
        .transpose_last2()
        .batched_matmul(centered)
        .mul_scalar(F::one() / F::cast((m - 1) as f64))
}

/// Rescales every channel to unit diagonal: `D^{-1/2} S D^{-1/2}` with
/// `D = diag(S)` floored at a small positive constant.
pub fn correlation_normalize<'t, F: Real>(s: Var<'t, F>) -> Var<'t, F> {
    let shape = s.shape();
    let nd = shape.len();
    let inv_root = s
        .diag_part()
        .clamp_min(F::cast(CORRELATION_FLOOR))
        .sqrt()
        .recip();
    let mut row_shape = shape.clone();
    row_shape[nd - 1] = 1;
    let mut col_shape = shape;
    col_shape[nd - 2] = 1;
    s * inv_root.reshape(&row_shape) * inv_root.reshape(&col_shape)
}

/// Spectrum-regularizing softmax on a stack of symmetric matrices:
/// `σ̃(S) = √Λ · exp[S] · √Λ` with `Λ = diag(1 / (exp[S]·1))`, where the
/// exponential acts elementwise. The maximal entry of each matrix is
/// subtracted before exponentiation; the map is invariant to such shifts, so
/// the guard is a detached constant that changes no value and no gradient.
pub fn custom_spd_softmax<'t, F: Real>(s: Var<'t, F>) -> Var<'t, F> {
    let tape = s.tape();
    let value = s.value();
    let shape = value.shape().to_vec();
    let nd = shape.len();
    let d = shape[nd - 1];
    assert!(
        nd >= 2 && shape[nd - 2] == d,
        "expected square trailing axes"
    );

    let matrix_count: usize = shape[..nd - 2].iter().product::<usize>().max(1);
    let mut shift_shape = shape.clone();
    shift_shape[nd - 1] = 1;
    shift_shape[nd - 2] = 1;
    let flat: Vec<F> = value.iter().copied().collect();
    let shifts: Vec<F> = (0..matrix_count)
        .map(|i| {
            flat[i * d * d..(i + 1) * d * d]
                .iter()
                .fold(F::neg_infinity(), |m, &v| m.max(v))
        })
        .collect();
    let shift = tape.constant(
        ArrayD::from_shape_vec(IxDyn(&shift_shape), shifts).expect("one shift per matrix"),
    );

    let exped = (s - shift).exp();
    let inv_root = exped.sum_axis(nd - 1).sqrt().recip();
    let mut row_shape = shape.clone();
    row_shape[nd - 1] = 1;
    let mut col_shape = shape;
    col_shape[nd - 2] = 1;
    exped * inv_root.reshape(&row_shape) * inv_root.reshape(&col_shape)
}

/// Multi-head bilinear attention over a `[C, d, d]` covariance stack:
/// nonnegative channel mixes form keys and queries, `B = K Q K` per channel,
/// `A = σ̃(B)`, and the output is the congruence `A S A`. Every step maps the
/// positive-semidefinite cone into itself.
pub fn bilinear_attention<'t, F: Real>(
    store: &ParamStore<F>,
    s: Var<'t, F>,
    prefix: &str,
    config: &ModelConfig,
) -> BilinearOutput<'t, F> {
    let tape = s.tape();
    let ch = config.channels / config.heads;
    let mut outputs = Vec::with_capacity(config.heads);
    let mut attentions = Vec::with_capacity(config.heads);
    for i in 0..config.heads {
        let sh = s.slice_axis(0, i * ch, ch);
        let mixable = sh.permute_axes(&[1, 2, 0]);
        let wk = tape.param(store, &format!("{prefix}.h{i}.wk"));
        let wq = tape.param(store, &format!("{prefix}.h{i}.wq"));
        let k = mixable.contract_last(wk).permute_axes(&[2, 0, 1]);
        let q = mixable.contract_last(wq).permute_axes(&[2, 0, 1]);
        let b = k.batched_matmul(q).batched_matmul(k);
        let a = custom_spd_softmax(b);
        attentions.push(a);
        outputs.push(a.batched_matmul(sh).batched_matmul(a));
    }
    BilinearOutput {
        value: concat(0, &outputs),
        attention: concat(0, &attentions),
    }
}

/// Result of one bilinear attention layer: the transformed stack and the
/// attention stack itself (useful for spectrum diagnostics).
pub struct BilinearOutput<'t, F: Real> {
    pub value: Var<'t, F>,
    pub attention: Var<'t, F>,
}

/// Learnable elementwise matrix-power activation
/// `f(S) = Σ_k w_k S^{∘k}` (Hadamard powers). With `w_k ≥ 0` and `Σ w_k ≤ 1`
/// this preserves positive semidefiniteness of correlation-normalized input.
pub fn spd_activation<'t, F: Real>(s: Var<'t, F>, weights: Var<'t, F>) -> Var<'t, F> {
    let degree = weights.shape()[0];
    let mut power = s;
    let mut acc: Option<Var<'t, F>> = None;
    for k in 0..degree {
        let wk = weights.slice_axis(0, k, 1);
        let term = power * wk;
        acc = Some(match acc {
            None => term,
            Some(a) => a + term,
        });
        if k + 1 < degree {
            power = power * s;
        }
    }
    acc.expect("activation degree is at least one")
}

/// Feasible activation weights from unconstrained parameters: softmax over
/// the raw entries extended by a virtual zero logit, so `w_k > 0` and
/// `Σ w_k < 1` hold for every raw value. The stabilizing shift is exactly
/// gradient-neutral and therefore entered as a detached constant.
pub fn simplex_weights<'t, F: Real>(
    tape: &'t Tape<F>,
    store: &ParamStore<F>,
    name: &str,
) -> Var<'t, F> {
    let raw = tape.param(store, name);
    let top = raw.value().iter().fold(0.0f64, |m, &v| m.max(v.to_f64()));
    let exped = raw.add_scalar(F::cast(-top)).exp();
    let denom = exped.sum_all().add_scalar(F::cast((-top).exp()));
    exped / denom
}

/// Maps an SPD stack to Euclidean space per channel: `U log(Λ) Uᵀ` with the
/// eigenvalues floored before the logarithm.
pub fn log_eig<'t, F: Real>(s: Var<'t, F>) -> Result<Var<'t, F>, DiffError> {
    let packed = sym_eig_packed(s)?;
    let u = eig_vectors(packed);
    let log_diag = eig_values(packed)
        .clamp_min(F::cast(LOG_EIG_FLOOR))
        .log()
        .diag_embed();
    Ok(u.batched_matmul(log_diag)
        .batched_matmul(u.transpose_last2()))
}

/// Dense `C → 3` map along the channel axis, softmax over classes, then
/// symmetrization `(P + Pᵀ)/2` and renormalization per pair.
pub fn output_head<'t, F: Real>(store: &ParamStore<F>, e: Var<'t, F>) -> Var<'t, F> {
    let tape = e.tape();
    let shape = e.shape();
    let d = shape[1];
    let w = tape.param(store, "head.w");
    let b = tape.param(store, "head.b");
    let logits = e.permute_axes(&[1, 2, 0]).contract_last(w) + b;
    let probs = logits.softmax_last();
    let symmetric = (probs + probs.permute_axes(&[1, 0, 2])).mul_scalar(F::cast(0.5));
    let total = symmetric.sum_axis(2).reshape(&[d, d, 1]);
    symmetric / total
}

fn forward_impl<'t, F: Real>(
    tape: &'t Tape<F>,
    store: &ParamStore<F>,
    x: &Array2<F>,
    config: &ModelConfig,
    sink: &mut TraceSink<F>,
) -> Result<Var<'t, F>, NetError> {
    config.validate()?;
    let (m, d) = x.dim();
    if m < 2 || d < 2 {
        return Err(NetError::InputTooSmall { rows: m, cols: d });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(NetError::NonFiniteInput);
    }

    let h = channel_embed(tape, store, x);
    sink.record("embed".into(), StageSpace::Euclidean, h);

    let euclidean = trunk_to_log_eig(tape, store, h, config, sink)?;

    let probs = output_head(store, euclidean);
    sink.record("probs".into(), StageSpace::Probability, probs);
    Ok(probs)
}

/// The shared observation-to-dependency trunk: attention/dense rounds over a
/// `[M, d, C]` representation, channel covariance, the bilinear stack on the
/// SPD cone, and the matrix logarithm back to a Euclidean `[d, d, C]` tensor.
pub(crate) fn trunk_to_log_eig<'t, F: Real>(
    tape: &'t Tape<F>,
    store: &ParamStore<F>,
    mut h: Var<'t, F>,
    config: &ModelConfig,
    sink: &mut TraceSink<F>,
) -> Result<Var<'t, F>, NetError> {
    let rounds = config
        .attr_layers
        .max(config.sample_layers)
        .max(config.dense_layers);
    for i in 0..rounds {
        if i < config.attr_layers {
            h = attention_layer(store, h, &format!("attr{i}"), config);
        }
        if i < config.sample_layers {
            let swapped = h.permute_axes(&[1, 0, 2]);
            let attended = attention_layer(store, swapped, &format!("samp{i}"), config);
            h = attended.permute_axes(&[1, 0, 2]);
        }
        if i < config.dense_layers {
            h = dense_layer(store, h, &format!("dense{i}"));
        }
    }
    sink.record("observational".into(), StageSpace::Euclidean, h);

    let mut s = channel_covariance(h);
    sink.record("covariance".into(), StageSpace::Spd, s);

    for i in 0..config.bilinear_layers {
        let inner = correlation_normalize(s);
        let block = bilinear_attention(store, inner, &format!("bilin{i}"), config);
        sink.record(
            format!("bilin{i}.attention"),
            StageSpace::Spd,
            block.attention,
        );
        let gamma = tape.param(store, &format!("bilin{i}.gamma"));
        s = correlation_normalize(s + gamma * block.value);
        sink.record(format!("bilin{i}.residual"), StageSpace::Spd, s);
        let weights = simplex_weights(tape, store, &format!("act{i}.raw"));
        s = spd_activation(s, weights);
        sink.record(format!("bilin{i}.activation"), StageSpace::Spd, s);
    }

    let euclidean = log_eig(s)?;
    sink.record("log_eig".into(), StageSpace::Euclidean, euclidean);
    Ok(euclidean)
}

/// Full forward pass: `[M, d]` data matrix to `[d, d, 3]` class
/// probabilities. Works for any input shape with the same parameters.
pub fn model_forward<'t, F: Real>(
    tape: &'t Tape<F>,
    store: &ParamStore<F>,
    x: &Array2<F>,
    config: &ModelConfig,
) -> Result<Var<'t, F>, NetError> {
    let mut sink = TraceSink::disabled();
    forward_impl(tape, store, x, config, &mut sink)
}

/// Forward pass that additionally captures every named intermediate tensor.
pub fn model_forward_traced<'t, F: Real>(
    tape: &'t Tape<F>,
    store: &ParamStore<F>,
    x: &Array2<F>,
    config: &ModelConfig,
) -> Result<(Var<'t, F>, ForwardTrace<F>), NetError> {
    let mut sink = TraceSink {
        enabled: true,
        stages: Vec::new(),
    };
    let probs = forward_impl(tape, store, x, config, &mut sink)?;
    Ok((
        probs,
        ForwardTrace {
            stages: sink.stages,
        },
    ))
}
