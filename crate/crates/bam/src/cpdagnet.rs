//! Second-stage network that tests estimated immoralities for true common
//! children, and the two-step CPDAG assembly with Meek closure.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{concat, Constraint, ParamStore, Real, Tape, Var};
use crate::graphs::{
    apply_meek_rules, sample_er_dag, sample_graph_params_in, Cpdag, DagSpec, GraphError,
    ThreeClassLabels, WorldRanges,
};
use crate::net::{self, ModelConfig, NetError, TraceSink};
use crate::rng::substream;
use crate::semgen::{sample_sem_spec, simulate_sem, standardize_columns, SemError};
use crate::train::{self, Adam, TrainError, PROB_FLOOR};
use rand::Rng;

/// Worlds are redrawn until one contains an immorality; give up after this
/// many attempts (plainly impossible ranges, e.g. two-variable worlds).
const MAX_WORLD_ATTEMPTS: usize = 10_000;

/// Failure modes of v-structure testing and CPDAG assembly.
#[derive(Debug, Error)]
pub enum CpdagNetError {
    #[error("pair ({0}, {1}) has no candidate common children")]
    NoCandidates(usize, usize),
    #[error("invalid immorality case: {0}")]
    InvalidCase(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no sampled world contained an immorality after {attempts} attempts")]
    NoImmoralityWorlds { attempts: usize },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("graph construction failed: {0}")]
    Graph(#[from] GraphError),
    #[error("data simulation failed: {0}")]
    Sem(#[from] SemError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// One estimated immorality together with the data columns of the roles
/// involved: the two parents, the candidate common children (skeleton
/// neighbors of both parents), and the neighbors of exactly one parent.
#[derive(Debug, Clone)]
pub struct ImmoralityCase {
    /// The moralized pair, stored as `(min, max)`.
    pub parents: (usize, usize),
    /// Global node ids of candidate common children, ascending.
    pub candidates: Vec<usize>,
    /// Global node ids of one-parent neighbors, ascending.
    pub neighbors: Vec<usize>,
    /// `M x 2` parent columns.
    pub x_pa: Array2<f64>,
    /// `M x |candidates|` candidate columns.
    pub x_cc: Array2<f64>,
    /// `M x |neighbors|` neighbor columns.
    pub x_ne: Array2<f64>,
    /// Ground-truth child indicators per candidate (training only).
    pub child_flags: Option<Vec<bool>>,
}

impl ImmoralityCase {
    /// Checks the structural invariants: at least one candidate, disjoint
    /// role ids, and column counts that match the id lists.
    pub fn validate(&self) -> Result<(), CpdagNetError> {
        if self.candidates.is_empty() {
            return Err(CpdagNetError::NoCandidates(self.parents.0, self.parents.1));
        }
        let m = self.x_pa.nrows();
        if m < 2 {
            return Err(CpdagNetError::InvalidCase(format!(
                "need at least 2 observations, got {m}"
            )));
        }
        if self.x_pa.ncols() != 2
            || self.x_cc.dim() != (m, self.candidates.len())
            || self.x_ne.dim() != (m, self.neighbors.len())
        {
            return Err(CpdagNetError::InvalidCase(
                "data block shapes do not match the role id lists".to_owned(),
            ));
        }
        let mut seen = BTreeSet::from([self.parents.0, self.parents.1]);
        if seen.len() != 2 {
            return Err(CpdagNetError::InvalidCase(
                "the two parents must be distinct".to_owned(),
            ));
        }
        for &node in self.candidates.iter().chain(&self.neighbors) {
            if !seen.insert(node) {
                return Err(CpdagNetError::InvalidCase(format!(
                    "node {node} appears in more than one role"
                )));
            }
        }
        if let Some(flags) = &self.child_flags {
            if flags.len() != self.candidates.len() {
                return Err(CpdagNetError::InvalidCase(
                    "child flags do not match the candidate list".to_owned(),
                ));
            }
        }
        Ok(())
    }

    fn finite(&self) -> bool {
        self.x_pa.iter().all(|v| v.is_finite())
            && self.x_cc.iter().all(|v| v.is_finite())
            && self.x_ne.iter().all(|v| v.is_finite())
    }
}

/// Builds the immorality case for `pair` from a skeleton and the data
/// matrix: candidates are skeleton neighbors of both parents, neighbors of
/// exactly one. Column blocks are re-standardized so the network always sees
/// zero-mean unit-variance inputs. With `truth` given, candidates are
/// flagged as true children when both parents point into them.
pub fn immorality_context(
    x: &Array2<f64>,
    skeleton: &BTreeSet<(usize, usize)>,
    pair: (usize, usize),
    truth: Option<&DagSpec>,
) -> Result<ImmoralityCase, CpdagNetError> {
    let d = x.ncols();
    let (a, b) = (pair.0.min(pair.1), pair.0.max(pair.1));
    if b >= d || a == b {
        return Err(CpdagNetError::InvalidCase(format!(
            "pair ({a}, {b}) is not a valid node pair for {d} variables"
        )));
    }
    let linked = |u: usize, v: usize| skeleton.contains(&(u.min(v), u.max(v)));
    let mut candidates = Vec::new();
    let mut neighbors = Vec::new();
    for k in 0..d {
        if k == a || k == b {
            continue;
        }
        match (linked(k, a), linked(k, b)) {
            (true, true) => candidates.push(k),
            (true, false) | (false, true) => neighbors.push(k),
            (false, false) => {}
        }
    }
    if candidates.is_empty() {
        return Err(CpdagNetError::NoCandidates(a, b));
    }
    let slice = |ids: &[usize]| {
        let block = Array2::from_shape_fn((x.nrows(), ids.len()), |(r, c)| x[[r, ids[c]]]);
        standardize_columns(&block)
    };
    let child_flags = truth.map(|g| {
        candidates
            .iter()
            .map(|&k| g.has_edge(a, k) && g.has_edge(b, k))
            .collect()
    });
    Ok(ImmoralityCase {
        parents: (a, b),
        x_pa: slice(&[a, b]),
        x_cc: slice(&candidates),
        x_ne: slice(&neighbors),
        candidates,
        neighbors,
        child_flags,
    })
}

/// Fresh parameters for the v-structure tester: three role embeddings, the
/// shared observation-to-dependency trunk, and a scalar output head.
pub fn init_vstructure_params<F: Real>(config: &ModelConfig, rng: &mut impl Rng) -> ParamStore<F> {
    let c = config.channels;
    let mut store = ParamStore::new();
    for role in ["pa", "cc", "ne"] {
        store.insert(
            &format!("{role}.embed.w1"),
            net::glorot_uniform(rng, 1, c),
            Constraint::Free,
        );
        store.insert(
            &format!("{role}.embed.b1"),
            net::zeros(&[c]),
            Constraint::Free,
        );
        store.insert(
            &format!("{role}.embed.wt"),
            net::glorot_uniform(rng, c, c),
            Constraint::Free,
        );
        for i in 1..=2 {
            store.insert(
                &format!("{role}.res{i}.w"),
                net::glorot_uniform(rng, c, c),
                Constraint::Free,
            );
            store.insert(
                &format!("{role}.res{i}.b"),
                net::zeros(&[c]),
                Constraint::Free,
            );
            store.insert(
                &format!("{role}.res{i}.wt"),
                net::glorot_uniform(rng, c, c),
                Constraint::Free,
            );
        }
    }
    net::init_trunk_params(&mut store, config, rng);
    // Zero head: an untrained tester emits probability one half everywhere.
    store.insert("vhead.w", net::zeros(&[c, 1]), Constraint::Free);
    store.insert("vhead.b", net::zeros(&[1]), Constraint::Free);
    store
}

/// Role-specific embedding: `h1 = tanh(x W1 + b1) W̃1` followed by two
/// residual blocks `h + tanh(h W + b) W̃`, all broadcasting the bias over
/// the leading axes.
fn role_embed<'t, F: Real>(
    tape: &'t Tape<F>,
    store: &ParamStore<F>,
    role: &str,
    x: &Array2<F>,
) -> Var<'t, F> {
    let (m, k) = x.dim();
    let lifted = tape.constant(
        x.clone()
            .into_shape_with_order((m, k, 1))
            .expect("adding a unit axis preserves length")
            .into_dyn(),
    );
    let w1 = tape.param(store, &format!("{role}.embed.w1"));
    let b1 = tape.param(store, &format!("{role}.embed.b1"));
    let wt1 = tape.param(store, &format!("{role}.embed.wt"));
    let mut h = (lifted.contract_last(w1) + b1).tanh().contract_last(wt1);
    for i in 1..=2 {
        let w = tape.param(store, &format!("{role}.res{i}.w"));
        let b = tape.param(store, &format!("{role}.res{i}.b"));
        let wt = tape.param(store, &format!("{role}.res{i}.wt"));
        h = h + (h.contract_last(w) + b).tanh().contract_last(wt);
    }
    h
}

/// Numerically stable logistic function on the tape.
fn sigmoid<F: Real>(z: Var<'_, F>) -> Var<'_, F> {
    z.mul_scalar(F::cast(0.5))
        .tanh()
        .add_scalar(F::one())
        .mul_scalar(F::cast(0.5))
}

/// Probability, per candidate child, that the tested immorality points both
/// parents into it. Role embeddings are concatenated along the variable
/// axis (parents, candidates, then neighbors), pushed through the shared
/// trunk, mean-pooled over one variable axis of the log-eigenvalue output,
/// and mapped through a scalar head with a logistic activation; the entries
/// at the candidate positions are returned.
pub fn vstructure_forward<'t, F: Real>(
    tape: &'t Tape<F>,
    store: &ParamStore<F>,
    case: &ImmoralityCase,
    config: &ModelConfig,
) -> Result<Var<'t, F>, CpdagNetError> {
    config.validate().map_err(CpdagNetError::Net)?;
    case.validate()?;
    if !case.finite() {
        return Err(CpdagNetError::Net(NetError::NonFiniteInput));
    }
    let to_f = |x: &Array2<f64>| x.mapv(F::cast);
    let mut blocks = vec![
        role_embed(tape, store, "pa", &to_f(&case.x_pa)),
        role_embed(tape, store, "cc", &to_f(&case.x_cc)),
    ];
    if !case.neighbors.is_empty() {
        blocks.push(role_embed(tape, store, "ne", &to_f(&case.x_ne)));
    }
    let h = concat(1, &blocks);
    let mut sink = TraceSink::disabled();
    // Channel-stacked `[C, d, d]` symmetric matrices; pool the trailing
    // variable axis and move channels last for the scalar head.
    let euclidean = net::trunk_to_log_eig(tape, store, h, config, &mut sink)?;
    let pooled = euclidean.mean_axis(2).permute_axes(&[1, 0]);
    let w = tape.param(store, "vhead.w");
    let b = tape.param(store, "vhead.b");
    let d = 2 + case.candidates.len() + case.neighbors.len();
    let scores = (pooled.contract_last(w) + b).reshape(&[d]);
    Ok(sigmoid(scores).slice_axis(0, 2, case.candidates.len()))
}

/// Hyperparameters of a v-structure training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct VStructureTrainConfig {
    pub epochs: usize,
    pub initial_lr: f64,
    pub lr_decay_factor_per_epoch: f64,
    pub seed: u64,
    pub model: ModelConfig,
    pub world: WorldRanges,
}

impl Default for VStructureTrainConfig {
    fn default() -> Self {
        VStructureTrainConfig {
            epochs: 1000,
            initial_lr: 5e-4,
            lr_decay_factor_per_epoch: 0.1f64.powf(1.0 / 1000.0),
            seed: 0,
            model: ModelConfig::default(),
            world: WorldRanges::default(),
        }
    }
}

impl VStructureTrainConfig {
    pub fn validate(&self) -> Result<(), CpdagNetError> {
        self.model.validate()?;
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(CpdagNetError::InvalidConfig(format!(
                "initial_lr must be positive and finite, got {}",
                self.initial_lr
            )));
        }
        let decay = self.lr_decay_factor_per_epoch;
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(CpdagNetError::InvalidConfig(format!(
                "lr_decay_factor_per_epoch must lie in (0, 1], got {decay}"
            )));
        }
        let w = &self.world;
        if w.d_min < 3 || w.d_min > w.d_max || w.m_min < 2 || w.m_min > w.m_max {
            return Err(CpdagNetError::InvalidConfig(format!(
                "world ranges need 3 <= d_min <= d_max (immoralities need three \
                 nodes) and 2 <= m_min <= m_max, got d in [{}, {}], m in [{}, {}]",
                w.d_min, w.d_max, w.m_min, w.m_max
            )));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.initial_lr * self.lr_decay_factor_per_epoch.powi(epoch as i32)
    }
}

/// Mean binary cross-entropy over candidate children in one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VStructureEpoch {
    pub epoch: usize,
    pub loss: f64,
}

/// The result of a v-structure training run.
pub struct VStructureOutcome<F: Real> {
    pub params: ParamStore<F>,
    pub trace: Vec<VStructureEpoch>,
}

/// Draws SEM worlds until one contains at least one moralized pair, then
/// simulates its data.
fn sample_collider_world<R: Rng>(
    ranges: &WorldRanges,
    rng: &mut R,
) -> Result<(DagSpec, Array2<f64>, ThreeClassLabels), CpdagNetError> {
    for _ in 0..MAX_WORLD_ATTEMPTS {
        let params = sample_graph_params_in(*ranges, rng);
        let g = sample_er_dag(params.d, params.q, rng)?;
        let spec = sample_sem_spec(&g, rng);
        let labels = crate::graphs::derive_three_class_labels(&g);
        if labels.class_matrix().iter().any(|&c| c == 2) {
            let data = simulate_sem(&spec, params.m, rng)?;
            return Ok((g, data, labels));
        }
    }
    Err(CpdagNetError::NoImmoralityWorlds {
        attempts: MAX_WORLD_ATTEMPTS,
    })
}

/// Trains the v-structure tester on the fly: each epoch draws one world
/// with at least one immorality, scores every immorality case against the
/// ground-truth child flags with binary cross-entropy, and takes one Adam
/// step on the mean. Reproducible from `config.seed`.
pub fn train_vstructure<F: Real>(
    config: &VStructureTrainConfig,
    mut on_epoch: impl FnMut(&VStructureEpoch),
) -> Result<VStructureOutcome<F>, CpdagNetError> {
    config.validate()?;
    let mut init_rng = substream(config.seed, "vstructure/init");
    let mut data_rng = substream(config.seed, "vstructure/data");
    let mut store = init_vstructure_params::<F>(&config.model, &mut init_rng);
    let mut adam = Adam::new();
    let mut trace = Vec::with_capacity(config.epochs);
    let lo = F::cast(PROB_FLOOR);
    let hi = F::cast(1.0 - PROB_FLOOR);

    for epoch in 0..config.epochs {
        let (g, data, labels) = sample_collider_world(&config.world, &mut data_rng)?;
        let skeleton = labels.skeleton_pairs();
        let d = labels.d();
        let tape: Tape<F> = Tape::new();
        let mut terms: Option<Var<'_, F>> = None;
        let mut candidate_count = 0usize;
        for i in 1..d {
            for j in 0..i {
                if labels.class_matrix()[[i, j]] != 2 {
                    continue;
                }
                let case = immorality_context(&data, &skeleton, (j, i), Some(&g))?;
                let probs = vstructure_forward(&tape, &store, &case, &config.model)?;
                let flags = case.child_flags.as_ref().expect("built with truth");
                let target = tape.constant(
                    Array1::from_iter(flags.iter().map(|&f| F::cast(f64::from(f)))).into_dyn(),
                );
                let counter = tape.constant(
                    Array1::from_iter(flags.iter().map(|&f| F::cast(1.0 - f64::from(f))))
                        .into_dyn(),
                );
                let p = probs.clamp(lo, hi);
                let miss = p.mul_scalar(F::cast(-1.0)).add_scalar(F::one());
                let bce = (target * p.log() + counter * miss.log())
                    .sum_all()
                    .mul_scalar(F::cast(-1.0));
                candidate_count += flags.len();
                terms = Some(match terms {
                    Some(acc) => acc + bce,
                    None => bce,
                });
            }
        }
        let total = terms
            .expect("sampled world contains an immorality")
            .mul_scalar(F::cast(1.0 / candidate_count as f64));
        let loss = total.scalar_value().to_f64();
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch,
                sample: 0,
                suspect: train::suspect_param(&store),
            }
            .into());
        }
        let grads = tape.backward(total);
        let named = train::named_gradients(&tape, &grads);
        adam.step(&mut store, &named, config.learning_rate_at(epoch))
            .map_err(|e| match e {
                TrainError::NonFiniteGradient { name, .. } => {
                    TrainError::NonFiniteGradient { name, epoch }
                }
                other => other,
            })?;
        let stats = VStructureEpoch { epoch, loss };
        on_epoch(&stats);
        trace.push(stats);
    }
    Ok(VStructureOutcome {
        params: store,
        trace,
    })
}

/// A proposed edge orientation with the stage-2 probability behind it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientationProposal {
    pub parent: usize,
    pub child: usize,
    pub probability: f64,
}

/// One stage-2 decision, for reporting: the tested pair, the candidate
/// child, its probability, and whether the orientation was adopted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImmoralityReportRow {
    pub parent_a: usize,
    pub parent_b: usize,
    pub candidate: usize,
    pub probability: f64,
    pub oriented: bool,
}

/// A CPDAG estimate along with the per-candidate stage-2 report.
#[derive(Debug, Clone)]
pub struct CpdagEstimate {
    pub cpdag: Cpdag,
    pub reports: Vec<ImmoralityReportRow>,
}

/// True if the directed edge set would contain a path from `from` to `to`.
fn has_directed_path(directed: &BTreeSet<(usize, usize)>, from: usize, to: usize) -> bool {
    let mut stack = vec![from];
    let mut seen = BTreeSet::from([from]);
    while let Some(node) = stack.pop() {
        if node == to {
            return true;
        }
        for &(p, c) in directed.range((node, 0)..(node + 1, 0)) {
            debug_assert_eq!(p, node);
            if seen.insert(c) {
                stack.push(c);
            }
        }
    }
    false
}

/// Builds a CPDAG from an undirected skeleton and orientation proposals.
///
/// Opposite proposals on one edge are resolved in favor of the higher
/// probability; exact ties leave the edge undirected. Winners are applied
/// in descending probability, skipping any orientation that would close a
/// directed cycle, and the result is closed under the Meek rules. Proposals
/// on pairs outside the skeleton are ignored.
pub fn assemble_cpdag(
    d: usize,
    skeleton: &BTreeSet<(usize, usize)>,
    proposals: &[OrientationProposal],
) -> Result<Cpdag, CpdagNetError> {
    let mut best: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
    for p in proposals {
        let key = (p.parent.min(p.child), p.parent.max(p.child));
        if !skeleton.contains(&key) {
            continue;
        }
        let slot = best
            .entry(key)
            .or_insert((f64::NEG_INFINITY, f64::NEG_INFINITY));
        if p.parent == key.0 {
            slot.0 = slot.0.max(p.probability);
        } else {
            slot.1 = slot.1.max(p.probability);
        }
    }
    let mut winners: Vec<(f64, usize, usize)> = Vec::new();
    for (&(a, b), &(forward, backward)) in &best {
        if forward > backward {
            winners.push((forward, a, b));
        } else if backward > forward {
            winners.push((backward, b, a));
        }
    }
    winners.sort_by(|x, y| {
        y.0.partial_cmp(&x.0)
            .expect("probabilities are finite")
            .then_with(|| (x.1, x.2).cmp(&(y.1, y.2)))
    });
    let mut directed: BTreeSet<(usize, usize)> = BTreeSet::new();
    for (_, parent, child) in winners {
        if !has_directed_path(&directed, child, parent) {
            directed.insert((parent, child));
        }
    }
    let undirected: BTreeSet<(usize, usize)> = skeleton
        .iter()
        .copied()
        .filter(|&(a, b)| !directed.contains(&(a, b)) && !directed.contains(&(b, a)))
        .collect();
    let assembled = Cpdag::new(d, directed, undirected)?;
    Ok(apply_meek_rules(&assembled)?)
}

/// Full two-step CPDAG estimation on a standardized data matrix: the
/// first-stage model classifies every pair, each moralized pair is tested
/// with the second-stage network, orientations above `threshold` are
/// proposed, and the result is assembled with Meek closure. Moralized pairs
/// without any candidate child are skipped.
pub fn estimate_cpdag<F: Real>(
    x: &Array2<f64>,
    stage1: &ParamStore<F>,
    stage1_config: &ModelConfig,
    stage2: &ParamStore<F>,
    stage2_config: &ModelConfig,
    threshold: f64,
) -> Result<CpdagEstimate, CpdagNetError> {
    let d = x.ncols();
    let mut skeleton: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut moralized: Vec<(usize, usize)> = Vec::new();
    {
        let tape: Tape<F> = Tape::new();
        let probs = net::model_forward(&tape, stage1, &x.mapv(F::cast), stage1_config)?;
        let values = probs.value();
        for i in 1..d {
            for j in 0..i {
                let mut class = 0usize;
                let mut top = values[[i, j, 0]];
                for c in 1..3 {
                    if values[[i, j, c]] > top {
                        top = values[[i, j, c]];
                        class = c;
                    }
                }
                match class {
                    1 => {
                        skeleton.insert((j, i));
                    }
                    2 => moralized.push((j, i)),
                    _ => {}
                }
            }
        }
    }
    let mut proposals = Vec::new();
    let mut reports = Vec::new();
    for &(a, b) in &moralized {
        let case = match immorality_context(x, &skeleton, (a, b), None) {
            Ok(case) => case,
            Err(CpdagNetError::NoCandidates(..)) => continue,
            Err(other) => return Err(other),
        };
        let tape: Tape<F> = Tape::new();
        let probs = vstructure_forward(&tape, stage2, &case, stage2_config)?;
        let values = probs.value();
        for (idx, &candidate) in case.candidates.iter().enumerate() {
            let probability = values[[idx]].to_f64();
            let oriented = probability > threshold;
            reports.push(ImmoralityReportRow {
                parent_a: a,
                parent_b: b,
                candidate,
                probability,
                oriented,
            });
            if oriented {
                for parent in [a, b] {
                    proposals.push(OrientationProposal {
                        parent,
                        child: candidate,
                        probability,
                    });
                }
            }
        }
    }
    let cpdag = assemble_cpdag(d, &skeleton, &proposals)?;
    Ok(CpdagEstimate { cpdag, reports })
}
