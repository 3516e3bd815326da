//! Structural equation models that turn a DAG into data matrices.
//!
//! Training data comes from SEMs with Chebyshev-polynomial dependencies,
//! Gaussian-mixture noise, and bivariate interaction terms. Held-out test
//! data can swap the dependency for other function families (linear, sine,
//! cosine, square, cube, pure multiplicative, random MLP). Every generated
//! column is standardized and clamped, so downstream consumers always see
//! the same input convention.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graphs::{
    derive_three_class_labels, sample_er_dag, sample_graph_params_in, DagSpec, ThreeClassLabels,
    WorldRanges,
};

/// Highest Chebyshev degree used by the univariate part of the SEM.
pub const CHEBYSHEV_DEGREE: usize = 5;
/// Columns are standardized and then clamped to this many standard
/// deviations.
pub const CLAMP_LIMIT: f64 = 5.0;
/// A column whose standard deviation falls below this is degenerate.
pub const DEGENERATE_STD: f64 = 1e-12;
/// How often noise is redrawn for a degenerate column before giving up.
const RESAMPLE_ATTEMPTS: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum SemError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("spec does not match its graph: {0}")]
    SpecMismatch(String),
    #[error("column for node {node} stayed degenerate after {attempts} noise redraws")]
    DegenerateColumn { node: usize, attempts: usize },
}

/// Evaluates the Chebyshev polynomial of the first kind `T_n(x)` via the
/// three-term recurrence.
pub fn chebyshev_t(n: usize, x: f64) -> f64 {
    match n {
        0 => 1.0,
        1 => x,
        _ => {
            let (mut prev, mut cur) = (1.0, x);
            for _ in 2..=n {
                let next = 2.0 * x * cur - prev;
                prev = cur;
                cur = next;
            }
            cur
        }
    }
}

/// The shifted, rescaled bivariate interaction term
/// `(x - mx) (y - my) / ((1 + |mx|) (1 + |my|))`.
pub fn bivariate_term(x: f64, y: f64, shift: (f64, f64)) -> f64 {
    let (mx, my) = shift;
    (x - mx) * (y - my) / ((1.0 + mx.abs()) * (1.0 + my.abs()))
}

/// A finite Gaussian mixture used as exogenous noise.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub weights: Vec<f64>,
}

impl MixtureSpec {
    pub fn new(means: Vec<f64>, stds: Vec<f64>, weights: Vec<f64>) -> Result<Self, SemError> {
        if means.is_empty() || means.len() != stds.len() || means.len() != weights.len() {
            return Err(SemError::InvalidParameter(
                "mixture components must be non-empty and aligned".into(),
            ));
        }
        if stds.iter().any(|&s| !(s > 0.0)) {
            return Err(SemError::InvalidParameter(
                "mixture stds must be positive".into(),
            ));
        }
        if weights.iter().any(|&w| w < 0.0) {
            return Err(SemError::InvalidParameter(
                "mixture weights must be non-negative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(SemError::InvalidParameter(format!(
                "mixture weights must sum to 1, got {total}"
            )));
        }
        Ok(MixtureSpec {
            means,
            stds,
            weights,
        })
    }

    pub fn components(&self) -> usize {
        self.means.len()
    }

    /// The mixture mean `sum_l w_l mu_l`.
    pub fn mean(&self) -> f64 {
        self.weights
            .iter()
            .zip(&self.means)
            .map(|(w, m)| w * m)
            .sum()
    }

    /// Draws one sample: pick a component by weight, then sample its normal.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let mut u = rng.random::<f64>();
        let mut idx = self.components() - 1;
        for (l, &w) in self.weights.iter().enumerate() {
            if u < w {
                idx = l;
                break;
            }
            u -= w;
        }
        let normal = rand_distr::Normal::new(self.means[idx], self.stds[idx])
            .expect("stds validated positive");
        rng.sample(normal)
    }

    fn sample_column<R: Rng>(&self, m: usize, rng: &mut R) -> Array1<f64> {
        Array1::from_iter((0..m).map(|_| self.sample(rng)))
    }
}

/// Draws a random mixture: `L ~ U{1..5}` components with means in
/// `[-1, 1]`, stds in `[0.05, 1]`, and weights drawn from `[0.3, 1]` then
/// normalized to sum 1.
pub fn sample_mixture_spec<R: Rng>(rng: &mut R) -> MixtureSpec {
    let l = rng.random_range(1..=5);
    let means: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let stds: Vec<f64> = (0..l).map(|_| rng.random_range(0.05..=1.0)).collect();
    let raw: Vec<f64> = (0..l).map(|_| rng.random_range(0.3..=1.0)).collect();
    let total: f64 = raw.iter().sum();
    let weights = raw.into_iter().map(|w| w / total).collect();
    MixtureSpec::new(means, stds, weights).expect("sampled components are valid")
}

/// The structural equation of one node.
///
/// With scaled parent columns `x_w`, exogenous noise `e1` (mixture) and
/// `e2 ~ U[-1, 1]`, the node's raw column is
///
/// ```text
/// sum_w beta_w sum_n alpha_n T_n(x_w) + e1
///   + alpha_m ( sum_{s<t} delta_{s,t} Tm(x_s, x_t) + sum_w Tm(x_w, e2) )
/// ```
///
/// where `Tm` is [`bivariate_term`] with its own shift pair per term.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFunction {
    /// Sorted parent node ids; all per-parent fields align with this order.
    pub parents: Vec<usize>,
    /// Univariate Chebyshev coefficients for degrees `1..=CHEBYSHEV_DEGREE`,
    /// jointly normalized with `alpha_m` to unit absolute sum.
    pub alphas: [f64; CHEBYSHEV_DEGREE],
    /// Gate of the bivariate interaction block.
    pub alpha_m: f64,
    /// Per-parent weights, already divided by the parent count.
    pub betas: Vec<f64>,
    /// Interaction coefficients per parent pair `(s, t)` with `s < t`
    /// (lexicographic over sorted parents), normalized to unit absolute sum.
    pub deltas: Vec<f64>,
    /// `(mu_x, mu_y)` shift per parent pair, aligned with `deltas`.
    pub pair_shifts: Vec<(f64, f64)>,
    /// `(mu_x, mu_y)` shift per parent for the parent-noise interaction.
    pub noise_shifts: Vec<(f64, f64)>,
    /// Exogenous additive noise.
    pub noise: MixtureSpec,
}

impl NodeFunction {
    fn pair_count(&self) -> usize {
        self.parents.len() * self.parents.len().saturating_sub(1) / 2
    }

    fn validate(&self, node: usize, g: &DagSpec) -> Result<(), SemError> {
        let mut expected = g.parents(node);
        expected.sort_unstable();
        if self.parents != expected {
            return Err(SemError::SpecMismatch(format!(
                "node {node} lists parents {:?} but the graph has {:?}",
                self.parents, expected
            )));
        }
        if self.betas.len() != self.parents.len() || self.noise_shifts.len() != self.parents.len() {
            return Err(SemError::SpecMismatch(format!(
                "node {node} has misaligned per-parent coefficients"
            )));
        }
        if self.deltas.len() != self.pair_count() || self.pair_shifts.len() != self.pair_count() {
            return Err(SemError::SpecMismatch(format!(
                "node {node} has misaligned per-pair coefficients"
            )));
        }
        Ok(())
    }

    /// Evaluates the structural equation for one sample.
    fn eval(&self, scaled_parents: &[f64], e1: f64, e2: f64) -> f64 {
        let mut value = e1;
        for (w, &x) in scaled_parents.iter().enumerate() {
            let mut poly = 0.0;
            for (n, &alpha) in self.alphas.iter().enumerate() {
                poly += alpha * chebyshev_t(n + 1, x);
            }
            value += self.betas[w] * poly;
        }
        if !self.parents.is_empty() {
            let mut interaction = 0.0;
            let mut pair = 0;
            for s in 0..scaled_parents.len() {
                for t in (s + 1)..scaled_parents.len() {
                    interaction += self.deltas[pair]
                        * bivariate_term(
                            scaled_parents[s],
                            scaled_parents[t],
                            self.pair_shifts[pair],
                        );
                    pair += 1;
                }
            }
            for (w, &x) in scaled_parents.iter().enumerate() {
                interaction += bivariate_term(x, e2, self.noise_shifts[w]);
            }
            value += self.alpha_m * interaction;
        }
        value
    }
}

/// A fully sampled SEM: the DAG plus one [`NodeFunction`] per node.
#[derive(Debug, Clone, PartialEq)]
pub struct ChebyshevSemSpec {
    graph: DagSpec,
    nodes: Vec<NodeFunction>,
}

impl ChebyshevSemSpec {
    pub fn new(graph: DagSpec, nodes: Vec<NodeFunction>) -> Result<Self, SemError> {
        if nodes.len() != graph.d() {
            return Err(SemError::SpecMismatch(format!(
                "{} node functions for {} nodes",
                nodes.len(),
                graph.d()
            )));
        }
        for (v, node) in nodes.iter().enumerate() {
            node.validate(v, &graph)?;
        }
        Ok(ChebyshevSemSpec { graph, nodes })
    }

    pub fn graph(&self) -> &DagSpec {
        &self.graph
    }

    pub fn node(&self, v: usize) -> &NodeFunction {
        &self.nodes[v]
    }

    /// Relabels node `v` as `perm[v]`, re-sorting per-parent and per-pair
    /// coefficients to follow the new node order. Bivariate terms are
    /// symmetric under swapping `(x, mu_x)` with `(y, mu_y)`, so shifts of
    /// flipped pairs swap with them.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self, SemError> {
        let graph = self
            .graph
            .permuted(perm)
            .map_err(|e| SemError::InvalidParameter(e.to_string()))?;
        let d = self.graph.d();
        let mut nodes = vec![None; d];
        for (v, node) in self.nodes.iter().enumerate() {
            let mut relabeled: Vec<(usize, usize)> = node
                .parents
                .iter()
                .enumerate()
                .map(|(old_idx, &w)| (perm[w], old_idx))
                .collect();
            relabeled.sort_unstable();
            let order: Vec<usize> = relabeled.iter().map(|&(_, old_idx)| old_idx).collect();
            let parents: Vec<usize> = relabeled.iter().map(|&(p, _)| p).collect();
            let betas: Vec<f64> = order.iter().map(|&o| node.betas[o]).collect();
            let noise_shifts: Vec<(f64, f64)> =
                order.iter().map(|&o| node.noise_shifts[o]).collect();

            // Old pair index for old parent indices (s, t) with s < t.
            let old_pair_index = |s: usize, t: usize| -> usize {
                let n = node.parents.len();
                debug_assert!(s < t && t < n);
                s * n - s * (s + 1) / 2 + (t - s - 1)
            };
            let mut deltas = Vec::with_capacity(node.deltas.len());
            let mut pair_shifts = Vec::with_capacity(node.pair_shifts.len());
            for new_s in 0..parents.len() {
                for new_t in (new_s + 1)..parents.len() {
                    let (old_s, old_t) = (order[new_s], order[new_t]);
                    let (lo, hi, flipped) = if old_s < old_t {
                        (old_s, old_t, false)
                    } else {
                        (old_t, old_s, true)
                    };
                    let idx = old_pair_index(lo, hi);
                    deltas.push(node.deltas[idx]);
                    let (mx, my) = node.pair_shifts[idx];
                    pair_shifts.push(if flipped { (my, mx) } else { (mx, my) });
                }
            }
            nodes[perm[v]] = Some(NodeFunction {
                parents,
                alphas: node.alphas,
                alpha_m: node.alpha_m,
                betas,
                deltas,
                pair_shifts,
                noise_shifts,
                noise: node.noise.clone(),
            });
        }
        let nodes = nodes
            .into_iter()
            .map(|n| n.expect("permutation is a bijection"))
            .collect();
        ChebyshevSemSpec::new(graph, nodes)
    }
}

/// Samples the full SEM for a DAG: per node, factorial-damped Chebyshev
/// coefficients and the interaction gate normalized to unit absolute sum,
/// per-parent weights `U[0.7, 1.3] / |pa|`, interaction coefficients
/// normalized to unit absolute sum, shift pairs in `[-1, 1]^2` per
/// bivariate term, and a Gaussian-mixture noise source.
pub fn sample_sem_spec<R: Rng>(g: &DagSpec, rng: &mut R) -> ChebyshevSemSpec {
    let mut nodes = Vec::with_capacity(g.d());
    for v in 0..g.d() {
        let mut parents = g.parents(v);
        parents.sort_unstable();
        let n_parents = parents.len();
        let n_pairs = n_parents * n_parents.saturating_sub(1) / 2;

        // Draw until the joint normalizer is usable; a zero draw has
        // probability zero but would poison the normalization.
        let (alphas, alpha_m) = loop {
            let mut raw = [0.0; CHEBYSHEV_DEGREE];
            let mut factorial = 1.0;
            for (i, slot) in raw.iter_mut().enumerate() {
                factorial *= (i + 1) as f64;
                *slot = rng.random_range(-1.0..=1.0) / factorial;
            }
            let raw_m: f64 = rng.random_range(-1.0..=1.0);
            let denom: f64 = raw.iter().map(|a| a.abs()).sum::<f64>() + raw_m.abs();
            if denom > 1e-9 {
                let mut alphas = raw;
                for a in &mut alphas {
                    *a /= denom;
                }
                break (alphas, raw_m / denom);
            }
        };

        let betas: Vec<f64> = (0..n_parents)
            .map(|_| rng.random_range(0.7..=1.3) / n_parents as f64)
            .collect();

        let deltas: Vec<f64> = if n_pairs == 0 {
            Vec::new()
        } else {
            loop {
                let raw: Vec<f64> = (0..n_pairs).map(|_| rng.random_range(-1.0..=1.0)).collect();
                let denom: f64 = raw.iter().map(|d| d.abs()).sum();
                if denom > 1e-9 {
                    break raw.into_iter().map(|d| d / denom).collect();
                }
            }
        };
        let pair_shifts: Vec<(f64, f64)> = (0..n_pairs)
            .map(|_| (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)))
            .collect();
        let noise_shifts: Vec<(f64, f64)> = (0..n_parents)
            .map(|_| (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)))
            .collect();

        nodes.push(NodeFunction {
            parents,
            alphas,
            alpha_m,
            betas,
            deltas,
            pair_shifts,
            noise_shifts,
            noise: sample_mixture_spec(rng),
        });
    }
    ChebyshevSemSpec::new(g.clone(), nodes).expect("sampled spec matches its graph")
}

/// Simulates `m` samples from the SEM. All randomness of node `v` flows
/// from a per-node substream, so node identity (not topological position)
/// determines its draws.
pub fn simulate_sem<R: Rng>(
    spec: &ChebyshevSemSpec,
    m: usize,
    rng: &mut R,
) -> Result<Array2<f64>, SemError> {
    let base = rng.next_u64();
    let streams: Vec<u64> = (0..spec.graph().d() as u64).collect();
    simulate_sem_with_streams(spec, m, base, &streams)
}

/// [`simulate_sem`] with explicit per-node stream ids: node `v` draws its
/// noise from stream `streams[v]`. Relabeling nodes and permuting the
/// stream ids alongside reproduces the same columns up to rounding.
pub fn simulate_sem_with_streams(
    spec: &ChebyshevSemSpec,
    m: usize,
    base_seed: u64,
    streams: &[u64],
) -> Result<Array2<f64>, SemError> {
    let d = spec.graph().d();
    if m < 2 {
        return Err(SemError::InvalidParameter(format!(
            "need at least 2 samples to standardize, got {m}"
        )));
    }
    if streams.len() != d {
        return Err(SemError::InvalidParameter(format!(
            "{} stream ids for {} nodes",
            streams.len(),
            d
        )));
    }
    let mut data = Array2::zeros((m, d));
    for v in spec.graph().topological_order() {
        let node = spec.node(v);
        let mut node_rng = ChaCha8Rng::seed_from_u64(base_seed);
        node_rng.set_stream(streams[v]);

        let scaled: Vec<Array1<f64>> = node
            .parents
            .iter()
            .map(|&w| scale_by_max_abs(data.column(w)))
            .collect();
        let column = standardize_with_retries(
            v,
            m,
            |rng| {
                let e1 = node.noise.sample_column(m, rng);
                let needs_e2 = !node.parents.is_empty();
                let mut col = Array1::zeros(m);
                for i in 0..m {
                    let parent_row: Vec<f64> = scaled.iter().map(|c| c[i]).collect();
                    let e2 = if needs_e2 {
                        rng.random_range(-1.0..=1.0)
                    } else {
                        0.0
                    };
                    col[i] = node.eval(&parent_row, e1[i], e2);
                }
                col
            },
            &mut node_rng,
        )?;
        data.column_mut(v).assign(&column);
    }
    Ok(data)
}

/// Draws a complete training example: random world parameters, a random
/// DAG, a random SEM, simulated data, and the matching three-class labels.
pub fn generate_training_pair<R: Rng>(
    rng: &mut R,
) -> Result<(Array2<f64>, ThreeClassLabels), SemError> {
    generate_training_pair_in(&WorldRanges::default(), rng)
}

/// [`generate_training_pair`] with custom world-parameter ranges, for
/// smaller-scale training runs.
pub fn generate_training_pair_in<R: Rng>(
    ranges: &WorldRanges,
    rng: &mut R,
) -> Result<(Array2<f64>, ThreeClassLabels), SemError> {
    let params = sample_graph_params_in(*ranges, rng);
    let g = sample_er_dag(params.d, params.q, rng)
        .map_err(|e| SemError::InvalidParameter(e.to_string()))?;
    let spec = sample_sem_spec(&g, rng);
    let data = simulate_sem(&spec, params.m, rng)?;
    let labels = derive_three_class_labels(&g);
    Ok((data, labels))
}

/// Families of held-out test dependencies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestDependency {
    /// The training family itself.
    Chebyshev,
    Linear,
    Sine,
    Cosine,
    Square,
    Cube,
    /// Pure bivariate-interaction form (no additive univariate part).
    Multiplicative,
    /// A randomly initialized MLP applied to parents and noise.
    RandomMlp,
}

impl TestDependency {
    pub const ALL: [TestDependency; 8] = [
        TestDependency::Chebyshev,
        TestDependency::Linear,
        TestDependency::Sine,
        TestDependency::Cosine,
        TestDependency::Square,
        TestDependency::Cube,
        TestDependency::Multiplicative,
        TestDependency::RandomMlp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TestDependency::Chebyshev => "chebyshev",
            TestDependency::Linear => "linear",
            TestDependency::Sine => "sine",
            TestDependency::Cosine => "cosine",
            TestDependency::Square => "square",
            TestDependency::Cube => "cube",
            TestDependency::Multiplicative => "multiplicative",
            TestDependency::RandomMlp => "random_mlp",
        }
    }
}

impl std::fmt::Display for TestDependency {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TestDependency {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TestDependency::ALL
            .iter()
            .copied()
            .find(|dep| dep.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = TestDependency::ALL.iter().map(|d| d.name()).collect();
                format!(
                    "unknown dependency '{s}'; expected one of {}",
                    names.join(", ")
                )
            })
    }
}

/// Generates one `m x d` data matrix for the DAG under the chosen
/// dependency family. Source nodes always draw standardized mixture noise;
/// non-source columns apply the family's structural equation to the parent
/// columns, then standardize and clamp. Interaction-style families
/// (`multiplicative`, `random_mlp`) see parents rescaled to `[-1, 1]` by
/// the batch max-abs, matching the bounded domain they are built for; the
/// univariate families apply `g` to the standardized columns directly so
/// the dependency retains a usable signal-to-noise ratio.
pub fn generate_test_data<R: Rng>(
    g: &DagSpec,
    dependency: TestDependency,
    m: usize,
    rng: &mut R,
) -> Result<Array2<f64>, SemError> {
    if dependency == TestDependency::Chebyshev {
        let spec = sample_sem_spec(g, rng);
        return simulate_sem(&spec, m, rng);
    }
    if m < 2 {
        return Err(SemError::InvalidParameter(format!(
            "need at least 2 samples to standardize, got {m}"
        )));
    }
    let d = g.d();
    let base = rng.next_u64();
    let mut data = Array2::zeros((m, d));
    for v in g.topological_order() {
        let mut node_rng = ChaCha8Rng::seed_from_u64(base);
        node_rng.set_stream(v as u64);
        let mut parents = g.parents(v);
        parents.sort_unstable();
        let scaled: Vec<Array1<f64>> = parents
            .iter()
            .map(|&w| scale_by_max_abs(data.column(w)))
            .collect();
        let noise = sample_mixture_spec(&mut node_rng);

        let column = if parents.is_empty() {
            standardize_with_retries(v, m, |rng| noise.sample_column(m, rng), &mut node_rng)?
        } else {
            match dependency {
                TestDependency::Chebyshev => unreachable!("handled above"),
                TestDependency::Linear
                | TestDependency::Sine
                | TestDependency::Cosine
                | TestDependency::Square
                | TestDependency::Cube => {
                    let g_fn: fn(f64) -> f64 = match dependency {
                        TestDependency::Linear => |x| x,
                        TestDependency::Sine => f64::sin,
                        TestDependency::Cosine => f64::cos,
                        TestDependency::Square => |x| x * x,
                        TestDependency::Cube => |x| x * x * x,
                        _ => unreachable!(),
                    };
                    let weights: Vec<f64> = (0..parents.len())
                        .map(|_| node_rng.random_range(0.7..=1.3) / parents.len() as f64)
                        .collect();
                    let raw_parents: Vec<Array1<f64>> =
                        parents.iter().map(|&w| data.column(w).to_owned()).collect();
                    standardize_with_retries(
                        v,
                        m,
                        |rng| {
                            let e1 = noise.sample_column(m, rng);
                            Array1::from_iter((0..m).map(|i| {
                                let signal: f64 = raw_parents
                                    .iter()
                                    .zip(&weights)
                                    .map(|(col, w)| w * g_fn(col[i]))
                                    .sum();
                                signal + e1[i]
                            }))
                        },
                        &mut node_rng,
                    )?
                }
                TestDependency::Multiplicative => {
                    let n_pairs = parents.len() * (parents.len() - 1) / 2;
                    let deltas: Vec<f64> = if n_pairs == 0 {
                        Vec::new()
                    } else {
                        loop {
                            let raw: Vec<f64> = (0..n_pairs)
                                .map(|_| node_rng.random_range(-1.0..=1.0))
                                .collect();
                            let denom: f64 = raw.iter().map(|d| d.abs()).sum();
                            if denom > 1e-9 {
                                break raw.into_iter().map(|x| x / denom).collect();
                            }
                        }
                    };
                    let pair_shifts: Vec<(f64, f64)> = (0..n_pairs)
                        .map(|_| {
                            (
                                node_rng.random_range(-1.0..=1.0),
                                node_rng.random_range(-1.0..=1.0),
                            )
                        })
                        .collect();
                    let noise_shifts: Vec<(f64, f64)> = (0..parents.len())
                        .map(|_| {
                            (
                                node_rng.random_range(-1.0..=1.0),
                                node_rng.random_range(-1.0..=1.0),
                            )
                        })
                        .collect();
                    let gate: f64 = node_rng.random_range(-1.0..=1.0);
                    standardize_with_retries(
                        v,
                        m,
                        |rng| {
                            Array1::from_iter((0..m).map(|i| {
                                let e2: f64 = rng.random_range(-1.0..=1.0);
                                let mut interaction = 0.0;
                                let mut pair = 0;
                                for s in 0..scaled.len() {
                                    for t in (s + 1)..scaled.len() {
                                        interaction += deltas[pair]
                                            * bivariate_term(
                                                scaled[s][i],
                                                scaled[t][i],
                                                pair_shifts[pair],
                                            );
                                        pair += 1;
                                    }
                                }
                                for (w, col) in scaled.iter().enumerate() {
                                    interaction += bivariate_term(col[i], e2, noise_shifts[w]);
                                }
                                gate * interaction
                            }))
                        },
                        &mut node_rng,
                    )?
                }
                TestDependency::RandomMlp => {
                    // The MLP consumes parents and the noise column jointly,
                    // so a degenerate draw (e.g. a dead final relu) retries
                    // with fresh weights as well as fresh noise.
                    standardize_with_retries(
                        v,
                        m,
                        |rng| {
                            let mlp = MlpFunction::sample(parents.len() + 1, rng);
                            let e1 = noise.sample_column(m, rng);
                            Array1::from_iter((0..m).map(|i| {
                                let mut inputs: Vec<f64> = scaled.iter().map(|c| c[i]).collect();
                                inputs.push(e1[i]);
                                mlp.eval(&inputs)
                            }))
                        },
                        &mut node_rng,
                    )?
                }
            }
        };
        data.column_mut(v).assign(&column);
    }
    Ok(data)
}

/// Standardizes every column of an arbitrary data matrix with the same
/// convention the simulator uses (center, scale to unit std, clamp).
/// Degenerate columns are centered and left at zero.
pub fn standardize_columns(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut col in out.columns_mut() {
        let m = col.len() as f64;
        let mean = col.sum() / m;
        let var = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m;
        let std = var.sqrt();
        if std < DEGENERATE_STD {
            col.fill(0.0);
        } else {
            col.mapv_inplace(|v| ((v - mean) / std).clamp(-CLAMP_LIMIT, CLAMP_LIMIT));
        }
    }
    out
}

/// Activation used by [`MlpFunction`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum MlpActivation {
    Relu,
    Tanh,
}

/// A randomly initialized multi-layer perceptron with the activation applied
/// after every affine map, including the scalar output.
#[derive(Debug, Clone)]
pub(crate) struct MlpFunction {
    pub(crate) weights: Vec<Array2<f64>>,
    pub(crate) biases: Vec<Array1<f64>>,
    pub(crate) activation: MlpActivation,
}

impl MlpFunction {
    /// Samples `layers ~ U{1..5}` affine+activation blocks of hidden width
    /// `U{4..64}` with Glorot-uniform weights; relu or tanh with equal
    /// probability.
    pub(crate) fn sample<R: Rng>(in_dim: usize, rng: &mut R) -> Self {
        let layers = rng.random_range(1..=5);
        let width = rng.random_range(4..=64);
        let activation = if rng.random::<f64>() < 0.5 {
            MlpActivation::Relu
        } else {
            MlpActivation::Tanh
        };
        let mut sizes = vec![in_dim];
        sizes.extend(std::iter::repeat(width).take(layers - 1));
        sizes.push(1);
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for pair in sizes.windows(2) {
            let (n_in, n_out) = (pair[0], pair[1]);
            let bound = (6.0 / (n_in + n_out) as f64).sqrt();
            weights.push(Array2::from_shape_fn((n_in, n_out), |_| {
                rng.random_range(-bound..=bound)
            }));
            biases.push(Array1::from_shape_fn(n_out, |_| {
                rng.random_range(-0.1..=0.1)
            }));
        }
        MlpFunction {
            weights,
            biases,
            activation,
        }
    }

    pub(crate) fn eval(&self, inputs: &[f64]) -> f64 {
        let mut h = Array1::from_vec(inputs.to_vec());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            let mut next = h.dot(w) + b;
            match self.activation {
                MlpActivation::Relu => next.mapv_inplace(|v| v.max(0.0)),
                MlpActivation::Tanh => next.mapv_inplace(f64::tanh),
            }
            h = next;
        }
        h[0]
    }
}

fn scale_by_max_abs(col: ArrayView1<f64>) -> Array1<f64> {
    let max_abs = col.iter().fold(0.0f64, |acc, &v| acc.max(v.abs()));
    if max_abs < DEGENERATE_STD {
        col.to_owned()
    } else {
        col.mapv(|v| v / max_abs)
    }
}

/// Runs `draw` up to [`RESAMPLE_ATTEMPTS`] times until it produces a
/// non-degenerate column, then standardizes to zero mean / unit std and
/// clamps to `[-CLAMP_LIMIT, CLAMP_LIMIT]`.
fn standardize_with_retries<R: Rng>(
    node: usize,
    m: usize,
    mut draw: impl FnMut(&mut R) -> Array1<f64>,
    rng: &mut R,
) -> Result<Array1<f64>, SemError> {
    for _ in 0..RESAMPLE_ATTEMPTS {
        let raw = draw(rng);
        debug_assert_eq!(raw.len(), m);
        let mean = raw.sum() / m as f64;
        let var = raw.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        let std = var.sqrt();
        if std >= DEGENERATE_STD {
            return Ok(raw.mapv(|v| ((v - mean) / std).clamp(-CLAMP_LIMIT, CLAMP_LIMIT)));
        }
    }
    Err(SemError::DegenerateColumn {
        node,
        attempts: RESAMPLE_ATTEMPTS,
    })
}
