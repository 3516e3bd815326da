//! Metrics (AUC-PR, SHD, accuracy) and the desk-scale benchmark harness.
//!
//! The undirected task scores each unordered variable pair with
//! `1 - P(no-edge)` and evaluates against the skeleton of the generating
//! DAG; the precision-recall area is computed by an exact threshold sweep
//! (no trapezoidal interpolation). CPDAG estimates are compared with a
//! pairwise structural Hamming distance. [`run_benchmark`] ties the
//! metrics to freshly simulated test worlds and always includes the
//! zero-graph baseline.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::time::Instant;

use ndarray::{Array2, Array3, Ix3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ParamStore, Real, Tape};
use crate::cpdagnet::{estimate_cpdag, CpdagNetError};
use crate::graphs::{dag_to_cpdag, sample_er_dag, Cpdag, DagSpec, GraphError};
use crate::net::{self, ModelConfig, NetError};
use crate::rng::substream;
use crate::semgen::{generate_test_data, SemError, TestDependency};

/// How often a benchmark trial redraws its graph when the sample comes out
/// edgeless (AUC-PR needs at least one positive pair).
const MAX_GRAPH_ATTEMPTS: usize = 1000;
/// Model id used for the always-included zero-graph baseline rows.
pub const BASELINE_MODEL_ID: &str = "zero_graph";

/// Errors from metric computation or the benchmark harness.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("scores and truth have different lengths: {scores} vs {truth}")]
    LengthMismatch { scores: usize, truth: usize },
    #[error("score at index {index} is not finite")]
    NonFiniteScore { index: usize },
    #[error("AUC-PR needs at least one positive pair")]
    NoPositives,
    #[error("graphs are over different variable counts: {left} vs {right}")]
    SizeMismatch { left: usize, right: usize },
    #[error("invalid probability tensor: {0}")]
    InvalidShape(String),
    #[error("invalid benchmark grid: {0}")]
    InvalidGrid(String),
    #[error("no graph with at least one edge after {attempts} draws")]
    EmptyWorld { attempts: usize },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Sem(#[from] SemError),
    #[error(transparent)]
    Estimate(#[from] CpdagNetError),
    #[error("benchmark csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Exact area under the precision-recall step curve.
///
/// Pairs are ranked by descending score; equal scores enter the curve as
/// one group, and each group contributes `(recall_k - recall_{k-1}) *
/// precision_k`. With all scores identical the curve collapses to a single
/// point and the area equals the positive rate.
pub fn auc_pr(scores: &[f64], truth: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            truth: truth.len(),
        });
    }
    if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore { index });
    }
    let positives = truth.iter().filter(|&&t| t).count();
    if positives == 0 {
        return Err(EvalError::NoPositives);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores are finite")
    });

    let mut area = 0.0;
    let mut true_positives = 0usize;
    let mut false_positives = 0usize;
    let mut previous_recall = 0.0;
    let mut k = 0usize;
    while k < order.len() {
        let threshold = scores[order[k]];
        while k < order.len() && scores[order[k]] == threshold {
            if truth[order[k]] {
                true_positives += 1;
            } else {
                false_positives += 1;
            }
            k += 1;
        }
        let recall = true_positives as f64 / positives as f64;
        let precision = true_positives as f64 / (true_positives + false_positives) as f64;
        area += (recall - previous_recall) * precision;
        previous_recall = recall;
    }
    Ok(area)
}

/// Normalizes an edge set to canonical `(min, max)` pairs without self-loops.
fn canonical_pairs(edges: &BTreeSet<(usize, usize)>) -> BTreeSet<(usize, usize)> {
    edges
        .iter()
        .filter(|&&(a, b)| a != b)
        .map(|&(a, b)| (a.min(b), a.max(b)))
        .collect()
}

/// Structural Hamming distance between undirected edge sets: the number of
/// unordered pairs whose edge/no-edge status differs. The edgeless
/// prediction therefore scores exactly the number of true edges.
pub fn shd_undirected(
    pred: &BTreeSet<(usize, usize)>,
    truth: &BTreeSet<(usize, usize)>,
    d: usize,
) -> usize {
    let pred = canonical_pairs(pred);
    let truth = canonical_pairs(truth);
    debug_assert!(pred.iter().chain(truth.iter()).all(|&(_, b)| b < d));
    pred.symmetric_difference(&truth).count()
}

/// The accuracy companion of [`shd_undirected`]: `1 - shd / (d(d-1)/2)`.
pub fn undirected_accuracy(shd: usize, d: usize) -> f64 {
    let pairs = (d * (d - 1) / 2) as f64;
    1.0 - shd as f64 / pairs
}

/// Status of one unordered pair inside a CPDAG, with direction encoded
/// relative to the pair's `(low, high)` ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PairStatus {
    Absent,
    Undirected,
    LowToHigh,
    HighToLow,
}

fn pair_status(g: &Cpdag, low: usize, high: usize) -> PairStatus {
    if g.has_directed(low, high) {
        PairStatus::LowToHigh
    } else if g.has_directed(high, low) {
        PairStatus::HighToLow
    } else if g.has_undirected(low, high) {
        PairStatus::Undirected
    } else {
        PairStatus::Absent
    }
}

/// Structural Hamming distance between CPDAGs.
///
/// Per unordered pair, one point if skeleton presence differs, and one
/// point if both graphs have the pair but disagree on its orientation
/// status (directed vs. undirected, or opposite directions). The two
/// conditions are mutually exclusive, so each pair contributes at most 1.
pub fn shd_cpdag(pred: &Cpdag, truth: &Cpdag) -> Result<usize, EvalError> {
    if pred.d() != truth.d() {
        return Err(EvalError::SizeMismatch {
            left: pred.d(),
            right: truth.d(),
        });
    }
    let d = pred.d();
    let mut distance = 0usize;
    for high in 1..d {
        for low in 0..high {
            if pair_status(pred, low, high) != pair_status(truth, low, high) {
                distance += 1;
            }
        }
    }
    Ok(distance)
}

/// Validates a `[d, d, 3]` class-probability tensor and returns `d`.
fn probability_tensor_d(probs: &Array3<f64>) -> Result<usize, EvalError> {
    let (rows, cols, classes) = probs.dim();
    if rows != cols || classes != 3 || rows < 2 {
        return Err(EvalError::InvalidShape(format!(
            "expected [d, d, 3] with d >= 2, got [{rows}, {cols}, {classes}]"
        )));
    }
    Ok(rows)
}

/// Flattens the strict lower triangle of a `[d, d, 3]` probability tensor
/// into per-pair edge scores `1 - P(no-edge)`, iterating rows `i = 1..d`
/// and columns `j = 0..i` so entry order matches [`undirected_pair_truth`].
pub fn undirected_pair_scores(probs: &Array3<f64>) -> Result<Vec<f64>, EvalError> {
    let d = probability_tensor_d(probs)?;
    let mut scores = Vec::with_capacity(d * (d - 1) / 2);
    for i in 1..d {
        for j in 0..i {
            scores.push(probs[[i, j, 1]] + probs[[i, j, 2]]);
        }
    }
    Ok(scores)
}

/// Per-pair membership flags for `skeleton`, in the same order as
/// [`undirected_pair_scores`].
pub fn undirected_pair_truth(skeleton: &BTreeSet<(usize, usize)>, d: usize) -> Vec<bool> {
    let skeleton = canonical_pairs(skeleton);
    let mut flags = Vec::with_capacity(d * (d - 1) / 2);
    for i in 1..d {
        for j in 0..i {
            flags.push(skeleton.contains(&(j, i)));
        }
    }
    flags
}

/// Hard edge decisions from a `[d, d, 3]` probability tensor: a pair is an
/// edge when its most probable class is not "no edge" (ties stay with the
/// earlier class, so an exact tie with "no edge" predicts no edge).
pub fn predicted_edges(probs: &Array3<f64>) -> Result<BTreeSet<(usize, usize)>, EvalError> {
    let d = probability_tensor_d(probs)?;
    let mut edges = BTreeSet::new();
    for i in 1..d {
        for j in 0..i {
            let mut class = 0usize;
            let mut top = probs[[i, j, 0]];
            for c in 1..3 {
                if probs[[i, j, c]] > top {
                    top = probs[[i, j, c]];
                    class = c;
                }
            }
            if class != 0 {
                edges.insert((j, i));
            }
        }
    }
    Ok(edges)
}

/// Runs the stage-1 network on one data matrix and returns the `[d, d, 3]`
/// class probabilities at 64-bit, regardless of the model precision.
///
/// The input is passed through unchanged; callers are expected to feed
/// standardized columns, which is what the simulators already emit.
pub fn infer_edge_probabilities<F: Real>(
    params: &ParamStore<F>,
    config: &ModelConfig,
    x: &Array2<f64>,
) -> Result<Array3<f64>, EvalError> {
    let tape: Tape<F> = Tape::new();
    let probs = net::model_forward(&tape, params, &x.mapv(F::cast), config)?;
    let values = probs.value();
    values
        .mapv(Real::to_f64)
        .into_dimensionality::<Ix3>()
        .map_err(|e| EvalError::InvalidShape(e.to_string()))
}

/// One metrics row of the benchmark: a model evaluated on one fresh trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model_id: String,
    pub d: usize,
    pub m: usize,
    pub dependency: TestDependency,
    pub seed: u64,
    pub trial: usize,
    pub auc_pr: f64,
    pub shd: usize,
    pub accuracy: f64,
    pub runtime_seconds: f64,
}

/// A trial whose inference or metric computation failed; recorded instead
/// of aborting the benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub model_id: String,
    pub d: usize,
    pub m: usize,
    pub dependency: TestDependency,
    pub trial: usize,
    pub error: String,
}

/// Everything a benchmark run produced, in evaluation order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkTable {
    pub reports: Vec<MetricReport>,
    pub failures: Vec<TrialFailure>,
}

/// The experimental grid: every combination of `dims`, `sample_sizes` and
/// `dependencies` is one cell, evaluated over `trials` fresh worlds drawn
/// from ER graphs with expected degree `expected_degree`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkGrid {
    pub dims: Vec<usize>,
    pub sample_sizes: Vec<usize>,
    pub dependencies: Vec<TestDependency>,
    pub trials: usize,
    pub expected_degree: usize,
    pub seed: u64,
}

impl Default for BenchmarkGrid {
    fn default() -> Self {
        BenchmarkGrid {
            dims: vec![10],
            sample_sizes: vec![200],
            dependencies: vec![TestDependency::Chebyshev],
            trials: 5,
            expected_degree: 2,
            seed: 0,
        }
    }
}

impl BenchmarkGrid {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.dims.is_empty() || self.sample_sizes.is_empty() || self.dependencies.is_empty() {
            return Err(EvalError::InvalidGrid(
                "dims, sample_sizes and dependencies must all be non-empty".into(),
            ));
        }
        if let Some(&d) = self.dims.iter().find(|&&d| d < 2) {
            return Err(EvalError::InvalidGrid(format!(
                "need at least 2 variables, got d={d}"
            )));
        }
        if let Some(&m) = self.sample_sizes.iter().find(|&&m| m < 2) {
            return Err(EvalError::InvalidGrid(format!(
                "need at least 2 samples, got M={m}"
            )));
        }
        if self.trials == 0 {
            return Err(EvalError::InvalidGrid("need at least one trial".into()));
        }
        if self.expected_degree == 0 {
            return Err(EvalError::InvalidGrid(
                "expected degree must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Cells in row-major order: dims, then sample sizes, then dependencies.
    pub fn cells(&self) -> Vec<(usize, usize, TestDependency)> {
        let mut cells = Vec::new();
        for &d in &self.dims {
            for &m in &self.sample_sizes {
                for &dep in &self.dependencies {
                    cells.push((d, m, dep));
                }
            }
        }
        cells
    }
}

/// Optional second-stage model: when present, the benchmark row reports
/// CPDAG metrics (SHD against the CPDAG of the generating DAG) instead of
/// undirected-skeleton metrics. The AUC column always scores the stage-1
/// pair probabilities against the truth skeleton.
#[derive(Debug, Clone, Copy)]
pub struct Stage2Model<'a, F: Real> {
    pub params: &'a ParamStore<F>,
    pub config: &'a ModelConfig,
    pub orientation_threshold: f64,
}

/// A named parameter set entered into the benchmark.
#[derive(Debug, Clone, Copy)]
pub struct BenchmarkModel<'a, F: Real> {
    pub id: &'a str,
    pub params: &'a ParamStore<F>,
    pub config: &'a ModelConfig,
    pub stage2: Option<Stage2Model<'a, F>>,
}

/// One freshly simulated evaluation world.
struct TrialWorld {
    graph: DagSpec,
    data: Array2<f64>,
    skeleton: BTreeSet<(usize, usize)>,
    truth_flags: Vec<bool>,
}

fn draw_trial_world<Rg: rand::Rng>(
    d: usize,
    m: usize,
    dependency: TestDependency,
    expected_degree: usize,
    graph_rng: &mut Rg,
    data_rng: &mut Rg,
) -> Result<TrialWorld, EvalError> {
    let mut graph = None;
    for _ in 0..MAX_GRAPH_ATTEMPTS {
        let candidate = sample_er_dag(d, expected_degree, graph_rng)?;
        if !candidate.edges().is_empty() {
            graph = Some(candidate);
            break;
        }
    }
    let graph = graph.ok_or(EvalError::EmptyWorld {
        attempts: MAX_GRAPH_ATTEMPTS,
    })?;
    let data = generate_test_data(&graph, dependency, m, data_rng)?;
    let skeleton = graph.skeleton();
    let truth_flags = undirected_pair_truth(&skeleton, d);
    Ok(TrialWorld {
        graph,
        data,
        skeleton,
        truth_flags,
    })
}

/// AUC and SHD for one model on one world. Stage-1-only models are scored
/// on the undirected task; models with a second stage are scored on the
/// CPDAG task (same AUC definition, CPDAG SHD).
fn evaluate_model<F: Real>(
    model: &BenchmarkModel<'_, F>,
    world: &TrialWorld,
) -> Result<(f64, usize), EvalError> {
    let probs = infer_edge_probabilities(model.params, model.config, &world.data)?;
    let scores = undirected_pair_scores(&probs)?;
    if scores.len() != world.truth_flags.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            truth: world.truth_flags.len(),
        });
    }
    let auc = auc_pr(&scores, &world.truth_flags)?;
    let shd = match &model.stage2 {
        None => {
            let pred = predicted_edges(&probs)?;
            shd_undirected(&pred, &world.skeleton, world.graph.d())
        }
        Some(stage2) => {
            let estimate = estimate_cpdag(
                &world.data,
                model.params,
                model.config,
                stage2.params,
                stage2.config,
                stage2.orientation_threshold,
            )?;
            let truth = dag_to_cpdag(&world.graph);
            shd_cpdag(&estimate.cpdag, &truth)?
        }
    };
    Ok((auc, shd))
}

/// Runs every model (plus the zero-graph baseline) over every grid cell and
/// trial, writing the CSV described in [`write_benchmark_csv`] to `out`.
///
/// Within one trial all models see the same graph and data, so rows are
/// comparable across models. A failed trial is recorded in the returned
/// table (and as a NaN row in the CSV) without aborting the run.
pub fn run_benchmark<F: Real, W: io::Write>(
    grid: &BenchmarkGrid,
    models: &[BenchmarkModel<'_, F>],
    out: W,
) -> Result<BenchmarkTable, EvalError> {
    grid.validate()?;
    let mut table = BenchmarkTable::default();
    for (d, m, dependency) in grid.cells() {
        for trial in 0..grid.trials {
            let scope = format!("bench/d{d}/m{m}/{dependency}/t{trial}");
            let mut graph_rng = substream(grid.seed, &format!("{scope}/graph"));
            let mut data_rng = substream(grid.seed, &format!("{scope}/data"));
            let world = match draw_trial_world(
                d,
                m,
                dependency,
                grid.expected_degree,
                &mut graph_rng,
                &mut data_rng,
            ) {
                Ok(world) => world,
                Err(error) => {
                    for model in models {
                        table.failures.push(TrialFailure {
                            model_id: model.id.to_string(),
                            d,
                            m,
                            dependency,
                            trial,
                            error: error.to_string(),
                        });
                    }
                    table.failures.push(TrialFailure {
                        model_id: BASELINE_MODEL_ID.to_string(),
                        d,
                        m,
                        dependency,
                        trial,
                        error: error.to_string(),
                    });
                    continue;
                }
            };

            for model in models {
                let started = Instant::now();
                match evaluate_model(model, &world) {
                    Ok((auc, shd)) => table.reports.push(MetricReport {
                        model_id: model.id.to_string(),
                        d,
                        m,
                        dependency,
                        seed: grid.seed,
                        trial,
                        auc_pr: auc,
                        shd,
                        accuracy: undirected_accuracy(shd, d),
                        runtime_seconds: started.elapsed().as_secs_f64(),
                    }),
                    Err(error) => table.failures.push(TrialFailure {
                        model_id: model.id.to_string(),
                        d,
                        m,
                        dependency,
                        trial,
                        error: error.to_string(),
                    }),
                }
            }

            let started = Instant::now();
            let baseline_scores = vec![0.0; world.truth_flags.len()];
            match auc_pr(&baseline_scores, &world.truth_flags) {
                Ok(auc) => {
                    let shd = world.skeleton.len();
                    table.reports.push(MetricReport {
                        model_id: BASELINE_MODEL_ID.to_string(),
                        d,
                        m,
                        dependency,
                        seed: grid.seed,
                        trial,
                        auc_pr: auc,
                        shd,
                        accuracy: undirected_accuracy(shd, d),
                        runtime_seconds: started.elapsed().as_secs_f64(),
                    });
                }
                Err(error) => table.failures.push(TrialFailure {
                    model_id: BASELINE_MODEL_ID.to_string(),
                    d,
                    m,
                    dependency,
                    trial,
                    error: error.to_string(),
                }),
            }
        }
    }
    write_benchmark_csv(&table, out)?;
    Ok(table)
}

#[derive(Serialize)]
struct CsvRow<'a> {
    d: usize,
    #[serde(rename = "M")]
    m: usize,
    dependency: &'a str,
    trial: String,
    auc_pr: f64,
    shd: f64,
    accuracy: f64,
    runtime_s: f64,
    model_id: &'a str,
}

fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Writes the benchmark as CSV with columns
/// `d, M, dependency, trial, auc_pr, shd, accuracy, runtime_s, model_id`.
///
/// Rows are grouped per (cell, model) in first-seen order: the individual
/// trials (failures appear with NaN metrics), then a `mean` and a sample
/// `std` row over the successful trials of that group.
pub fn write_benchmark_csv<W: io::Write>(table: &BenchmarkTable, out: W) -> Result<(), EvalError> {
    type GroupKey = (usize, usize, TestDependency, String);
    enum Row<'t> {
        Ok(&'t MetricReport),
        Failed,
    }
    fn insert<'t>(
        order: &mut Vec<GroupKey>,
        groups: &mut BTreeMap<GroupKey, Vec<(usize, Row<'t>)>>,
        key: GroupKey,
        trial: usize,
        row: Row<'t>,
    ) {
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push((trial, row));
    }
    let mut order: Vec<GroupKey> = Vec::new();
    let mut groups: BTreeMap<GroupKey, Vec<(usize, Row<'_>)>> = BTreeMap::new();
    for report in &table.reports {
        let key = (
            report.d,
            report.m,
            report.dependency,
            report.model_id.clone(),
        );
        insert(&mut order, &mut groups, key, report.trial, Row::Ok(report));
    }
    for failure in &table.failures {
        let key = (
            failure.d,
            failure.m,
            failure.dependency,
            failure.model_id.clone(),
        );
        insert(&mut order, &mut groups, key, failure.trial, Row::Failed);
    }

    let mut writer = csv::Writer::from_writer(out);
    for key in order {
        let (d, m, dependency, model_id) = key.clone();
        let mut rows = groups.remove(&key).unwrap_or_default();
        rows.sort_by_key(|&(trial, _)| trial);
        let mut aucs = Vec::new();
        let mut shds = Vec::new();
        let mut accuracies = Vec::new();
        let mut runtimes = Vec::new();
        for (trial, row) in &rows {
            match row {
                Row::Ok(report) => {
                    aucs.push(report.auc_pr);
                    shds.push(report.shd as f64);
                    accuracies.push(report.accuracy);
                    runtimes.push(report.runtime_seconds);
                    writer.serialize(CsvRow {
                        d,
                        m,
                        dependency: dependency.name(),
                        trial: trial.to_string(),
                        auc_pr: report.auc_pr,
                        shd: report.shd as f64,
                        accuracy: report.accuracy,
                        runtime_s: report.runtime_seconds,
                        model_id: &model_id,
                    })?;
                }
                Row::Failed => {
                    writer.serialize(CsvRow {
                        d,
                        m,
                        dependency: dependency.name(),
                        trial: trial.to_string(),
                        auc_pr: f64::NAN,
                        shd: f64::NAN,
                        accuracy: f64::NAN,
                        runtime_s: f64::NAN,
                        model_id: &model_id,
                    })?;
                }
            }
        }
        if !aucs.is_empty() {
            let (auc_mean, auc_std) = mean_and_std(&aucs);
            let (shd_mean, shd_std) = mean_and_std(&shds);
            let (accuracy_mean, accuracy_std) = mean_and_std(&accuracies);
            let (runtime_mean, runtime_std) = mean_and_std(&runtimes);
            let stats = [
                ("mean", auc_mean, shd_mean, accuracy_mean, runtime_mean),
                ("std", auc_std, shd_std, accuracy_std, runtime_std),
            ];
            for (label, auc, shd, accuracy, runtime) in stats {
                writer.serialize(CsvRow {
                    d,
                    m,
                    dependency: dependency.name(),
                    trial: label.to_string(),
                    auc_pr: auc,
                    shd,
                    accuracy,
                    runtime_s: runtime,
                    model_id: &model_id,
                })?;
            }
        }
    }
    writer.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::{derive_three_class_labels, Cpdag};
    use crate::net::init_params;
    use rand::Rng;

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        substream(seed, "eval/tests")
    }

    // ---- AUC-PR ----

    #[test]
    fn auc_is_one_for_perfect_ranking() {
        let truth = vec![true, false, true, false, false];
        let scores: Vec<f64> = truth.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
        assert_eq!(auc_pr(&scores, &truth).unwrap(), 1.0);
    }

    #[test]
    fn auc_of_constant_scores_is_the_positive_rate() {
        let mut r = rng(1);
        for _ in 0..20 {
            let n = r.random_range(3..=40);
            let truth: Vec<bool> = (0..n).map(|_| r.random::<f64>() < 0.4).collect();
            if !truth.iter().any(|&t| t) {
                continue;
            }
            let scores = vec![0.7; n];
            let positives = truth.iter().filter(|&&t| t).count();
            let auc = auc_pr(&scores, &truth).unwrap();
            assert_eq!(auc, positives as f64 / n as f64);
        }
    }

    /// Recomputes precision/recall from scratch at every distinct threshold.
    fn auc_threshold_oracle(scores: &[f64], truth: &[bool]) -> f64 {
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let positives = truth.iter().filter(|&&t| t).count() as f64;
        let mut area = 0.0;
        let mut previous_recall = 0.0;
        for &t in &thresholds {
            let mut tp = 0.0;
            let mut flagged = 0.0;
            for (&s, &y) in scores.iter().zip(truth) {
                if s >= t {
                    flagged += 1.0;
                    if y {
                        tp += 1.0;
                    }
                }
            }
            let recall = tp / positives;
            let precision = tp / flagged;
            area += (recall - previous_recall) * precision;
            previous_recall = recall;
        }
        area
    }

    #[test]
    fn auc_matches_the_threshold_enumeration_oracle() {
        let mut r = rng(2);
        let mut cases = 0;
        while cases < 100 {
            let n = 20;
            let truth: Vec<bool> = (0..n).map(|_| r.random::<f64>() < 0.3).collect();
            if !truth.iter().any(|&t| t) {
                continue;
            }
            // Round half of the cases to one decimal so ties are common.
            let quantize = cases % 2 == 0;
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    let s = r.random::<f64>();
                    if quantize {
                        (s * 10.0).round() / 10.0
                    } else {
                        s
                    }
                })
                .collect();
            let fast = auc_pr(&scores, &truth).unwrap();
            let slow = auc_threshold_oracle(&scores, &truth);
            assert!(
                (fast - slow).abs() < 1e-12,
                "case {cases}: {fast} vs {slow}"
            );
            cases += 1;
        }
    }

    #[test]
    fn auc_is_invariant_under_strictly_monotone_transforms() {
        let mut r = rng(3);
        let transforms: [fn(f64) -> f64; 3] = [|x| 2.0 * x + 3.0, |x| x.exp(), |x| x * x * x];
        for _ in 0..20 {
            let n = 15;
            let truth: Vec<bool> = (0..n).map(|_| r.random::<f64>() < 0.5).collect();
            if !truth.iter().any(|&t| t) {
                continue;
            }
            let scores: Vec<f64> = (0..n)
                .map(|_| ((r.random::<f64>() * 8.0).round() / 8.0) - 0.5)
                .collect();
            let base = auc_pr(&scores, &truth).unwrap();
            for f in transforms {
                let mapped: Vec<f64> = scores.iter().map(|&s| f(s)).collect();
                assert_eq!(auc_pr(&mapped, &truth).unwrap(), base);
            }
        }
    }

    #[test]
    fn auc_rejects_degenerate_inputs() {
        assert!(matches!(
            auc_pr(&[0.1, 0.2], &[true]),
            Err(EvalError::LengthMismatch {
                scores: 2,
                truth: 1
            })
        ));
        assert!(matches!(
            auc_pr(&[0.1, 0.2], &[false, false]),
            Err(EvalError::NoPositives)
        ));
        assert!(matches!(
            auc_pr(&[0.1, f64::NAN], &[true, false]),
            Err(EvalError::NonFiniteScore { index: 1 })
        ));
        assert!(matches!(auc_pr(&[], &[]), Err(EvalError::NoPositives)));
    }

    // ---- undirected SHD ----

    fn random_edge_set(d: usize, p: f64, r: &mut impl Rng) -> BTreeSet<(usize, usize)> {
        let mut edges = BTreeSet::new();
        for b in 1..d {
            for a in 0..b {
                if r.random::<f64>() < p {
                    edges.insert((a, b));
                }
            }
        }
        edges
    }

    #[test]
    fn shd_undirected_examples() {
        let mut r = rng(4);
        let truth = random_edge_set(8, 0.3, &mut r);
        assert_eq!(shd_undirected(&truth, &truth, 8), 0);
        assert_eq!(shd_undirected(&BTreeSet::new(), &truth, 8), truth.len());
    }

    #[test]
    fn shd_undirected_matches_the_set_difference_oracle() {
        let mut r = rng(5);
        for _ in 0..100 {
            let d = r.random_range(2..=9);
            let pred = random_edge_set(d, 0.4, &mut r);
            let truth = random_edge_set(d, 0.4, &mut r);
            let oracle = pred
                .union(&truth)
                .filter(|pair| pred.contains(*pair) != truth.contains(*pair))
                .count();
            assert_eq!(shd_undirected(&pred, &truth, d), oracle);
        }
    }

    #[test]
    fn shd_undirected_is_a_metric() {
        let mut r = rng(6);
        for _ in 0..100 {
            let d = 6;
            let a = random_edge_set(d, 0.4, &mut r);
            let b = random_edge_set(d, 0.4, &mut r);
            let c = random_edge_set(d, 0.4, &mut r);
            assert_eq!(shd_undirected(&a, &a, d), 0);
            assert_eq!(shd_undirected(&a, &b, d), shd_undirected(&b, &a, d));
            assert!(
                shd_undirected(&a, &c, d) <= shd_undirected(&a, &b, d) + shd_undirected(&b, &c, d)
            );
        }
    }

    #[test]
    fn accuracy_identity_holds_exactly() {
        let mut r = rng(7);
        for _ in 0..50 {
            let d = r.random_range(3..=10);
            let pred = random_edge_set(d, 0.4, &mut r);
            let truth = random_edge_set(d, 0.4, &mut r);
            let shd = shd_undirected(&pred, &truth, d);
            let pairs = (d * (d - 1) / 2) as f64;
            assert_eq!(undirected_accuracy(shd, d), 1.0 - shd as f64 / pairs);
        }
    }

    // ---- CPDAG SHD ----

    fn random_cpdag(d: usize, r: &mut impl Rng) -> Cpdag {
        let edges: BTreeSet<(usize, usize)> = sample_er_dag(d, 2, r).unwrap().edges().clone();
        dag_to_cpdag(&DagSpec::new(d, edges).unwrap())
    }

    #[test]
    fn shd_cpdag_examples() {
        let mut r = rng(8);
        let g = random_cpdag(5, &mut r);
        assert_eq!(shd_cpdag(&g, &g).unwrap(), 0);

        let directed: BTreeSet<_> = [(0, 1)].into_iter().collect();
        let undirected: BTreeSet<_> = [(0, 1)].into_iter().collect();
        let pred = Cpdag::new(3, directed, BTreeSet::new()).unwrap();
        let truth = Cpdag::new(3, BTreeSet::new(), undirected).unwrap();
        assert_eq!(shd_cpdag(&pred, &truth).unwrap(), 1);
    }

    #[test]
    fn shd_cpdag_matches_the_pairwise_case_oracle() {
        let mut r = rng(9);
        for _ in 0..100 {
            let pred = random_cpdag(5, &mut r);
            let truth = random_cpdag(5, &mut r);
            let mut oracle = 0usize;
            for b in 1..5 {
                for a in 0..b {
                    let in_pred = pred.adjacent(a, b);
                    let in_truth = truth.adjacent(a, b);
                    if in_pred != in_truth {
                        oracle += 1;
                    } else if in_pred && in_truth {
                        let pred_directed = pred.has_directed(a, b) || pred.has_directed(b, a);
                        let truth_directed = truth.has_directed(a, b) || truth.has_directed(b, a);
                        if pred_directed != truth_directed
                            || (pred_directed
                                && pred.has_directed(a, b) != truth.has_directed(a, b))
                        {
                            oracle += 1;
                        }
                    }
                }
            }
            assert_eq!(shd_cpdag(&pred, &truth).unwrap(), oracle);
        }
    }

    #[test]
    fn shd_cpdag_rejects_size_mismatch() {
        let a = Cpdag::new(3, BTreeSet::new(), BTreeSet::new()).unwrap();
        let b = Cpdag::new(4, BTreeSet::new(), BTreeSet::new()).unwrap();
        assert!(matches!(
            shd_cpdag(&a, &b),
            Err(EvalError::SizeMismatch { left: 3, right: 4 })
        ));
    }

    // ---- pair flattening ----

    #[test]
    fn pair_scores_truth_and_decisions_share_one_order() {
        let d = 4;
        let mut probs = Array3::<f64>::zeros((d, d, 3));
        for i in 0..d {
            for j in 0..d {
                probs[[i, j, 0]] = 1.0;
            }
        }
        // Make (1, 3) a confident skeleton edge; row index is the larger node.
        probs[[3, 1, 0]] = 0.1;
        probs[[3, 1, 1]] = 0.8;
        probs[[3, 1, 2]] = 0.1;

        let scores = undirected_pair_scores(&probs).unwrap();
        let skeleton: BTreeSet<_> = [(1, 3)].into_iter().collect();
        let flags = undirected_pair_truth(&skeleton, d);
        assert_eq!(scores.len(), 6);
        assert_eq!(flags.len(), 6);
        for (s, t) in scores.iter().zip(&flags) {
            assert_eq!(*t, *s > 0.5, "score {s} disagrees with flag {t}");
        }
        assert_eq!(predicted_edges(&probs).unwrap(), skeleton);
        assert_eq!(auc_pr(&scores, &flags).unwrap(), 1.0);
    }

    #[test]
    fn pair_helpers_reject_bad_shapes() {
        let bad = Array3::<f64>::zeros((3, 4, 3));
        assert!(matches!(
            undirected_pair_scores(&bad),
            Err(EvalError::InvalidShape(_))
        ));
        let bad = Array3::<f64>::zeros((3, 3, 2));
        assert!(matches!(
            predicted_edges(&bad),
            Err(EvalError::InvalidShape(_))
        ));
    }

    #[test]
    fn exact_class_ties_predict_no_edge() {
        let d = 2;
        let mut probs = Array3::<f64>::zeros((d, d, 3));
        probs[[1, 0, 0]] = 0.5;
        probs[[1, 0, 1]] = 0.5;
        assert!(predicted_edges(&probs).unwrap().is_empty());
    }

    // ---- benchmark harness ----

    #[test]
    fn grid_validation_rejects_degenerate_grids() {
        let ok = BenchmarkGrid::default();
        assert!(ok.validate().is_ok());
        let mut g = ok.clone();
        g.dims.clear();
        assert!(g.validate().is_err());
        let mut g = ok.clone();
        g.dims = vec![1];
        assert!(g.validate().is_err());
        let mut g = ok.clone();
        g.sample_sizes = vec![1];
        assert!(g.validate().is_err());
        let mut g = ok.clone();
        g.trials = 0;
        assert!(g.validate().is_err());
        let mut g = ok.clone();
        g.expected_degree = 0;
        assert!(g.validate().is_err());
    }

    #[test]
    fn benchmark_reports_models_and_baseline_per_trial() {
        let config = ModelConfig::tiny();
        let mut r = rng(10);
        let params: ParamStore<f64> = init_params(&config, &mut r);
        let models = [BenchmarkModel {
            id: "tiny",
            params: &params,
            config: &config,
            stage2: None,
        }];
        let grid = BenchmarkGrid {
            dims: vec![5],
            sample_sizes: vec![30],
            dependencies: vec![TestDependency::Linear, TestDependency::Chebyshev],
            trials: 2,
            expected_degree: 2,
            seed: 11,
        };
        let mut csv_bytes = Vec::new();
        let table = run_benchmark(&grid, &models, &mut csv_bytes).unwrap();
        assert!(table.failures.is_empty(), "{:?}", table.failures);
        // 2 cells x 2 trials x (1 model + baseline).
        assert_eq!(table.reports.len(), 8);
        for report in &table.reports {
            assert!((0.0..=1.0).contains(&report.auc_pr));
            assert!((0.0..=1.0).contains(&report.accuracy));
            assert_eq!(report.accuracy, undirected_accuracy(report.shd, report.d));
            assert!(report.runtime_seconds >= 0.0);
            assert_eq!(report.seed, 11);
        }
        let baseline_rows: Vec<_> = table
            .reports
            .iter()
            .filter(|r| r.model_id == BASELINE_MODEL_ID)
            .collect();
        assert_eq!(baseline_rows.len(), 4);

        let text = String::from_utf8(csv_bytes).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "d,M,dependency,trial,auc_pr,shd,accuracy,runtime_s,model_id"
        );
        // 8 trial rows + 4 groups x 2 aggregate rows.
        assert_eq!(lines.count(), 16);
        assert!(text.contains(",mean,"));
        assert!(text.contains(",std,"));
    }

    #[test]
    fn benchmark_trials_share_data_across_models_and_are_deterministic() {
        let config = ModelConfig::tiny();
        let mut r = rng(12);
        let params: ParamStore<f64> = init_params(&config, &mut r);
        let models = [BenchmarkModel {
            id: "tiny",
            params: &params,
            config: &config,
            stage2: None,
        }];
        let grid = BenchmarkGrid {
            dims: vec![5],
            sample_sizes: vec![40],
            dependencies: vec![TestDependency::Sine],
            trials: 2,
            expected_degree: 2,
            seed: 13,
        };
        let first = run_benchmark(&grid, &models, io::sink()).unwrap();
        let second = run_benchmark(&grid, &models, io::sink()).unwrap();
        assert_eq!(first.reports.len(), second.reports.len());
        for (a, b) in first.reports.iter().zip(&second.reports) {
            assert_eq!(a.model_id, b.model_id);
            assert_eq!(a.trial, b.trial);
            assert_eq!(a.auc_pr, b.auc_pr);
            assert_eq!(a.shd, b.shd);
            assert_eq!(a.accuracy, b.accuracy);
        }
    }

    #[test]
    fn baseline_accuracy_approaches_the_expected_edge_fraction() {
        let grid = BenchmarkGrid {
            dims: vec![15],
            sample_sizes: vec![20],
            dependencies: vec![TestDependency::Linear],
            trials: 30,
            expected_degree: 2,
            seed: 14,
        };
        let models: [BenchmarkModel<'_, f64>; 0] = [];
        let table = run_benchmark(&grid, &models, io::sink()).unwrap();
        assert_eq!(table.reports.len(), 30);
        let mean_accuracy: f64 = table.reports.iter().map(|r| r.accuracy).sum::<f64>() / 30.0;
        let expected = 1.0 - 2.0 / 14.0;
        assert!(
            (mean_accuracy - expected).abs() < 0.03,
            "mean accuracy {mean_accuracy} vs expected {expected}"
        );
        // The all-equal baseline's AUC equals the per-trial positive rate.
        for report in &table.reports {
            let pairs = (report.d * (report.d - 1) / 2) as f64;
            assert_eq!(report.auc_pr, report.shd as f64 / pairs);
        }
    }

    #[test]
    fn benchmark_with_stage2_reports_cpdag_distance() {
        let config = ModelConfig::tiny();
        let mut r = rng(15);
        let stage1: ParamStore<f64> = init_params(&config, &mut r);
        let stage2: ParamStore<f64> = crate::cpdagnet::init_vstructure_params(&config, &mut r);
        let models = [BenchmarkModel {
            id: "two_step",
            params: &stage1,
            config: &config,
            stage2: Some(Stage2Model {
                params: &stage2,
                config: &config,
                orientation_threshold: 0.5,
            }),
        }];
        let grid = BenchmarkGrid {
            dims: vec![5],
            sample_sizes: vec![30],
            dependencies: vec![TestDependency::Linear],
            trials: 1,
            expected_degree: 2,
            seed: 16,
        };
        let table = run_benchmark(&grid, &models, io::sink()).unwrap();
        assert!(table.failures.is_empty(), "{:?}", table.failures);
        let row = table
            .reports
            .iter()
            .find(|r| r.model_id == "two_step")
            .unwrap();
        assert!(row.shd <= 10);
        assert_eq!(row.accuracy, undirected_accuracy(row.shd, 5));
    }

    #[test]
    fn csv_records_failed_trials_as_nan_rows_and_skips_them_in_aggregates() {
        let dependency = TestDependency::Linear;
        let table = BenchmarkTable {
            reports: vec![
                MetricReport {
                    model_id: "m".into(),
                    d: 5,
                    m: 30,
                    dependency,
                    seed: 0,
                    trial: 0,
                    auc_pr: 0.5,
                    shd: 2,
                    accuracy: 0.8,
                    runtime_seconds: 0.1,
                },
                MetricReport {
                    model_id: "m".into(),
                    d: 5,
                    m: 30,
                    dependency,
                    seed: 0,
                    trial: 2,
                    auc_pr: 0.7,
                    shd: 4,
                    accuracy: 0.6,
                    runtime_seconds: 0.3,
                },
            ],
            failures: vec![TrialFailure {
                model_id: "m".into(),
                d: 5,
                m: 30,
                dependency,
                trial: 1,
                error: "boom".into(),
            }],
        };
        let mut bytes = Vec::new();
        write_benchmark_csv(&table, &mut bytes).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        // header + 3 trial rows + mean + std
        assert_eq!(lines.len(), 6);
        assert!(lines[2].contains("NaN"));
        let mean_line = lines.iter().find(|l| l.contains(",mean,")).unwrap();
        // Mean over the two successful trials only: auc 0.6, shd 3, accuracy 0.7.
        assert!(mean_line.contains("0.6"), "{mean_line}");
        assert!(
            mean_line.contains(",3.0,") || mean_line.contains(",3,"),
            "{mean_line}"
        );
    }

    #[test]
    fn labels_and_skeleton_flags_agree_on_random_dags() {
        let mut r = rng(17);
        for _ in 0..20 {
            let g = sample_er_dag(6, 2, &mut r).unwrap();
            let labels = derive_three_class_labels(&g);
            let flags = undirected_pair_truth(&g.skeleton(), 6);
            let classes = labels.class_matrix();
            let mut idx = 0;
            for i in 1..6 {
                for j in 0..i {
                    assert_eq!(flags[idx], classes[[i, j]] == 1);
                    idx += 1;
                }
            }
        }
    }
}
