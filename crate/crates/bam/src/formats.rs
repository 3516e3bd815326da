//! On-disk JSON and CSV conventions shared by the command-line tools.
//!
//! Data matrices travel as CSV with a `v1..vd` header; graphs, labels,
//! class-probability predictions, CPDAGs and run configurations travel as
//! JSON. Readers validate shapes and vocabularies so downstream code only
//! ever sees well-formed values, and every writer/reader pair round-trips
//! values exactly (floats are printed in shortest round-trip form).

use std::io::{Read, Write};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cpdagnet::{ImmoralityReportRow, VStructureTrainConfig};
use crate::graphs::{Cpdag, DagSpec, GraphError, ThreeClassLabels};
use crate::train::{EpochStats, LossBreakdown, TrainConfig};

/// Class vocabulary used by label and prediction files, in tensor order.
pub const CLASS_ORDER: [&str; 3] = ["no_edge", "skeleton", "moralized"];

/// Errors from reading or writing the on-disk formats.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

fn invalid(message: impl Into<String>) -> FormatError {
    FormatError::Invalid(message.into())
}

// ---------------------------------------------------------------------------
// Data matrices: CSV with a v1..vd header, one row per sample.
// ---------------------------------------------------------------------------

/// Writes an `m x d` data matrix as CSV with columns `v1..vd`.
pub fn write_data_csv<W: Write>(x: &Array2<f64>, out: W) -> Result<(), FormatError> {
    let mut writer = csv::Writer::from_writer(out);
    let header: Vec<String> = (1..=x.ncols()).map(|j| format!("v{j}")).collect();
    writer.write_record(&header)?;
    for row in x.rows() {
        writer.write_record(row.iter().map(|v| v.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads a data CSV produced by [`write_data_csv`] (or any CSV with the
/// same `v1..vd` header). Requires at least one row, rectangular records,
/// and finite values.
pub fn read_data_csv<R: Read>(input: R) -> Result<Array2<f64>, FormatError> {
    let mut reader = csv::Reader::from_reader(input);
    let headers = reader.headers()?.clone();
    let d = headers.len();
    for (j, name) in headers.iter().enumerate() {
        let expected = format!("v{}", j + 1);
        if name != expected {
            return Err(invalid(format!(
                "data column {} is named '{name}', expected '{expected}'",
                j + 1
            )));
        }
    }
    let mut values = Vec::new();
    let mut rows = 0usize;
    for (index, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != d {
            return Err(invalid(format!(
                "row {} has {} fields, expected {d}",
                index + 1,
                record.len()
            )));
        }
        for field in record.iter() {
            let value: f64 = field
                .parse()
                .map_err(|_| invalid(format!("row {}: '{field}' is not a number", index + 1)))?;
            if !value.is_finite() {
                return Err(invalid(format!(
                    "row {} contains a non-finite value",
                    index + 1
                )));
            }
            values.push(value);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(invalid("data CSV has no rows"));
    }
    Array2::from_shape_vec((rows, d), values).map_err(|e| invalid(e.to_string()))
}

// ---------------------------------------------------------------------------
// Graphs, labels, CPDAGs: JSON.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct GraphFile {
    d: usize,
    edges: Vec<(usize, usize)>,
}

/// Writes a DAG as `{d, edges: [[parent, child], ...]}`.
pub fn write_graph_json<W: Write>(g: &DagSpec, out: W) -> Result<(), FormatError> {
    let file = GraphFile {
        d: g.d(),
        edges: g.edges().iter().copied().collect(),
    };
    serde_json::to_writer_pretty(out, &file)?;
    Ok(())
}

/// Reads a DAG written by [`write_graph_json`], revalidating acyclicity.
pub fn read_graph_json<R: Read>(input: R) -> Result<DagSpec, FormatError> {
    let file: GraphFile = serde_json::from_reader(input)?;
    Ok(DagSpec::new(file.d, file.edges.into_iter().collect())?)
}

#[derive(Serialize, Deserialize)]
struct LabelsFile {
    d: usize,
    class_order: Vec<String>,
    classes: Vec<Vec<u8>>,
}

fn check_class_order(found: &[String]) -> Result<(), FormatError> {
    if found.len() != CLASS_ORDER.len() || found.iter().zip(CLASS_ORDER).any(|(a, b)| a != b) {
        return Err(invalid(format!(
            "class_order must be {CLASS_ORDER:?}, got {found:?}"
        )));
    }
    Ok(())
}

/// Writes three-class labels as a row-major `d x d` class-id matrix.
pub fn write_labels_json<W: Write>(labels: &ThreeClassLabels, out: W) -> Result<(), FormatError> {
    let classes = labels
        .class_matrix()
        .rows()
        .into_iter()
        .map(|row| row.to_vec())
        .collect();
    let file = LabelsFile {
        d: labels.d(),
        class_order: CLASS_ORDER.iter().map(|s| s.to_string()).collect(),
        classes,
    };
    serde_json::to_writer_pretty(out, &file)?;
    Ok(())
}

/// Reads labels written by [`write_labels_json`], revalidating symmetry,
/// the class vocabulary, and the square shape.
pub fn read_labels_json<R: Read>(input: R) -> Result<ThreeClassLabels, FormatError> {
    let file: LabelsFile = serde_json::from_reader(input)?;
    check_class_order(&file.class_order)?;
    if file.classes.len() != file.d || file.classes.iter().any(|row| row.len() != file.d) {
        return Err(invalid(format!("labels matrix is not {0}x{0}", file.d)));
    }
    let flat: Vec<u8> = file.classes.into_iter().flatten().collect();
    let matrix =
        Array2::from_shape_vec((file.d, file.d), flat).map_err(|e| invalid(e.to_string()))?;
    Ok(ThreeClassLabels::from_class_matrix(matrix)?)
}

#[derive(Serialize, Deserialize)]
struct CpdagFile {
    d: usize,
    directed: Vec<(usize, usize)>,
    undirected: Vec<(usize, usize)>,
}

/// Writes a CPDAG as `{d, directed: [[parent, child]], undirected: [[a, b]]}`.
pub fn write_cpdag_json<W: Write>(g: &Cpdag, out: W) -> Result<(), FormatError> {
    let file = CpdagFile {
        d: g.d(),
        directed: g.directed().iter().copied().collect(),
        undirected: g.undirected().iter().copied().collect(),
    };
    serde_json::to_writer_pretty(out, &file)?;
    Ok(())
}

/// Reads a CPDAG written by [`write_cpdag_json`], revalidating edge ranges
/// and disjointness.
pub fn read_cpdag_json<R: Read>(input: R) -> Result<Cpdag, FormatError> {
    let file: CpdagFile = serde_json::from_reader(input)?;
    Ok(Cpdag::new(
        file.d,
        file.directed.into_iter().collect(),
        file.undirected.into_iter().collect(),
    )?)
}

// ---------------------------------------------------------------------------
// Predictions: JSON with an explicit class vocabulary.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct PredictionFile {
    d: usize,
    class_order: Vec<String>,
    probs: Vec<Vec<Vec<f64>>>,
}

/// Writes a `[d, d, 3]` class-probability tensor as nested JSON arrays.
pub fn write_prediction_json<W: Write>(probs: &Array3<f64>, out: W) -> Result<(), FormatError> {
    let (rows, cols, classes) = probs.dim();
    if rows != cols || classes != CLASS_ORDER.len() {
        return Err(invalid(format!(
            "prediction tensor must be [d, d, {}], got [{rows}, {cols}, {classes}]",
            CLASS_ORDER.len()
        )));
    }
    let nested: Vec<Vec<Vec<f64>>> = (0..rows)
        .map(|i| {
            (0..cols)
                .map(|j| (0..classes).map(|c| probs[[i, j, c]]).collect())
                .collect()
        })
        .collect();
    let file = PredictionFile {
        d: rows,
        class_order: CLASS_ORDER.iter().map(|s| s.to_string()).collect(),
        probs: nested,
    };
    serde_json::to_writer_pretty(out, &file)?;
    Ok(())
}

/// Reads a prediction written by [`write_prediction_json`], checking the
/// class vocabulary, the `[d, d, 3]` shape, and that entries are
/// probabilities.
pub fn read_prediction_json<R: Read>(input: R) -> Result<Array3<f64>, FormatError> {
    let file: PredictionFile = serde_json::from_reader(input)?;
    check_class_order(&file.class_order)?;
    let d = file.d;
    if file.probs.len() != d {
        return Err(invalid(format!(
            "expected {d} probability rows, got {}",
            file.probs.len()
        )));
    }
    let mut tensor = Array3::zeros((d, d, CLASS_ORDER.len()));
    for (i, row) in file.probs.iter().enumerate() {
        if row.len() != d {
            return Err(invalid(format!(
                "probability row {i} has {} entries, expected {d}",
                row.len()
            )));
        }
        for (j, cell) in row.iter().enumerate() {
            if cell.len() != CLASS_ORDER.len() {
                return Err(invalid(format!(
                    "entry ({i}, {j}) has {} classes, expected {}",
                    cell.len(),
                    CLASS_ORDER.len()
                )));
            }
            for (c, &p) in cell.iter().enumerate() {
                if !(0.0..=1.0).contains(&p) {
                    return Err(invalid(format!(
                        "entry ({i}, {j}, {c}) is {p}, not a probability"
                    )));
                }
                tensor[[i, j, c]] = p;
            }
        }
    }
    Ok(tensor)
}

// ---------------------------------------------------------------------------
// Training traces and immorality reports: CSV.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TraceRow {
    epoch: usize,
    binary: f64,
    categorical: f64,
    penalty: f64,
    total: f64,
}

/// Writes a per-epoch loss trace with columns
/// `epoch,binary,categorical,penalty,total`.
pub fn write_trace_csv<W: Write>(trace: &[EpochStats], out: W) -> Result<(), FormatError> {
    let mut writer = csv::Writer::from_writer(out);
    for stats in trace {
        writer.serialize(TraceRow {
            epoch: stats.epoch,
            binary: stats.loss.binary,
            categorical: stats.loss.categorical,
            penalty: stats.loss.penalty,
            total: stats.loss.total,
        })?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads a trace written by [`write_trace_csv`]. The `total` column must
/// equal the sum of the three parts exactly (floats round-trip exactly
/// through the CSV).
pub fn read_trace_csv<R: Read>(input: R) -> Result<Vec<EpochStats>, FormatError> {
    let mut reader = csv::Reader::from_reader(input);
    let mut trace = Vec::new();
    for row in reader.deserialize() {
        let row: TraceRow = row?;
        let loss = LossBreakdown::from_parts(row.binary, row.categorical, row.penalty);
        if loss.total != row.total {
            return Err(invalid(format!(
                "epoch {}: total {} does not equal binary + categorical + penalty = {}",
                row.epoch, row.total, loss.total
            )));
        }
        trace.push(EpochStats {
            epoch: row.epoch,
            loss,
        });
    }
    Ok(trace)
}

/// Writes the stage-2 immorality report with columns
/// `parent_a,parent_b,candidate,probability,oriented`.
pub fn write_immorality_csv<W: Write>(
    rows: &[ImmoralityReportRow],
    out: W,
) -> Result<(), FormatError> {
    let mut writer = csv::Writer::from_writer(out);
    // The csv crate only emits headers on the first serialized record, so an
    // empty report needs them written explicitly to keep the file
    // self-describing.
    writer.write_record([
        "parent_a",
        "parent_b",
        "candidate",
        "probability",
        "oriented",
    ])?;
    for row in rows {
        let mut record = csv::StringRecord::new();
        record.push_field(&row.parent_a.to_string());
        record.push_field(&row.parent_b.to_string());
        record.push_field(&row.candidate.to_string());
        record.push_field(&row.probability.to_string());
        record.push_field(&row.oriented.to_string());
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Run configuration: JSON with defaults for every field.
// ---------------------------------------------------------------------------

/// The full configuration of a run: stage-1 training (which embeds the
/// model and world ranges) plus stage-2 training. Every field has a
/// default, so `{}` is a valid config file and partial files override only
/// what they mention.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub vstructure: VStructureTrainConfig,
}

/// Reads a [`RunConfig`], filling unmentioned fields with defaults.
pub fn read_run_config<R: Read>(input: R) -> Result<RunConfig, FormatError> {
    Ok(serde_json::from_reader(input)?)
}

/// Writes a [`RunConfig`] with every field spelled out.
pub fn write_run_config<W: Write>(config: &RunConfig, out: W) -> Result<(), FormatError> {
    serde_json::to_writer_pretty(out, config)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::{dag_to_cpdag, derive_three_class_labels, sample_er_dag};
    use crate::rng::substream;
    use ndarray::Array3;
    use rand::Rng;

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        substream(seed, "formats/tests")
    }

    #[test]
    fn data_csv_round_trips_exactly() {
        let mut r = rng(1);
        let x = Array2::from_shape_fn((7, 4), |_| r.random::<f64>() * 13.0 - 6.5);
        let mut bytes = Vec::new();
        write_data_csv(&x, &mut bytes).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with("v1,v2,v3,v4\n"));
        let back = read_data_csv(bytes.as_slice()).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn data_csv_rejects_malformed_input() {
        assert!(matches!(
            read_data_csv("a,b\n1,2\n".as_bytes()),
            Err(FormatError::Invalid(_))
        ));
        assert!(matches!(
            read_data_csv("v1,v2\n".as_bytes()),
            Err(FormatError::Invalid(_))
        ));
        assert!(matches!(
            read_data_csv("v1,v2\n1,x\n".as_bytes()),
            Err(FormatError::Invalid(_))
        ));
        assert!(matches!(
            read_data_csv("v1,v2\n1,NaN\n".as_bytes()),
            Err(FormatError::Invalid(_))
        ));
        // Ragged rows are caught by the CSV layer itself.
        assert!(read_data_csv("v1,v2\n1,2,3\n".as_bytes()).is_err());
    }

    #[test]
    fn graph_json_round_trips() {
        let mut r = rng(2);
        for _ in 0..10 {
            let g = sample_er_dag(6, 2, &mut r).unwrap();
            let mut bytes = Vec::new();
            write_graph_json(&g, &mut bytes).unwrap();
            let back = read_graph_json(bytes.as_slice()).unwrap();
            assert_eq!(back, g);
        }
    }

    #[test]
    fn graph_json_rejects_cycles() {
        let cyclic = r#"{"d": 2, "edges": [[0, 1], [1, 0]]}"#;
        assert!(matches!(
            read_graph_json(cyclic.as_bytes()),
            Err(FormatError::Graph(_))
        ));
    }

    #[test]
    fn labels_json_round_trips_and_checks_vocabulary() {
        let mut r = rng(3);
        let g = sample_er_dag(5, 2, &mut r).unwrap();
        let labels = derive_three_class_labels(&g);
        let mut bytes = Vec::new();
        write_labels_json(&labels, &mut bytes).unwrap();
        let back = read_labels_json(bytes.as_slice()).unwrap();
        assert_eq!(back, labels);

        let tampered = String::from_utf8(bytes)
            .unwrap()
            .replace("moralized", "extra");
        assert!(matches!(
            read_labels_json(tampered.as_bytes()),
            Err(FormatError::Invalid(_))
        ));
    }

    #[test]
    fn cpdag_json_round_trips() {
        let mut r = rng(4);
        for _ in 0..10 {
            let g = sample_er_dag(5, 2, &mut r).unwrap();
            let cpdag = dag_to_cpdag(&g);
            let mut bytes = Vec::new();
            write_cpdag_json(&cpdag, &mut bytes).unwrap();
            let back = read_cpdag_json(bytes.as_slice()).unwrap();
            assert_eq!(back, cpdag);
        }
    }

    #[test]
    fn prediction_json_round_trips_exactly() {
        let mut r = rng(5);
        let d = 4;
        let probs = Array3::from_shape_fn((d, d, 3), |_| r.random::<f64>());
        // Normalize each cell so entries are genuine probabilities.
        let mut norm = probs.clone();
        for i in 0..d {
            for j in 0..d {
                let s: f64 = (0..3).map(|c| probs[[i, j, c]]).sum();
                for c in 0..3 {
                    norm[[i, j, c]] = probs[[i, j, c]] / s;
                }
            }
        }
        let mut bytes = Vec::new();
        write_prediction_json(&norm, &mut bytes).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.contains("\"class_order\""));
        assert!(text.contains("no_edge"));
        let back = read_prediction_json(bytes.as_slice()).unwrap();
        assert_eq!(back, norm);
    }

    #[test]
    fn prediction_json_rejects_bad_files() {
        let bad_shape = Array3::<f64>::zeros((2, 3, 3));
        assert!(write_prediction_json(&bad_shape, Vec::new()).is_err());

        let good = Array3::<f64>::zeros((2, 2, 3));
        let mut bytes = Vec::new();
        write_prediction_json(&good, &mut bytes).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        let wrong_order = text.replace("skeleton", "edge");
        assert!(read_prediction_json(wrong_order.as_bytes()).is_err());
        let out_of_range = text.replace(": 0.0", ": 1.5").replace("0.0", "1.5");
        assert!(read_prediction_json(out_of_range.as_bytes()).is_err());
    }

    #[test]
    fn trace_csv_round_trips_and_validates_the_total() {
        let trace: Vec<EpochStats> = (0..5)
            .map(|epoch| EpochStats {
                epoch,
                loss: LossBreakdown::from_parts(
                    0.3 / (epoch + 1) as f64,
                    1.1 / (epoch + 1) as f64,
                    0.01 * epoch as f64,
                ),
            })
            .collect();
        let mut bytes = Vec::new();
        write_trace_csv(&trace, &mut bytes).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with("epoch,binary,categorical,penalty,total\n"));
        let back = read_trace_csv(bytes.as_slice()).unwrap();
        assert_eq!(back.len(), trace.len());
        for (a, b) in back.iter().zip(&trace) {
            assert_eq!(a.epoch, b.epoch);
            assert_eq!(a.loss.total, b.loss.total);
            assert_eq!(a.loss.binary, b.loss.binary);
        }

        let corrupted = text
            .replacen("epoch,binary", "epoch,binary", 1)
            .replace(&trace[0].loss.total.to_string(), "99.0");
        assert!(matches!(
            read_trace_csv(corrupted.as_bytes()),
            Err(FormatError::Invalid(_))
        ));
    }

    #[test]
    fn immorality_csv_has_the_expected_columns() {
        let rows = vec![ImmoralityReportRow {
            parent_a: 0,
            parent_b: 2,
            candidate: 1,
            probability: 0.75,
            oriented: true,
        }];
        let mut bytes = Vec::new();
        write_immorality_csv(&rows, &mut bytes).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "parent_a,parent_b,candidate,probability,oriented"
        );
        assert_eq!(lines.next().unwrap(), "0,2,1,0.75,true");
    }

    #[test]
    fn run_config_defaults_match_the_reference_table() {
        let config: RunConfig = read_run_config("{}".as_bytes()).unwrap();
        assert_eq!(config.train.epochs, 1000);
        assert_eq!(config.train.samples_per_epoch, 128);
        assert_eq!(config.train.initial_lr, 5e-4);
        assert_eq!(config.train.model.channels, 100);
        assert_eq!(config.train.model.heads, 5);
        config.train.validate().unwrap();
        config.vstructure.validate().unwrap();
    }

    #[test]
    fn partial_run_config_overrides_only_named_fields() {
        let text =
            r#"{"train": {"epochs": 2, "model": {"channels": 8, "attn_channels": 8, "heads": 2}}}"#;
        let config: RunConfig = read_run_config(text.as_bytes()).unwrap();
        assert_eq!(config.train.epochs, 2);
        assert_eq!(config.train.model.channels, 8);
        assert_eq!(config.train.model.heads, 2);
        // Unmentioned fields keep their defaults.
        assert_eq!(config.train.samples_per_epoch, 128);
        assert_eq!(config.train.model.bilinear_layers, 10);
        assert_eq!(config.vstructure.epochs, 1000);

        let mut bytes = Vec::new();
        write_run_config(&config, &mut bytes).unwrap();
        let reread = read_run_config(bytes.as_slice()).unwrap();
        assert_eq!(reread.train.epochs, 2);
        assert_eq!(reread.train.model.channels, 8);
    }
}
