//! Accuracy bookkeeping, ACC/BWT, frozen-bit statistics and the on-disk
//! report format.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::RunConfig;
use crate::engine::{IgFormula, Strategy};
use crate::error::{Error, Result};
use crate::nn::Layer;

pub const SCHEMA_VERSION: u32 = 1;

/// `A[i][j]`: accuracy on task `j` after learning tasks `1..=i` (both
/// zero-based here). Row `i` holds `i + 1` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    num_tasks: usize,
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(num_tasks: usize) -> Self {
        AccuracyMatrix {
            num_tasks,
            rows: Vec::new(),
        }
    }

    /// Builds a matrix from complete lower-triangular rows.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = AccuracyMatrix::new(rows.len());
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn filled(&self) -> usize {
        self.rows.len()
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.num_tasks
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i).and_then(|r| r.get(j)).copied()
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let i = self.rows.len();
        if i >= self.num_tasks {
            return Err(Error::Shape(format!("matrix already has {} rows", self.num_tasks)));
        }
        if row.len() != i + 1 {
            return Err(Error::Shape(format!(
                "row {} needs {} entries, got {}",
                i + 1,
                i + 1,
                row.len()
            )));
        }
        if let Some(bad) = row.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::Shape(format!("accuracy {bad} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    fn last_row(&self) -> Result<&[f64]> {
        if self.num_tasks == 0 {
            return Err(Error::IncompleteMatrix("no tasks".into()));
        }
        if !self.is_complete() {
            return Err(Error::IncompleteMatrix(format!(
                "{} of {} rows filled",
                self.rows.len(),
                self.num_tasks
            )));
        }
        Ok(&self.rows[self.num_tasks - 1])
    }

    /// CSV with a header `task,1,..,T` and one row per learned task.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task");
        for j in 1..=self.num_tasks {
            write!(out, ",{j}").unwrap();
        }
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            write!(out, "{}", i + 1).unwrap();
            for j in 0..self.num_tasks {
                out.push(',');
                if let Some(a) = row.get(j) {
                    out.push_str(&fmt_real(*a));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Mean accuracy over all tasks after the last one.
pub fn compute_acc(matrix: &AccuracyMatrix) -> Result<f64> {
    let last = matrix.last_row()?;
    Ok(last.iter().sum::<f64>() / last.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bwt {
    pub value: f64,
    /// True for a single task, where backward transfer is undefined and
    /// reported as zero.
    pub degenerate: bool,
}

/// Mean change in accuracy on earlier tasks between learning them and the
/// end of the run.
pub fn compute_bwt(matrix: &AccuracyMatrix) -> Result<Bwt> {
    let last = matrix.last_row()?;
    let t = matrix.num_tasks;
    if t == 1 {
        return Ok(Bwt {
            value: 0.0,
            degenerate: true,
        });
    }
    let sum: f64 = (0..t).map(|i| last[i] - matrix.rows[i][i]).sum();
    Ok(Bwt {
        value: sum / (t - 1) as f64,
        degenerate: false,
    })
}

/// Per-layer counts of `after - before`, binned `0..=total_bits`.
pub fn frozen_bit_histogram(
    before: &[u8],
    after: &[u8],
    layers: &[Range<usize>],
    total_bits: u32,
) -> Result<Vec<Vec<u64>>> {
    if before.len() != after.len() {
        return Err(Error::Misaligned {
            expected: before.len(),
            got: after.len(),
        });
    }
    layers
        .iter()
        .map(|range| {
            if range.end > after.len() {
                return Err(Error::Shape(format!(
                    "layer range {range:?} beyond {} parameters",
                    after.len()
                )));
            }
            let mut counts = vec![0u64; total_bits as usize + 1];
            for (b, a) in before[range.clone()].iter().zip(&after[range.clone()]) {
                let gained = a
                    .checked_sub(*b)
                    .ok_or_else(|| Error::Shape("frozen bits decreased".into()))?;
                let bin = counts.get_mut(gained as usize).ok_or(Error::CapacityOverflow {
                    requested: gained as u32,
                    total: total_bits,
                })?;
                *bin += 1;
            }
            Ok(counts)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub scale: f64,
}

impl From<&Layer> for LayerSummary {
    fn from(layer: &Layer) -> Self {
        LayerSummary {
            name: layer.name(),
            offset: layer.offset,
            len: layer.len(),
            scale: layer.scale,
        }
    }
}

/// Information gain over the parameters tracked for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IgSummary {
    pub formula: IgFormula,
    pub tracked: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Counts of newly frozen bits `0..=N` over all parameters.
    pub histogram: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerHistogram {
    pub layer: String,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: usize,
    pub description: String,
    pub epochs: usize,
    pub final_lr: f64,
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ig: Option<IgSummary>,
    /// Per layer: how many parameters gained `k` frozen bits on this task.
    pub added_bits: Vec<LayerHistogram>,
    /// Per layer: how many parameters have `k` frozen bits after this task.
    pub frozen_bits: Vec<LayerHistogram>,
    pub total_frozen_bits: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub config: RunConfig,
    pub seed: u64,
    pub stream: String,
    pub strategy: Strategy,
    pub total_bits: u32,
    pub num_params: usize,
    pub layers: Vec<LayerSummary>,
    pub accuracy_matrix: AccuracyMatrix,
    pub acc: Option<f64>,
    pub bwt: Option<f64>,
    pub bwt_degenerate: bool,
    pub tasks: Vec<TaskRecord>,
    pub completed: bool,
    pub error: Option<String>,
    /// Frozen bits per parameter after each task; written as CSV tables.
    #[serde(skip)]
    pub frozen_snapshots: Vec<Vec<u8>>,
    /// Seconds spent on each task; kept out of the JSON so that reports of
    /// identical runs are byte-identical.
    #[serde(skip)]
    pub wall_clock_secs: Vec<f64>,
}

impl RunReport {
    /// Fills `acc`/`bwt` from the matrix when it is complete.
    pub fn finalize_metrics(&mut self) {
        self.acc = compute_acc(&self.accuracy_matrix).ok();
        match compute_bwt(&self.accuracy_matrix) {
            Ok(b) => {
                self.bwt = Some(b.value);
                self.bwt_degenerate = b.degenerate;
            }
            Err(_) => {
                self.bwt = None;
                self.bwt_degenerate = false;
            }
        }
    }

    pub fn to_json(&self) -> String {
        let value = serde_json::to_value(self).expect("report serializes");
        let mut out = String::new();
        write_canonical(&value, 0, &mut out);
        out.push('\n');
        out
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Reals with 17 significant digits, so every `f64` round-trips.
pub fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

/// Pretty JSON with sorted keys and fixed-precision reals.
fn write_canonical(value: &Value, indent: usize, out: &mut String) {
    let pad = |n: usize| "  ".repeat(n);
    match value {
        Value::Null | Value::Bool(_) | Value::String(_) => out.push_str(&value.to_string()),
        Value::Number(n) => match (n.as_u64(), n.as_i64()) {
            (Some(u), _) => write!(out, "{u}").unwrap(),
            (None, Some(i)) => write!(out, "{i}").unwrap(),
            _ => out.push_str(&fmt_real(n.as_f64().expect("finite number"))),
        },
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            // flat arrays of scalars stay on one line
            if items.iter().all(|v| !v.is_array() && !v.is_object()) {
                out.push('[');
                for (k, item) in items.iter().enumerate() {
                    if k > 0 {
                        out.push_str(", ");
                    }
                    write_canonical(item, indent, out);
                }
                out.push(']');
                return;
            }
            out.push_str("[\n");
            for (k, item) in items.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                write_canonical(item, indent + 1, out);
                out.push_str(if k + 1 < items.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push_str("{\n");
            for (k, key) in keys.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                out.push_str(&Value::String((*key).clone()).to_string());
                out.push_str(": ");
                write_canonical(&map[*key], indent + 1, out);
                out.push_str(if k + 1 < keys.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push('}');
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `report.json`, `accuracy_matrix.csv`, `frozen_bits_task<t>.csv`
/// for every snapshot, and `timings.csv` into `out_dir`.
pub fn serialize_report(report: &RunReport, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_file(&out_dir.join("report.json"), &report.to_json())?;
    write_file(&out_dir.join("accuracy_matrix.csv"), &report.accuracy_matrix.to_csv())?;
    for (t, frozen) in report.frozen_snapshots.iter().enumerate() {
        let mut table = String::from("layer,index,frozen_bits\n");
        for layer in &report.layers {
            for (i, s) in frozen[layer.offset..layer.offset + layer.len].iter().enumerate() {
                writeln!(table, "{},{i},{s}", layer.name).unwrap();
            }
        }
        write_file(&out_dir.join(format!("frozen_bits_task{}.csv", t + 1)), &table)?;
    }
    let mut timings = String::from("task,seconds\n");
    for (t, secs) in report.wall_clock_secs.iter().enumerate() {
        writeln!(timings, "{},{}", t + 1, fmt_real(*secs)).unwrap();
    }
    write_file(&out_dir.join("timings.csv"), &timings)
}

/// Reads `report.json` back from a report directory.
pub fn load_report(dir: &Path) -> Result<RunReport> {
    let path = dir.join("report.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    RunReport::from_json(&text).map_err(|source| Error::Json { path, source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::StreamConfig;
    use proptest::prelude::{prop_assert_eq, proptest};

    fn two_task() -> AccuracyMatrix {
        AccuracyMatrix::from_rows(vec![vec![1.0], vec![0.9, 0.8]]).unwrap()
    }

    #[test]
    fn acc_and_bwt_examples() {
        let m = two_task();
        assert!((compute_acc(&m).unwrap() - 0.85).abs() < 1e-15);
        let b = compute_bwt(&m).unwrap();
        assert!((b.value + 0.1).abs() < 1e-15);
        assert!(!b.degenerate);

        let single = AccuracyMatrix::from_rows(vec![vec![0.97]]).unwrap();
        assert_eq!(compute_acc(&single).unwrap(), 0.97);
        assert_eq!(
            compute_bwt(&single).unwrap(),
            Bwt {
                value: 0.0,
                degenerate: true
            }
        );

        let flat = AccuracyMatrix::from_rows(vec![vec![0.6], vec![0.6, 0.6], vec![0.6, 0.6, 0.6]]).unwrap();
        assert!((compute_acc(&flat).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(compute_bwt(&flat).unwrap().value, 0.0);
    }

    #[test]
    fn incomplete_matrix_rejected() {
        let mut m = AccuracyMatrix::new(3);
        m.push_row(vec![0.5]).unwrap();
        assert!(matches!(compute_acc(&m), Err(Error::IncompleteMatrix(_))));
        assert!(matches!(compute_bwt(&m), Err(Error::IncompleteMatrix(_))));
        assert!(m.push_row(vec![0.5]).is_err());
        assert!(m.push_row(vec![0.5, 1.5]).is_err());
    }

    #[test]
    fn histogram_examples() {
        let layers = vec![0..3, 3..5];
        let before = [0u8, 2, 2, 0, 0];
        let h = frozen_bit_histogram(&before, &before, &layers, 4).unwrap();
        assert_eq!(h, vec![vec![3, 0, 0, 0, 0], vec![2, 0, 0, 0, 0]]);
        let after = [0u8, 2, 5, 0, 0];
        let h = frozen_bit_histogram(&before, &after, &layers, 4).unwrap();
        assert_eq!(h[0], vec![2, 0, 0, 1, 0]);
        assert!(frozen_bit_histogram(&after, &before, &layers, 4).is_err());
    }

    #[test]
    fn csv_has_one_row_per_task() {
        let csv = two_task().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "task,1,2");
        assert!(lines[1].ends_with(','));
    }

    fn sample_report() -> RunReport {
        let config = RunConfig::new(StreamConfig::Gaussian {
            num_tasks: 2,
            classes: 3,
            dim: 4,
            samples_per_class: 10,
            separation: 2.5,
        });
        let mut r = RunReport {
            schema_version: SCHEMA_VERSION,
            config,
            seed: 7,
            stream: "gaussian".into(),
            strategy: Strategy::Blip,
            total_bits: 20,
            num_params: 5,
            layers: vec![LayerSummary {
                name: "hidden1".into(),
                offset: 0,
                len: 5,
                scale: 0.1,
            }],
            accuracy_matrix: two_task(),
            acc: None,
            bwt: None,
            bwt_degenerate: false,
            tasks: vec![],
            completed: true,
            error: None,
            frozen_snapshots: vec![vec![0, 1, 2, 3, 4], vec![1, 1, 2, 3, 4]],
            wall_clock_secs: vec![0.25, 0.5],
        };
        r.finalize_metrics();
        r
    }

    #[test]
    fn report_round_trip_is_byte_identical() {
        let report = sample_report();
        let dir = tempfile::tempdir().unwrap();
        serialize_report(&report, dir.path()).unwrap();
        let first = fs::read_to_string(dir.path().join("report.json")).unwrap();
        let loaded = load_report(dir.path()).unwrap();
        assert_eq!(loaded.acc, Some(compute_acc(&loaded.accuracy_matrix).unwrap()));
        assert_eq!(loaded.acc, report.acc);
        assert_eq!(loaded.to_json(), first);
        let csv = fs::read_to_string(dir.path().join("accuracy_matrix.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        let frozen = fs::read_to_string(dir.path().join("frozen_bits_task2.csv")).unwrap();
        assert_eq!(frozen.lines().nth(1), Some("hidden1,0,1"));
        assert!(dir.path().join("timings.csv").exists());
        assert!(!first.contains("wall_clock"));
    }

    #[test]
    fn keys_are_sorted() {
        let json = sample_report().to_json();
        let acc = json.find("\"acc\"").unwrap();
        let bwt = json.find("\"bwt\"").unwrap();
        let seed = json.find("\"seed\"").unwrap();
        assert!(acc < bwt && bwt < seed);
        assert!(json.contains("\"schema_version\": 1"));
    }

    proptest! {
        #[test]
        fn reals_round_trip(x in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            prop_assert_eq!(fmt_real(x).parse::<f64>().unwrap(), x);
        }

        #[test]
        fn histogram_mass_is_conserved(s in proptest::collection::vec(0u8..10, 1..200), split in 0usize..200) {
            let split = split.min(s.len());
            let after: Vec<u8> = s.iter().map(|v| v + 3).collect();
            let h = frozen_bit_histogram(&s, &after, &[0..split, split..s.len()], 20).unwrap();
            prop_assert_eq!(h[0].iter().sum::<u64>() as usize, split);
            prop_assert_eq!(h[1].iter().sum::<u64>() as usize, s.len() - split);
        }
    }
}
