//! CSV and JSON run reports.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, BenchError, Result};
use crate::experiment::RunMetrics;

pub const CSV_FILE: &str = "metrics.csv";
pub const JSON_FILE: &str = "metrics.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct JsonReport {
    #[serde(flatten)]
    metrics: RunMetrics,
    /// Average final accuracy over the last ten tasks.
    last_ten_average: Option<f64>,
}

pub fn to_csv(metrics: &RunMetrics) -> String {
    let mut out = String::from("step,eval_task,accuracy,loss\n");
    for r in &metrics.records {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.eval_task, r.accuracy, r.loss));
    }
    out
}

pub fn to_json(metrics: &RunMetrics) -> String {
    let report = JsonReport {
        metrics: metrics.clone(),
        last_ten_average: metrics.last_ten_average(),
    };
    serde_json::to_string_pretty(&report).expect("metrics serialize") + "\n"
}

pub fn from_json(text: &str) -> Result<RunMetrics> {
    serde_json::from_str::<JsonReport>(text)
        .map(|r| r.metrics)
        .map_err(|e| BenchError::Format {
            path: PathBuf::from(JSON_FILE),
            msg: e.to_string(),
        })
}

/// Writes `metrics.csv` and `metrics.json` into `dir`, creating it if needed.
pub fn write_report(metrics: &RunMetrics, dir: &Path) -> Result<()> {
    if metrics.records.is_empty() {
        return Err(BenchError::Config("no records to report".into()));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (name, body) in [(CSV_FILE, to_csv(metrics)), (JSON_FILE, to_json(metrics))] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(io_err(path))?;
    }
    Ok(())
}

pub fn read_report(dir: &Path) -> Result<RunMetrics> {
    let path = dir.join(JSON_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    from_json(&text)
}

/// One-line human summary of a finished run.
pub fn summary_line(metrics: &RunMetrics) -> String {
    let c = &metrics.config;
    let task0 = metrics.trace(0);
    let last = task0.last().map_or(f64::NAN, |r| r.accuracy);
    let peak = task0.iter().map(|r| r.accuracy).fold(f64::NAN, f64::max);
    let mut line = format!(
        "{} {} units={} seed={}: task-0 accuracy final {:.4} peak {:.4}",
        c.task, c.mode, c.units, c.seed, last, peak
    );
    if let Some(avg) = metrics.last_ten_average() {
        line.push_str(&format!(", average accuracy over last 10 tasks {avg:.4}"));
    }
    line
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::{EvalRecord, ExperimentConfig, TaskKind};
    use psp_core::context::Family;

    fn fixture() -> RunMetrics {
        RunMetrics {
            config: ExperimentConfig::new(TaskKind::Rotating, Family::Complex),
            records: (0..5)
                .map(|i| EvalRecord {
                    step: 100 * i,
                    eval_task: 0,
                    accuracy: 0.1 + 0.123456789 * i as f64,
                    loss: 2.0 / (1.0 + i as f64),
                })
                .collect(),
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let m = fixture();
        assert_eq!(from_json(&to_json(&m)).unwrap(), m);
    }

    #[test]
    fn csv_has_header_plus_one_row_per_record() {
        let m = fixture();
        let csv = to_csv(&m);
        assert_eq!(csv.lines().count(), m.records.len() + 1);
        assert_eq!(csv.lines().next(), Some("step,eval_task,accuracy,loss"));
    }

    #[test]
    fn files_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let m = fixture();
        write_report(&m, dir.path()).unwrap();
        assert_eq!(read_report(dir.path()).unwrap(), m);
        let empty = RunMetrics { records: vec![], ..m };
        assert!(write_report(&empty, dir.path()).is_err());
    }
}
