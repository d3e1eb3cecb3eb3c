//! Training metrics as CSV with a fixed column order, mirrored as JSON lines.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Column order of the metrics CSV.
pub const METRICS_COLUMNS: [&str; 9] = [
    "step",
    "task_loss",
    "lagrangian",
    "lambda",
    "expected_retention",
    "budget_violation",
    "eval_accuracy",
    "retention_recall",
    "wall_seconds",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub task_loss: f64,
    pub lagrangian: f64,
    pub lambda: f64,
    pub expected_retention: f64,
    pub budget_violation: f64,
    pub eval_accuracy: f64,
    pub retention_recall: f64,
    pub wall_seconds: f64,
}

pub struct MetricsWriter {
    csv: csv::Writer<BufWriter<File>>,
    jsonl: BufWriter<File>,
    last_step: Option<u64>,
}

impl MetricsWriter {
    /// Creates `<dir>/metrics.csv` and `<dir>/metrics.jsonl`.
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let csv = csv::Writer::from_writer(BufWriter::new(File::create(dir.join("metrics.csv"))?));
        let jsonl = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
        Ok(Self {
            csv,
            jsonl,
            last_step: None,
        })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        if self.last_step.is_some_and(|s| record.step <= s) {
            return Err(crate::error::Error::contract(format!(
                "metrics step {} does not follow {}",
                record.step,
                self.last_step.unwrap_or_default()
            )));
        }
        self.last_step = Some(record.step);
        self.csv.serialize(record)?;
        serde_json::to_writer(&mut self.jsonl, record)?;
        self.jsonl.write_all(b"\n")?;
        Ok(())
    }

    /// Appends an arbitrary JSON object to the JSON-lines stream.
    pub fn write_event<T: Serialize>(&mut self, event: &T) -> Result<()> {
        serde_json::to_writer(&mut self.jsonl, event)?;
        self.jsonl.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.csv.flush()?;
        self.jsonl.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(step: u64) -> MetricsRecord {
        MetricsRecord {
            step,
            task_loss: 1.5,
            lagrangian: 1.25,
            lambda: 0.1,
            expected_retention: 20.0,
            budget_violation: 0.8,
            eval_accuracy: 0.5,
            retention_recall: 0.75,
            wall_seconds: 0.0,
        }
    }

    #[test]
    fn header_order_is_fixed() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = MetricsWriter::create(dir.path()).unwrap();
        w.write(&record(50)).unwrap();
        assert!(w.write(&record(50)).is_err());
        w.finish().unwrap();
        let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(text.lines().next().unwrap(), METRICS_COLUMNS.join(","));
        let json = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        let back: MetricsRecord = serde_json::from_str(json.lines().next().unwrap()).unwrap();
        assert_eq!(back, record(50));
    }
}
