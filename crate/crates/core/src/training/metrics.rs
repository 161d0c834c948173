//! Per-epoch training metrics as a JSONL stream.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainReport;

/// One metrics record: a loss for one split at one epoch. `wall_seconds`
/// measures the epoch and is the only run-dependent field.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetric {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub wall_seconds: f64,
}

/// Writes a report as metrics.jsonl: a train record per epoch plus a valid
/// record whenever a validation loss was computed.
pub fn write_metrics_jsonl(path: &Path, report: &TrainReport) -> std::io::Result<()> {
    let mut writer = BufWriter::new(File::create(path)?);
    for record in &report.epochs {
        let train = EpochMetric {
            epoch: record.epoch,
            split: "train".into(),
            loss: record.train_loss,
            wall_seconds: record.wall_seconds,
        };
        writeln!(writer, "{}", serde_json::to_string(&train)?)?;
        if let Some(valid_loss) = record.valid_loss {
            let valid = EpochMetric {
                epoch: record.epoch,
                split: "valid".into(),
                loss: valid_loss,
                wall_seconds: record.wall_seconds,
            };
            writeln!(writer, "{}", serde_json::to_string(&valid)?)?;
        }
    }
    writer.flush()
}
