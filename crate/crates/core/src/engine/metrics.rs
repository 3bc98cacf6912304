use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EngineError;

/// One epoch of one stage. Epoch 0 rows hold the model before training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub stage: String,
    pub epoch: usize,
    pub iterations: usize,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_error: Option<f64>,
    pub perplexity: Option<f64>,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub rows: Vec<MetricsRow>,
}

impl RunMetrics {
    pub fn push(&mut self, row: MetricsRow) {
        log::info!(
            "{} epoch {}: train_loss={:?} val_loss={:?} val_error={:?} ppl={:?}",
            row.stage,
            row.epoch,
            row.train_loss,
            row.val_loss,
            row.val_error,
            row.perplexity
        );
        self.rows.push(row);
    }

    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }

    pub fn extend(&mut self, other: RunMetrics) {
        self.rows.extend(other.rows);
    }

    /// Equal in everything except wall-clock time.
    pub fn same_results(&self, other: &RunMetrics) -> bool {
        self.rows.len() == other.rows.len()
            && self.rows.iter().zip(&other.rows).all(|(a, b)| {
                MetricsRow {
                    wall_secs: 0.0,
                    ..a.clone()
                } == MetricsRow {
                    wall_secs: 0.0,
                    ..b.clone()
                }
            })
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).expect("in-memory CSV write");
        }
        String::from_utf8(w.into_inner().expect("in-memory CSV flush")).expect("CSV is UTF-8")
    }

    pub fn from_csv(text: &str) -> Result<Self, EngineError> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r
            .deserialize()
            .collect::<Result<Vec<MetricsRow>, _>>()
            .map_err(|e| EngineError::Data(format!("bad metrics CSV: {e}")))?;
        Ok(Self { rows })
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), EngineError> {
        std::fs::write(path, self.to_csv()).map_err(|e| EngineError::io(path, e))
    }
}
