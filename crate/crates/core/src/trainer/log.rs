use std::path::Path;

use serde::Serialize;

use crate::collection::ClassRef;
use crate::{Error, Result};

/// One optimizer step. `per_class` holds `(bce, dice)` per global class for
/// the sigmoid objective and is empty for the softmax baseline.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub epoch: usize,
    pub iter: usize,
    pub loss_total: f64,
    pub loss_bce: f64,
    pub loss_dice: f64,
    pub lr_backbone: f64,
    pub lr_heads: f64,
    pub gnorm_pre: f64,
    pub gnorm_post: f64,
    pub seconds: f64,
    #[serde(skip)]
    pub per_class: Vec<(f64, f64)>,
}

/// Append-only training log.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn push(&mut self, row: LogRow) {
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[LogRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Mean total loss per epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for r in &self.rows {
            if out.len() <= r.epoch {
                out.resize(r.epoch + 1, (0.0, 0));
            }
            out[r.epoch].0 += r.loss_total;
            out[r.epoch].1 += 1;
        }
        out.into_iter()
            .map(|(s, n)| if n > 0 { s / n as f64 } else { f64::NAN })
            .collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Long format: one row per (step, class).
    pub fn write_class_csv(&self, path: impl AsRef<Path>, classes: &[ClassRef]) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(["epoch", "iter", "dataset_id", "local_index", "class", "bce", "dice"])?;
        for r in &self.rows {
            for (c, (bce, dice)) in classes.iter().zip(&r.per_class) {
                w.write_record([
                    r.epoch.to_string(),
                    r.iter.to_string(),
                    c.dataset_id.to_string(),
                    c.local_index.to_string(),
                    c.name.clone(),
                    bce.to_string(),
                    dice.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}
