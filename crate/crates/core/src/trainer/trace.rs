//! Per-step activation records and their per-modality summary.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{forward, ForwardOptions, PreparedSample};
use crate::model::Model;
use crate::numerics::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub sample: usize,
    pub step: usize,
    pub modality: String,
    pub unit: usize,
    /// 1 when the unit was in the active set.
    pub active: u8,
    pub input_weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub modality: String,
    pub unit: usize,
    /// Fraction of steps fed this modality in which the unit was active.
    pub frequency: f64,
}

/// Runs inference on every sample, appending `zero_tail` zero-input steps.
pub fn trace_run(model: &Model, samples: &[PreparedSample], zero_tail: usize) -> Result<Vec<TraceRow>> {
    let cfg = model.effective();
    let opts = ForwardOptions { zero_tail, ..Default::default() };
    let mut rows = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let mut tape = Tape::new();
        let out = forward(&mut tape, &model.store, &model.params, &cfg, s, &opts)?;
        for rec in &out.trace {
            for (unit, &w) in rec.input_weight.iter().enumerate() {
                rows.push(TraceRow {
                    sample: i,
                    step: rec.step,
                    modality: rec.modality_label().to_string(),
                    unit,
                    active: u8::from(rec.active.contains(&unit)),
                    input_weight: w,
                });
            }
        }
    }
    Ok(rows)
}

const MODALITY_ORDER: [&str; 4] = ["visual", "semantic", "fact", "null"];

/// Activation frequency per (modality, unit), modalities in schedule order.
pub fn aggregate_trace(rows: &[TraceRow]) -> Vec<AggregateRow> {
    let n_units = rows.iter().map(|r| r.unit + 1).max().unwrap_or(0);
    let mut out = Vec::new();
    for modality in MODALITY_ORDER {
        let mut steps = 0usize;
        let mut counts = vec![0usize; n_units];
        for r in rows.iter().filter(|r| r.modality == modality) {
            if r.unit == 0 {
                steps += 1;
            }
            counts[r.unit] += usize::from(r.active);
        }
        if steps == 0 {
            continue;
        }
        for (unit, c) in counts.into_iter().enumerate() {
            out.push(AggregateRow { modality: modality.to_string(), unit, frequency: c as f64 / steps as f64 });
        }
    }
    out
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let to_err = |e: csv::Error| Error::Dataset(format!("{}: {e}", path.display()));
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(to_err)?;
    w.write_record(header).map_err(to_err)?;
    for r in rows {
        w.serialize(r).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    write_csv(path, rows, &["sample", "step", "modality", "unit", "active", "input_weight"])
}

pub fn write_aggregate_csv(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    write_csv(path, rows, &["modality", "unit", "frequency"])
}
