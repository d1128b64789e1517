//! Distribution summaries of trained-model outputs.

use serde::{Deserialize, Serialize};

use crate::batch::LabeledBatch;
use crate::error::{invalid, Result};
use crate::loss::{select_dual_logit, softmax_raw, DualVariant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `edges.len() == counts.len() + 1`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width histogram over `[min, max]`. A sample with no spread
    /// yields a single bar.
    pub fn new(values: &[f64], bins: usize) -> Result<Self> {
        if values.is_empty() || bins == 0 {
            return Err(invalid("histogram needs values and at least one bin"));
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(invalid("histogram values must be finite"));
        }
        if lo == hi {
            return Ok(Self {
                edges: vec![lo, hi],
                counts: vec![values.len()],
            });
        }
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins)
            .map(|i| if i == bins { hi } else { lo + width * i as f64 })
            .collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let i = (((v - lo) / width) as usize).min(bins - 1);
            counts[i] += 1;
        }
        Ok(Self { edges, counts })
    }
}

/// Quantile by linear interpolation between closest ranks on sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let below = pos.floor() as usize;
    let above = pos.ceil() as usize;
    sorted[below] + (pos - below as f64) * (sorted[above] - sorted[below])
}

/// Box-plot summary; whiskers are the extreme values within 1.5 IQR of the
/// quartiles, and anything further out is counted as an outlier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiveNumberSummary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub outliers: usize,
}

impl FiveNumberSummary {
    pub fn new(values: &[f64]) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("summary needs finite values"));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let q1 = quantile(&sorted, 0.25);
        let q3 = quantile(&sorted, 0.75);
        let iqr = q3 - q1;
        let (fence_lo, fence_hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        let inside: Vec<f64> = sorted
            .iter()
            .copied()
            .filter(|v| (fence_lo..=fence_hi).contains(v))
            .collect();
        Ok(Self {
            min: inside[0],
            q1,
            median: quantile(&sorted, 0.5),
            q3,
            max: inside[inside.len() - 1],
            outliers: sorted.len() - inside.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitStatistics {
    pub max_logits: Histogram,
    /// Spread `max - min` of the per-sample maximum logits.
    pub max_logit_range: f64,
    pub dual_probability: FiveNumberSummary,
}

/// Histogram of per-sample maximum logits and a box-plot summary of the
/// dual probability `q_j` (taken with respect to the labelled class).
pub fn logit_statistics(batch: &LabeledBatch, bins: usize) -> Result<LogitStatistics> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let max_logits: Vec<f64> = batch
        .rows()
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let mut duals = Vec::with_capacity(batch.len());
    for (row, &label) in batch.rows().zip(batch.labels()) {
        duals.push(select_dual_logit(&softmax_raw(row), label, DualVariant::default())?.value);
    }
    let hist = Histogram::new(&max_logits, bins)?;
    Ok(LogitStatistics {
        max_logit_range: hist.edges[hist.edges.len() - 1] - hist.edges[0],
        max_logits: hist,
        dual_probability: FiveNumberSummary::new(&duals)?,
    })
}
