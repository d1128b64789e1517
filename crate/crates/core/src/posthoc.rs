//! Temperature scaling fitted by grid search on validation ECE.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::LabeledBatch;
use crate::error::{invalid, Result};
use crate::metrics::ece;

/// Divides every logit by `temperature`.
pub fn apply_temperature(batch: &LabeledBatch, temperature: f64) -> Result<LabeledBatch> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(invalid(format!("temperature must be positive, got {temperature}")));
    }
    batch.map_logits(|z| z / temperature)
}

/// `0.1, 0.2, ..., 10.0`. Zero is left out: it is not a valid temperature.
pub fn default_grid() -> Vec<f64> {
    (1..=100).map(|k| k as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub temperature: f64,
    pub grid: Vec<f64>,
    /// `(T, ECE after scaling by T)` for every grid point, in grid order.
    pub curve: Vec<(f64, f64)>,
}

/// Picks the grid temperature with the lowest post-scaling ECE on `val`.
/// Equal ECEs are resolved toward `T = 1`, then toward the smaller `T`.
pub fn fit_temperature(val: &LabeledBatch, grid: &[f64], bins: usize) -> Result<TemperatureFit> {
    if grid.is_empty() {
        return Err(invalid("temperature grid is empty"));
    }
    let curve = grid
        .par_iter()
        .map(|&t| Ok((t, ece(&apply_temperature(val, t)?, bins)?)))
        .collect::<Result<Vec<(f64, f64)>>>()?;

    let best = curve
        .iter()
        .copied()
        .reduce(|best, cand| {
            let key = |(t, e): (f64, f64)| (e, (t - 1.0).abs(), t);
            if key(cand).partial_cmp(&key(best)) == Some(std::cmp::Ordering::Less) {
                cand
            } else {
                best
            }
        })
        .expect("grid is nonempty");

    Ok(TemperatureFit {
        temperature: best.0,
        grid: grid.to_vec(),
        curve,
    })
}
