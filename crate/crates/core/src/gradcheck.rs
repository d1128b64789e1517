//! Finite-difference verification of the analytic loss gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{invalid, Result};
use crate::loss::{dual_tie_margin, loss_grad, loss_value, softmax_raw, LossKind, LossSpec};

/// Central-difference gradient of `f` at `x`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Relative error between two gradients, measured in the max norm and
/// scaled by the larger gradient. Gradients whose norm is below `floor`
/// are compared on the absolute scale `floor`.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(floor, f64::max);
    diff / scale
}

#[derive(Debug, Clone)]
pub struct GradcheckConfig {
    pub loss: LossSpec,
    pub classes: usize,
    pub trials: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Points closer than this to a branch switch of the loss are skipped.
    pub tie_margin: f64,
    /// Logits are drawn uniformly from `[-scale, scale]`.
    pub logit_scale: f64,
    pub floor: f64,
}

impl GradcheckConfig {
    pub fn new(loss: LossSpec, classes: usize, trials: usize) -> Self {
        Self {
            loss,
            classes,
            trials,
            seed: 0,
            step: 1e-5,
            tolerance: 1e-5,
            tie_margin: 1e-4,
            logit_scale: 4.0,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckSummary {
    pub trials: usize,
    pub checked: usize,
    pub skipped: usize,
    pub failures: usize,
    pub worst_rel_err: f64,
}

impl GradcheckSummary {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Whether the loss is non-smooth within `margin` of `logits`.
pub fn near_branch_switch(loss: &LossSpec, logits: &[f64], gt: usize, margin: f64) -> bool {
    let probs = softmax_raw(logits);
    match loss.kind {
        LossKind::DualFocal | LossKind::DualFocalVariant => dual_tie_margin(&probs, gt) < margin,
        LossKind::FocalFlsd53 => (probs[gt] - 0.2).abs() < margin,
        _ => false,
    }
}

/// Compares `loss_grad` against central differences of `loss_value` on
/// random logits.
pub fn run_gradcheck(config: &GradcheckConfig) -> Result<GradcheckSummary> {
    config.loss.validate()?;
    if config.classes < 2 {
        return Err(invalid("gradcheck needs at least 2 classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut summary = GradcheckSummary {
        trials: config.trials,
        checked: 0,
        skipped: 0,
        failures: 0,
        worst_rel_err: 0.0,
    };
    for _ in 0..config.trials {
        let logits: Vec<f64> = (0..config.classes)
            .map(|_| rng.random_range(-config.logit_scale..=config.logit_scale))
            .collect();
        let gt = rng.random_range(0..config.classes);
        if near_branch_switch(&config.loss, &logits, gt, config.tie_margin) {
            summary.skipped += 1;
            continue;
        }
        let analytic = loss_grad(&config.loss, &logits, gt)?;
        let numeric = central_difference(
            |z| loss_value(&config.loss, z, gt).unwrap_or(f64::NAN),
            &logits,
            config.step,
        );
        let err = relative_error(&analytic.grad_logits, &numeric, config.floor);
        summary.checked += 1;
        if err.is_nan() || err > config.tolerance {
            summary.failures += 1;
        }
        summary.worst_rel_err = summary.worst_rel_err.max(if err.is_nan() { f64::INFINITY } else { err });
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_quadratic() {
        let g = central_difference(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, -1.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(&[1e-9], &[2e-9], 1e-6), 1e-9 / 1e-6);
        assert!((relative_error(&[1.0, 2.0], &[1.0, 2.1], 1e-6) - 0.1 / 2.1).abs() < 1e-15);
    }

    #[test]
    fn every_loss_passes_small_gradcheck() {
        for loss in [
            LossSpec::cross_entropy(),
            LossSpec::focal(2.0),
            LossSpec::flsd53(),
            LossSpec::dual_focal(3.0),
            LossSpec::brier(),
            LossSpec::label_smoothing(0.05),
        ] {
            let summary = run_gradcheck(&GradcheckConfig::new(loss, 4, 50)).unwrap();
            assert!(summary.passed(), "{loss:?}: {summary:?}");
        }
    }
}
