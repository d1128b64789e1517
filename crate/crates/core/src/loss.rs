//! Probability transforms and the loss zoo with analytic logit gradients.
//!
//! Every loss is evaluated from raw logits. The log terms use log-softmax
//! rather than `ln(softmax)`, so losses stay finite for arbitrarily large
//! logit gaps. The dual focal loss modulates cross-entropy by
//! `(1 - q_gt + q_j)^gamma`, where `q_j` is the largest probability strictly
//! below the ground-truth probability (or an ablation variant of it).

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Lower clamp applied to probabilities inside logarithms that are taken
/// directly on probability vectors (entropy, KL).
pub const LOG_CLAMP: f64 = 1e-12;

/// Smoothing factor used for label smoothing unless configured otherwise.
pub const DEFAULT_SMOOTHING: f64 = 0.05;

/// A probability vector: non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Wraps `values` after checking they form a distribution (sum within 1e-9 of 1).
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(invalid("probability vector needs at least 2 entries"));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(invalid("probabilities must lie in [0, 1]"));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("probabilities sum to {sum}, expected 1")));
        }
        Ok(Self(values))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest entry; ties go to the smallest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl Deref for ProbVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Index of the maximum value, smallest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.len() < 2 {
        return Err(invalid(format!(
            "logit vector needs at least 2 classes, got {}",
            logits.len()
        )));
    }
    if let Some(v) = logits.iter().find(|v| !v.is_finite()) {
        return Err(invalid(format!("non-finite logit {v}")));
    }
    Ok(())
}

fn check_class(gt: usize, k: usize) -> Result<()> {
    if gt >= k {
        return Err(invalid(format!("class index {gt} out of range for {k} classes")));
    }
    Ok(())
}

pub(crate) fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    max + sum.ln()
}

/// Softmax without validation. Shifted by the max logit.
pub(crate) fn softmax_raw(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    check_logits(logits)?;
    Ok(ProbVector(softmax_raw(logits)))
}

/// Log-softmax, `z_i - logsumexp(z)`.
pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    check_logits(logits)?;
    let lse = log_sum_exp(logits);
    Ok(logits.iter().map(|z| z - lse).collect())
}

/// How the dual logit `q_j` is chosen among probabilities below `q_gt`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", content = "n")]
pub enum DualVariant {
    /// The largest probability strictly below `q_gt`.
    #[default]
    LargestBelowGt,
    /// The k-th largest (1-based) strictly below `q_gt`.
    KthLargestBelowGt(usize),
    /// Mean of the m largest strictly below `q_gt`.
    MeanTopMBelowGt(usize),
    /// Mean of every probability strictly below `q_gt`.
    MeanAllBelowGt,
}

impl DualVariant {
    fn validate(self) -> Result<()> {
        match self {
            DualVariant::KthLargestBelowGt(0) | DualVariant::MeanTopMBelowGt(0) => {
                Err(invalid("dual variant rank must be at least 1"))
            }
            _ => Ok(()),
        }
    }
}

/// The selected dual logit and the probability indices it was formed from.
#[derive(Debug, Clone, PartialEq)]
pub struct DualLogit {
    pub value: f64,
    pub indices: Vec<usize>,
    /// No probability was strictly below `q_gt`; the max over `i != gt` was used.
    pub fallback: bool,
    /// The selection sits exactly on a tie, so the smallest-index branch was taken.
    pub tie: bool,
}

/// Selects `q_j` for ground-truth class `gt`.
///
/// When no probability lies strictly below `q_gt`, falls back to the maximum
/// over `i != gt`. Equal probabilities are ordered by index, so tied
/// selections always resolve to the smallest index.
pub fn select_dual_logit(probs: &[f64], gt: usize, variant: DualVariant) -> Result<DualLogit> {
    if probs.len() < 2 {
        return Err(invalid("need at least 2 probabilities"));
    }
    check_class(gt, probs.len())?;
    variant.validate()?;
    Ok(select_dual_unchecked(probs, gt, variant))
}

fn select_dual_unchecked(probs: &[f64], gt: usize, variant: DualVariant) -> DualLogit {
    let q_gt = probs[gt];
    let touches_gt = probs
        .iter()
        .enumerate()
        .any(|(i, &q)| i != gt && q == q_gt);

    // Descending by probability, ascending by index.
    let mut candidates: Vec<(usize, f64)> = probs
        .iter()
        .copied()
        .enumerate()
        .filter(|&(i, q)| i != gt && q < q_gt)
        .collect();
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    if candidates.is_empty() {
        let mut others: Vec<(usize, f64)> = probs
            .iter()
            .copied()
            .enumerate()
            .filter(|&(i, _)| i != gt)
            .collect();
        others.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let tie = others.len() > 1 && others[1].1 == others[0].1;
        return DualLogit {
            value: others[0].1,
            indices: vec![others[0].0],
            fallback: true,
            tie: tie || touches_gt,
        };
    }

    let boundary_tie = |last: usize| {
        candidates
            .get(last + 1)
            .is_some_and(|next| next.1 == candidates[last].1)
            || (last > 0 && candidates[last - 1].1 == candidates[last].1)
    };

    let (value, indices, tie) = match variant {
        DualVariant::LargestBelowGt => (candidates[0].1, vec![candidates[0].0], boundary_tie(0)),
        DualVariant::KthLargestBelowGt(k) => {
            let pos = k.min(candidates.len()) - 1;
            (candidates[pos].1, vec![candidates[pos].0], boundary_tie(pos))
        }
        DualVariant::MeanTopMBelowGt(m) => {
            let take = m.min(candidates.len());
            let used = &candidates[..take];
            let mean = used.iter().map(|c| c.1).sum::<f64>() / take as f64;
            let tie = candidates
                .get(take)
                .is_some_and(|next| next.1 == candidates[take - 1].1);
            (mean, used.iter().map(|c| c.0).collect(), tie)
        }
        DualVariant::MeanAllBelowGt => {
            let mean = candidates.iter().map(|c| c.1).sum::<f64>() / candidates.len() as f64;
            (mean, candidates.iter().map(|c| c.0).collect(), false)
        }
    };

    DualLogit {
        value,
        indices,
        fallback: false,
        tie: tie || touches_gt,
    }
}

/// Smallest distance between `q_gt` and any other probability, or between
/// two non-ground-truth probabilities. Below this distance the dual-logit
/// selection can switch branch.
pub fn dual_tie_margin(probs: &[f64], gt: usize) -> f64 {
    let mut margin = f64::INFINITY;
    for i in 0..probs.len() {
        if i == gt {
            continue;
        }
        margin = margin.min((probs[i] - probs[gt]).abs());
        for k in (i + 1)..probs.len() {
            if k != gt {
                margin = margin.min((probs[i] - probs[k]).abs());
            }
        }
    }
    margin
}

/// Sample-wise focusing parameter of FLSD-53.
pub fn flsd53_gamma(p_gt: f64) -> f64 {
    if p_gt < 0.2 {
        5.0
    } else {
        3.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Focal,
    FocalFlsd53,
    DualFocal,
    DualFocalVariant,
    Brier,
    LabelSmoothing,
}

/// A loss choice plus hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub gamma: f64,
    pub smoothing: f64,
    pub dual_variant: DualVariant,
}

impl LossSpec {
    fn with_kind(kind: LossKind) -> Self {
        Self {
            kind,
            gamma: 0.0,
            smoothing: DEFAULT_SMOOTHING,
            dual_variant: DualVariant::LargestBelowGt,
        }
    }

    pub fn cross_entropy() -> Self {
        Self::with_kind(LossKind::CrossEntropy)
    }

    pub fn focal(gamma: f64) -> Self {
        Self {
            gamma,
            ..Self::with_kind(LossKind::Focal)
        }
    }

    pub fn flsd53() -> Self {
        Self::with_kind(LossKind::FocalFlsd53)
    }

    pub fn dual_focal(gamma: f64) -> Self {
        Self {
            gamma,
            ..Self::with_kind(LossKind::DualFocal)
        }
    }

    pub fn dual_focal_variant(gamma: f64, variant: DualVariant) -> Self {
        Self {
            gamma,
            dual_variant: variant,
            ..Self::with_kind(LossKind::DualFocalVariant)
        }
    }

    pub fn brier() -> Self {
        Self::with_kind(LossKind::Brier)
    }

    pub fn label_smoothing(alpha: f64) -> Self {
        Self {
            smoothing: alpha,
            ..Self::with_kind(LossKind::LabelSmoothing)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(invalid(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(invalid(format!(
                "smoothing must lie in [0, 1), got {}",
                self.smoothing
            )));
        }
        self.dual_variant.validate()
    }

    fn variant(&self) -> DualVariant {
        match self.kind {
            LossKind::DualFocalVariant => self.dual_variant,
            _ => DualVariant::LargestBelowGt,
        }
    }
}

/// Loss value and its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct GradResult {
    pub loss: f64,
    pub grad_logits: Vec<f64>,
    /// Evaluated exactly on a dual-logit tie; the smallest-index branch was differentiated.
    pub tie_branch: bool,
}

/// `1 - p_gt` accumulated from the other entries, exact near `p_gt = 1`.
fn complement(probs: &[f64], gt: usize) -> f64 {
    probs
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != gt)
        .map(|(_, p)| p)
        .sum()
}

/// Loss of `logits` against ground-truth class `gt`.
pub fn loss_value(spec: &LossSpec, logits: &[f64], gt: usize) -> Result<f64> {
    check_logits(logits)?;
    check_class(gt, logits.len())?;
    spec.validate()?;
    let lse = log_sum_exp(logits);
    let nll = lse - logits[gt];
    let probs = softmax_raw(logits);

    let loss = match spec.kind {
        LossKind::CrossEntropy => nll,
        LossKind::Focal => complement(&probs, gt).powf(spec.gamma) * nll,
        LossKind::FocalFlsd53 => {
            complement(&probs, gt).powf(flsd53_gamma(probs[gt])) * nll
        }
        LossKind::DualFocal | LossKind::DualFocalVariant => {
            let dual = select_dual_unchecked(&probs, gt, spec.variant());
            (complement(&probs, gt) + dual.value).powf(spec.gamma) * nll
        }
        LossKind::Brier => probs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let d = if i == gt { p - 1.0 } else { *p };
                d * d
            })
            .sum(),
        LossKind::LabelSmoothing => {
            let k = logits.len() as f64;
            logits
                .iter()
                .enumerate()
                .map(|(i, z)| {
                    let target = spec.smoothing / k + if i == gt { 1.0 - spec.smoothing } else { 0.0 };
                    target * (lse - z)
                })
                .sum()
        }
    };
    Ok(loss)
}

/// Pulls a gradient taken with respect to probabilities back through the
/// softmax: `dz_k = p_k (dp_k - sum_i p_i dp_i)`.
fn pull_back(probs: &[f64], dprobs: &[f64]) -> Vec<f64> {
    let inner: f64 = probs.iter().zip(dprobs).map(|(p, d)| p * d).sum();
    probs
        .iter()
        .zip(dprobs)
        .map(|(p, d)| p * (d - inner))
        .collect()
}

/// Gradient of a modulated cross-entropy `M(p) * nll` where `dmod` is `dM/dp`.
fn modulated_grad(probs: &[f64], gt: usize, nll: f64, modulator: f64, dmod: &[f64]) -> Vec<f64> {
    let dmod_z = pull_back(probs, dmod);
    probs
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let ce = if k == gt { p - 1.0 } else { *p };
            nll * dmod_z[k] + modulator * ce
        })
        .collect()
}

/// `gamma * base^(gamma - 1)`, taken as zero where the loss itself vanishes.
fn power_slope(base: f64, gamma: f64) -> f64 {
    if gamma == 0.0 || base <= 0.0 {
        0.0
    } else {
        gamma * base.powf(gamma - 1.0)
    }
}

/// Loss value and analytic gradient with respect to the logits.
///
/// For the dual focal losses the dual-logit index set is held fixed (gradient
/// flows through `q_j` but not through its selection). For FLSD-53 the gamma
/// picked at the evaluation point is treated as a constant.
pub fn loss_grad(spec: &LossSpec, logits: &[f64], gt: usize) -> Result<GradResult> {
    check_logits(logits)?;
    check_class(gt, logits.len())?;
    spec.validate()?;
    let k = logits.len();
    let lse = log_sum_exp(logits);
    let nll = lse - logits[gt];
    let probs = softmax_raw(logits);
    let mut tie_branch = false;

    let (loss, grad) = match spec.kind {
        LossKind::CrossEntropy => {
            let mut g = probs.clone();
            g[gt] -= 1.0;
            (nll, g)
        }
        LossKind::Focal | LossKind::FocalFlsd53 => {
            let gamma = if spec.kind == LossKind::Focal {
                spec.gamma
            } else {
                flsd53_gamma(probs[gt])
            };
            let base = complement(&probs, gt);
            let modulator = base.powf(gamma);
            let mut dmod = vec![0.0; k];
            dmod[gt] = -power_slope(base, gamma);
            (
                modulator * nll,
                modulated_grad(&probs, gt, nll, modulator, &dmod),
            )
        }
        LossKind::DualFocal | LossKind::DualFocalVariant => {
            let dual = select_dual_unchecked(&probs, gt, spec.variant());
            tie_branch = dual.tie;
            let base = complement(&probs, gt) + dual.value;
            let modulator = base.powf(spec.gamma);
            let slope = power_slope(base, spec.gamma);
            let mut dmod = vec![0.0; k];
            dmod[gt] = -slope;
            let share = slope / dual.indices.len() as f64;
            for &i in &dual.indices {
                dmod[i] += share;
            }
            (
                modulator * nll,
                modulated_grad(&probs, gt, nll, modulator, &dmod),
            )
        }
        LossKind::Brier => {
            let diff: Vec<f64> = probs
                .iter()
                .enumerate()
                .map(|(i, p)| if i == gt { p - 1.0 } else { *p })
                .collect();
            let loss = diff.iter().map(|d| d * d).sum();
            let dprobs: Vec<f64> = diff.iter().map(|d| 2.0 * d).collect();
            (loss, pull_back(&probs, &dprobs))
        }
        LossKind::LabelSmoothing => {
            let kf = k as f64;
            let mut loss = 0.0;
            let mut g = Vec::with_capacity(k);
            for (i, (z, p)) in logits.iter().zip(&probs).enumerate() {
                let target =
                    spec.smoothing / kf + if i == gt { 1.0 - spec.smoothing } else { 0.0 };
                loss += target * (lse - z);
                g.push(p - target);
            }
            (loss, g)
        }
    };

    Ok(GradResult {
        loss,
        grad_logits: grad,
        tie_branch,
    })
}

/// Shannon entropy of `probs` and the KL divergence from the one-hot target `gt`.
pub fn entropy_and_kl(probs: &[f64], gt: usize) -> Result<(f64, f64)> {
    if probs.len() < 2 {
        return Err(invalid("need at least 2 probabilities"));
    }
    check_class(gt, probs.len())?;
    let entropy = -probs
        .iter()
        .map(|&q| if q > 0.0 { q * q.max(LOG_CLAMP).ln() } else { 0.0 })
        .sum::<f64>();
    let kl = -probs[gt].clamp(LOG_CLAMP, 1.0).ln();
    Ok((entropy.max(0.0), kl))
}
