//! Numerical analysis of the dual focal loss risk minimizer.
//!
//! With the dual logit fixed at `C`, the stationarity condition of the
//! instance-wise risk gives `eta_i ∝ q_i / phi(q_i)`, where off the dual
//! index
//!
//! ```text
//! phi(v) = (1 - v + C)^g - g (1 - v + C)^(g - 1) v ln v
//! ```
//!
//! `phi` rises from `(1 + C)^g` at `v = 0` to a single interior maximum at
//! `v_m` and falls to `C^g` at `v = 1`. The upper solutions of
//! `phi = (1 + C)^g` and `phi = 1` (`v_prime` and `v_uc`) delimit where the
//! minimizer can be under-confident for focal loss and for dual focal loss.
//! On the dual index itself two conventions exist: `phi = 1`, and
//! `phi = 1 - g v ln v`; both are available through [`PhiVariant`].

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::loss::{select_dual_logit, DualVariant, ProbVector};

/// Absolute tolerance on the abscissa for every root search.
pub const ROOT_TOLERANCE: f64 = 1e-10;
/// Iteration cap for bisection.
pub const MAX_BISECTIONS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhiVariant {
    /// Coordinates other than the dual index.
    OffDiagonal,
    /// The dual index with `phi = 1`.
    DiagonalUnit,
    /// The dual index with `phi = 1 - g v ln v`.
    DiagonalEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhiContext {
    pub gamma: f64,
    /// Value of the dual logit; zero recovers focal loss.
    pub c: f64,
    pub variant: PhiVariant,
}

impl PhiContext {
    pub fn new(gamma: f64, c: f64, variant: PhiVariant) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(invalid(format!("gamma must be > 0, got {gamma}")));
        }
        if !(0.0..1.0).contains(&c) {
            return Err(invalid(format!("C must lie in [0, 1), got {c}")));
        }
        Ok(Self { gamma, c, variant })
    }

    pub fn off_diagonal(gamma: f64, c: f64) -> Result<Self> {
        Self::new(gamma, c, PhiVariant::OffDiagonal)
    }

    fn with_c(self, c: f64) -> Self {
        Self { c, ..self }
    }

    fn require_off_diagonal(&self) -> Result<()> {
        if self.variant != PhiVariant::OffDiagonal {
            return Err(invalid("root analysis is defined for the off-diagonal phi only"));
        }
        Ok(())
    }
}

fn v_log_v(v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        v * v.ln()
    }
}

fn check_unit(v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(invalid(format!("v must lie in [0, 1], got {v}")));
    }
    Ok(())
}

/// `phi(v)` under `ctx`. `v = 0` returns the analytic limit.
pub fn phi(v: f64, ctx: &PhiContext) -> Result<f64> {
    check_unit(v)?;
    Ok(phi_unchecked(v, ctx))
}

fn phi_unchecked(v: f64, ctx: &PhiContext) -> f64 {
    let g = ctx.gamma;
    match ctx.variant {
        PhiVariant::DiagonalUnit => 1.0,
        PhiVariant::DiagonalEntropy => 1.0 - g * v_log_v(v),
        PhiVariant::OffDiagonal => {
            let base = 1.0 - v + ctx.c;
            let vlv = v_log_v(v);
            let head = base.powf(g);
            if vlv == 0.0 {
                head
            } else {
                head - g * base.powf(g - 1.0) * vlv
            }
        }
    }
}

/// `h(v) = v / phi(v)`; the risk-minimizing posterior is `h` normalized.
pub fn h(v: f64, ctx: &PhiContext) -> Result<f64> {
    check_unit(v)?;
    Ok(v / phi_unchecked(v, ctx))
}

/// Analytic `dphi/dv` off the dual index: `g (1 - v + C)^(g - 2) s(v)`.
pub fn phi_derivative(v: f64, ctx: &PhiContext) -> Result<f64> {
    ctx.require_off_diagonal()?;
    if !(v > 0.0 && v < 1.0) {
        return Err(invalid(format!("v must lie in (0, 1), got {v}")));
    }
    let base = 1.0 - v + ctx.c;
    Ok(ctx.gamma * base.powf(ctx.gamma - 2.0) * slope_factor(v, ctx.gamma, ctx.c))
}

/// The factor carrying the sign of `dphi/dv`:
/// `s(v) = 2(v - 1 - C) + g v ln v - (1 + C) ln v`.
pub fn slope_factor(v: f64, gamma: f64, c: f64) -> f64 {
    2.0 * (v - 1.0 - c) + gamma * v * v.ln() - (1.0 + c) * v.ln()
}

/// Remainder whose positivity makes `h` increasing for `g < 1`:
/// `u(v) = (1 - v + C)^2 + 2 g v (1 - v + C) + g v^2 ln v`.
pub fn h_slope_remainder(v: f64, gamma: f64, c: f64) -> f64 {
    let base = 1.0 - v + c;
    base * base + 2.0 * gamma * v * base + gamma * v * v * v.ln()
}

/// Numerator of `dh/dv` off the dual index.
pub fn h_slope_numerator(v: f64, gamma: f64, c: f64) -> f64 {
    let base = 1.0 - v + c;
    base.powf(gamma) + 2.0 * gamma * v * base.powf(gamma - 1.0)
        - (gamma - 1.0) * gamma * v * v * base.powf(gamma - 2.0) * v.ln()
}

/// Numerator of `dh/dv` on the dual index under the `1 - g v ln v` convention.
pub fn h_slope_numerator_diagonal(v: f64, gamma: f64) -> f64 {
    1.0 + gamma * v
}

/// Plain bisection for a sign change of `f` on `[lo, hi]`.
pub fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> Result<f64> {
    let mut f_lo = f(lo);
    let f_hi = f(hi);
    if f_lo == 0.0 {
        return Ok(lo);
    }
    if f_hi == 0.0 {
        return Ok(hi);
    }
    if !(f_lo.signum() != f_hi.signum() && f_lo.is_finite() && f_hi.is_finite()) {
        return Err(Error::NoSignChange { lo, hi, f_lo, f_hi });
    }
    for _ in 0..MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        let f_mid = f(mid);
        if f_mid == 0.0 {
            return Ok(mid);
        }
        if f_mid.signum() == f_lo.signum() {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
        if hi - lo <= tol {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Location of the interior maximum of `phi`: the root of `s` in (0, 1).
///
/// `s` tends to `+inf` at 0, is convex, and satisfies `s(1) = -2C` with a
/// positive slope at 1, so it is negative just left of 1 and the bracket
/// below always holds a single sign change. If it does not (only possible
/// through rounding at `C = 0`), the boundary 1 is reported.
pub fn find_vm(ctx: &PhiContext) -> Result<f64> {
    ctx.require_off_diagonal()?;
    let (g, c) = (ctx.gamma, ctx.c);
    match bisect(|v| slope_factor(v, g, c), 1e-12, 1.0 - 1e-9, ROOT_TOLERANCE) {
        Ok(v) => Ok(v),
        Err(Error::NoSignChange { .. }) => Ok(1.0),
        Err(e) => Err(e),
    }
}

fn upper_level_crossing(ctx: &PhiContext, level: f64) -> Result<f64> {
    ctx.require_off_diagonal()?;
    let vm = find_vm(ctx)?;
    bisect(|v| phi_unchecked(v, ctx) - level, vm, 1.0, ROOT_TOLERANCE)
}

/// The solution of `phi(v) = (1 + C)^g` in `(v_m, 1]`.
pub fn find_vprime(ctx: &PhiContext) -> Result<f64> {
    upper_level_crossing(ctx, (1.0 + ctx.c).powf(ctx.gamma))
}

/// The solution of `phi(v) = 1` in `(v_m, 1]`.
pub fn find_vuc(ctx: &PhiContext) -> Result<f64> {
    upper_level_crossing(ctx, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionAnalysis {
    pub gamma: f64,
    pub c: f64,
    pub v_m: f64,
    pub v_prime: f64,
    pub v_uc: f64,
    /// `v_uc - v_prime`: how much the under-confident region shrinks.
    pub reduction: f64,
    pub tolerance: f64,
}

pub fn region_analysis(ctx: &PhiContext) -> Result<RegionAnalysis> {
    let v_m = find_vm(ctx)?;
    let v_prime = find_vprime(ctx)?;
    let v_uc = find_vuc(ctx)?;
    Ok(RegionAnalysis {
        gamma: ctx.gamma,
        c: ctx.c,
        v_m,
        v_prime,
        v_uc,
        reduction: v_uc - v_prime,
        tolerance: ROOT_TOLERANCE,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskMinimizerMap {
    pub q_star: Vec<f64>,
    pub eta: Vec<f64>,
}

/// Recovers the class posterior `eta` whose risk minimizer is `q_star`,
/// using `phi = 1 - g v ln v` on the dual index.
pub fn eta_from_qstar(q_star: &[f64], gamma: f64) -> Result<RiskMinimizerMap> {
    eta_from_qstar_with(q_star, gamma, PhiVariant::DiagonalEntropy)
}

/// As [`eta_from_qstar`] with an explicit convention for the dual index.
///
/// `C` is the dual logit of `q_star` taken below its top entry (smallest
/// index on ties).
pub fn eta_from_qstar_with(
    q_star: &[f64],
    gamma: f64,
    diagonal: PhiVariant,
) -> Result<RiskMinimizerMap> {
    if diagonal == PhiVariant::OffDiagonal {
        return Err(invalid("the dual-index convention must be a diagonal variant"));
    }
    let q = ProbVector::new(q_star.to_vec())?;
    let top = q.argmax();
    let dual = select_dual_logit(&q, top, DualVariant::LargestBelowGt)?;
    let dual_index = dual.indices[0];
    let off = PhiContext::off_diagonal(gamma, dual.value)?;
    let diag = PhiContext { variant: diagonal, ..off };

    let weights: Vec<f64> = q
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ctx = if i == dual_index { &diag } else { &off };
            v / phi_unchecked(v, ctx)
        })
        .collect();

    let eta = if weights.iter().any(|w| w.is_infinite()) {
        // phi vanishes only at a one-hot q_star (v = 1 with C = 0).
        let n = weights.iter().filter(|w| w.is_infinite()).count() as f64;
        weights
            .iter()
            .map(|w| if w.is_infinite() { 1.0 / n } else { 0.0 })
            .collect()
    } else {
        let total: f64 = weights.iter().sum();
        weights.iter().map(|w| w / total).collect()
    };
    Ok(RiskMinimizerMap {
        q_star: q.into_inner(),
        eta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceRegime {
    OverConfident,
    UnderConfident,
    Calibrated,
}

/// Compares the top entries of the minimizer and the posterior.
pub fn confidence_regime(q_star: &[f64], eta: &[f64]) -> ConfidenceRegime {
    let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let diff = max(q_star) - max(eta);
    if diff > 1e-12 {
        ConfidenceRegime::OverConfident
    } else if diff < -1e-12 {
        ConfidenceRegime::UnderConfident
    } else {
        ConfidenceRegime::Calibrated
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiRow {
    pub v: f64,
    /// Focal loss curve (`C = 0`).
    pub fl: f64,
    /// Dual focal loss curve at the context's `C`.
    pub dfl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveEndpoints {
    pub fl_at_0: f64,
    pub fl_at_1: f64,
    pub dfl_at_0: f64,
    pub dfl_at_1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiCurve {
    pub context: PhiContext,
    pub rows: Vec<PhiRow>,
    pub endpoints: CurveEndpoints,
    /// Root annotations; present for the off-diagonal variant only.
    pub fl_region: Option<RegionAnalysis>,
    pub dfl_region: Option<RegionAnalysis>,
}

/// Focal and dual focal `phi` sampled at `v = k / samples`, `k = 1..=samples`.
pub fn phi_curve(ctx: &PhiContext, samples: usize) -> Result<PhiCurve> {
    if samples == 0 {
        return Err(invalid("need at least one sample"));
    }
    let fl_ctx = ctx.with_c(0.0);
    let rows = (1..=samples)
        .map(|k| {
            let v = k as f64 / samples as f64;
            PhiRow {
                v,
                fl: phi_unchecked(v, &fl_ctx),
                dfl: phi_unchecked(v, ctx),
            }
        })
        .collect();
    let endpoints = CurveEndpoints {
        fl_at_0: phi_unchecked(0.0, &fl_ctx),
        fl_at_1: phi_unchecked(1.0, &fl_ctx),
        dfl_at_0: phi_unchecked(0.0, ctx),
        dfl_at_1: phi_unchecked(1.0, ctx),
    };
    let (fl_region, dfl_region) = if ctx.variant == PhiVariant::OffDiagonal {
        (Some(region_analysis(&fl_ctx)?), Some(region_analysis(ctx)?))
    } else {
        (None, None)
    };
    Ok(PhiCurve {
        context: *ctx,
        rows,
        endpoints,
        fl_region,
        dfl_region,
    })
}

/// Whether every pairwise comparison between entries agrees in `a` and `b`.
pub fn same_rank_order(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len()
        && (0..a.len()).all(|i| {
            (0..a.len()).all(|k| a[i].partial_cmp(&a[k]) == b[i].partial_cmp(&b[k]))
        })
}
