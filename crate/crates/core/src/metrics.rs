//! Calibration and discrimination metrics.
//!
//! Binning follows two schemes. Equal-width bins place a sample with
//! confidence `c` into bin `floor(M * c)` (clamped to `M - 1`, so `c = 1`
//! lands in the top bin). Equal-mass bins stably sort samples by
//! `(confidence, original index)` and split them into `M` contiguous groups;
//! the first `N mod M` groups hold one extra sample. Empty bins carry zero
//! weight in every sum and are skipped by maxima.

use serde::{Deserialize, Serialize};

use crate::batch::LabeledBatch;
use crate::error::{invalid, Result};
use crate::loss::log_sum_exp;

/// Bin count used throughout unless configured otherwise.
pub const DEFAULT_BINS: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinScheme {
    EqualWidth,
    EqualMass,
}

/// One bin. Accuracy and confidence are only defined for nonempty bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub accuracy: Option<f64>,
    pub confidence: Option<f64>,
}

impl Bin {
    /// `accuracy - confidence`, if the bin is nonempty.
    pub fn gap(&self) -> Option<f64> {
        Some(self.accuracy? - self.confidence?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub scheme: BinScheme,
    pub bins: Vec<Bin>,
}

impl BinReport {
    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// Count-weighted mean of `|accuracy - confidence|`.
    pub fn weighted_gap(&self) -> f64 {
        let n = self.total() as f64;
        self.bins
            .iter()
            .filter_map(|b| b.gap().map(|g| b.count as f64 / n * g.abs()))
            .sum()
    }

    /// Largest `|accuracy - confidence|` over nonempty bins.
    pub fn max_gap(&self) -> f64 {
        self.bins
            .iter()
            .filter_map(|b| b.gap().map(f64::abs))
            .fold(0.0, f64::max)
    }
}

/// A scored sample: the score being calibrated and whether the event happened.
#[derive(Debug, Clone, Copy)]
struct Scored {
    score: f64,
    hit: bool,
}

fn summarize(lo: f64, hi: f64, members: &[Scored]) -> Bin {
    let count = members.len();
    if count == 0 {
        return Bin {
            lo,
            hi,
            count,
            accuracy: None,
            confidence: None,
        };
    }
    let hits = members.iter().filter(|s| s.hit).count();
    let conf_sum: f64 = members.iter().map(|s| s.score).sum();
    Bin {
        lo,
        hi,
        count,
        accuracy: Some(hits as f64 / count as f64),
        confidence: Some(conf_sum / count as f64),
    }
}

fn equal_width_index(score: f64, bins: usize) -> usize {
    ((score * bins as f64).floor() as usize).min(bins - 1)
}

fn bin_scores(scored: &[Scored], bins: usize, scheme: BinScheme) -> BinReport {
    let bins_out = match scheme {
        BinScheme::EqualWidth => {
            let mut groups: Vec<Vec<Scored>> = vec![Vec::new(); bins];
            for s in scored {
                groups[equal_width_index(s.score, bins)].push(*s);
            }
            groups
                .iter()
                .enumerate()
                .map(|(m, g)| summarize(m as f64 / bins as f64, (m + 1) as f64 / bins as f64, g))
                .collect()
        }
        BinScheme::EqualMass => {
            let mut order: Vec<usize> = (0..scored.len()).collect();
            order.sort_by(|&a, &b| scored[a].score.total_cmp(&scored[b].score).then(a.cmp(&b)));
            let sorted: Vec<Scored> = order.iter().map(|&i| scored[i]).collect();
            let base = sorted.len() / bins;
            let extra = sorted.len() % bins;
            let mut start = 0;
            let mut last_hi = 0.0;
            (0..bins)
                .map(|m| {
                    let size = base + usize::from(m < extra);
                    let members = &sorted[start..start + size];
                    start += size;
                    let (lo, hi) = match (members.first(), members.last()) {
                        (Some(a), Some(b)) => (a.score, b.score),
                        _ => (last_hi, last_hi),
                    };
                    last_hi = hi;
                    summarize(lo, hi, members)
                })
                .collect()
        }
    };
    BinReport {
        scheme,
        bins: bins_out,
    }
}

fn check_bins(bins: usize) -> Result<()> {
    if bins == 0 {
        return Err(invalid("bin count must be at least 1"));
    }
    Ok(())
}

fn top_class_scores(batch: &LabeledBatch) -> Vec<Scored> {
    batch
        .predictions()
        .into_iter()
        .map(|p| Scored {
            score: p.confidence,
            hit: p.correct,
        })
        .collect()
}

/// Bins samples by top-class confidence.
pub fn bin_predictions(batch: &LabeledBatch, bins: usize, scheme: BinScheme) -> Result<BinReport> {
    check_bins(bins)?;
    Ok(bin_scores(&top_class_scores(batch), bins, scheme))
}

/// Expected calibration error over equal-width bins.
pub fn ece(batch: &LabeledBatch, bins: usize) -> Result<f64> {
    Ok(bin_predictions(batch, bins, BinScheme::EqualWidth)?.weighted_gap())
}

/// Adaptive ECE: the same gap over equal-mass bins.
pub fn ada_ece(batch: &LabeledBatch, bins: usize) -> Result<f64> {
    Ok(bin_predictions(batch, bins, BinScheme::EqualMass)?.weighted_gap())
}

/// Maximum calibration error over nonempty equal-width bins.
pub fn mce(batch: &LabeledBatch, bins: usize) -> Result<f64> {
    Ok(bin_predictions(batch, bins, BinScheme::EqualWidth)?.max_gap())
}

/// Per-class ECE averaged over classes. For class `j`, samples are binned by
/// their class-`j` probability and the bin accuracy is the fraction labelled `j`.
pub fn classwise_ece(batch: &LabeledBatch, bins: usize) -> Result<f64> {
    check_bins(bins)?;
    let probs = batch.probabilities();
    let k = batch.classes();
    let total: f64 = (0..k)
        .map(|j| {
            let scored: Vec<Scored> = probs
                .iter()
                .zip(batch.labels())
                .map(|(p, &label)| Scored {
                    score: p[j],
                    hit: label == j,
                })
                .collect();
            bin_scores(&scored, bins, BinScheme::EqualWidth).weighted_gap()
        })
        .sum();
    Ok(total / k as f64)
}

/// Mean negative log-likelihood of the labels.
pub fn nll(batch: &LabeledBatch) -> f64 {
    let sum: f64 = batch
        .rows()
        .zip(batch.labels())
        .map(|(row, &label)| log_sum_exp(row) - row[label])
        .sum();
    sum / batch.len() as f64
}

/// Fraction of samples whose argmax (smallest index on ties) differs from the label.
pub fn error_rate(batch: &LabeledBatch) -> f64 {
    let wrong = batch.predictions().iter().filter(|p| !p.correct).count();
    wrong as f64 / batch.len() as f64
}

/// Area under the ROC curve for separating `in_scores` (positives) from
/// `out_scores`, via the Mann-Whitney statistic with mid-ranks for ties.
pub fn auroc(in_scores: &[f64], out_scores: &[f64]) -> Result<f64> {
    if in_scores.is_empty() || out_scores.is_empty() {
        return Err(invalid("AUROC needs nonempty in- and out-distribution scores"));
    }
    if in_scores.iter().chain(out_scores).any(|s| !s.is_finite()) {
        return Err(invalid("AUROC scores must be finite"));
    }
    let mut all: Vec<(f64, bool)> = in_scores
        .iter()
        .map(|&s| (s, true))
        .chain(out_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut rank_sum_in = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let mid_rank = (i + j + 2) as f64 / 2.0;
        rank_sum_in += mid_rank * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let n_in = in_scores.len() as f64;
    let n_out = out_scores.len() as f64;
    let u = rank_sum_in - n_in * (n_in + 1.0) / 2.0;
    Ok(u / (n_in * n_out))
}

/// One row of a reliability diagram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityRow {
    pub lo: f64,
    pub hi: f64,
    pub accuracy: f64,
    pub confidence: f64,
    /// Signed `accuracy - confidence`; negative means over-confident.
    pub gap: f64,
    pub count: usize,
}

/// Nonempty equal-width bins flattened for plotting.
pub fn reliability_table(batch: &LabeledBatch, bins: usize) -> Result<Vec<ReliabilityRow>> {
    let report = bin_predictions(batch, bins, BinScheme::EqualWidth)?;
    Ok(report
        .bins
        .iter()
        .filter_map(|b| {
            Some(ReliabilityRow {
                lo: b.lo,
                hi: b.hi,
                accuracy: b.accuracy?,
                confidence: b.confidence?,
                gap: b.gap()?,
                count: b.count,
            })
        })
        .collect())
}

/// All calibration metrics of one batch, as fractions in [0, 1] (NLL in nats).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ece: f64,
    pub ada_ece: f64,
    pub classwise_ece: f64,
    pub mce: f64,
    pub nll: f64,
    pub error_rate: f64,
    pub temperature: Option<f64>,
}

pub fn metric_report(batch: &LabeledBatch, bins: usize) -> Result<MetricReport> {
    Ok(MetricReport {
        ece: ece(batch, bins)?,
        ada_ece: ada_ece(batch, bins)?,
        classwise_ece: classwise_ece(batch, bins)?,
        mce: mce(batch, bins)?,
        nll: nll(batch),
        error_rate: error_rate(batch),
        temperature: None,
    })
}
