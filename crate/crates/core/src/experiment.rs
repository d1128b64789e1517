//! Multi-seed loss comparisons on synthetic data.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::loss::{DualVariant, LossKind, LossSpec, DEFAULT_SMOOTHING};
use crate::metrics::{metric_report, MetricReport};
use crate::posthoc::{apply_temperature, default_grid, fit_temperature};
use crate::trainer::{generate_dataset, logit_statistics, train_new, LogitStatistics, SyntheticSpec, TrainConfig};

/// Parses a command-line loss name. `gamma` falls back to the usual default
/// for the loss (3 for focal, 5 for the dual losses) when absent.
pub fn parse_loss(name: &str, gamma: Option<f64>) -> Result<LossSpec> {
    let spec = match name {
        "ce" => LossSpec::cross_entropy(),
        "focal" => LossSpec::focal(gamma.unwrap_or(3.0)),
        "flsd53" => LossSpec::flsd53(),
        "dfl" => LossSpec::dual_focal(gamma.unwrap_or(5.0)),
        "dfl-variant" => LossSpec::dual_focal_variant(gamma.unwrap_or(5.0), DualVariant::MeanAllBelowGt),
        "brier" => LossSpec::brier(),
        "ls" => LossSpec::label_smoothing(DEFAULT_SMOOTHING),
        other => {
            return Err(invalid(format!(
                "unknown loss {other:?}; expected one of ce, focal, flsd53, dfl, dfl-variant, brier, ls"
            )))
        }
    };
    spec.validate()?;
    Ok(spec)
}

/// Parses `name` or `name:gamma`.
pub fn parse_loss_item(item: &str) -> Result<LossSpec> {
    match item.split_once(':') {
        Some((name, g)) => {
            let gamma = g
                .parse()
                .map_err(|_| invalid(format!("bad gamma in {item:?}")))?;
            parse_loss(name, Some(gamma))
        }
        None => parse_loss(item, None),
    }
}

/// Short display name, e.g. `dfl(5)`.
pub fn loss_label(loss: &LossSpec) -> String {
    match loss.kind {
        LossKind::CrossEntropy => "ce".into(),
        LossKind::Focal => format!("focal({})", loss.gamma),
        LossKind::FocalFlsd53 => "flsd53".into(),
        LossKind::DualFocal => format!("dfl({})", loss.gamma),
        LossKind::DualFocalVariant => format!("dfl-variant({})", loss.gamma),
        LossKind::Brier => "brier".into(),
        LossKind::LabelSmoothing => format!("ls({})", loss.smoothing),
    }
}

/// Applies `key=value` overrides (comma separated) to a dataset spec.
/// Keys: kind, classes, n_train, n_validation, n_test, dim, overlap, seed.
pub fn parse_dataset_spec(text: &str, base: SyntheticSpec) -> Result<SyntheticSpec> {
    let mut spec = base;
    for pair in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| invalid(format!("expected key=value, got {pair:?}")))?;
        let bad = || invalid(format!("bad value for {key}: {value:?}"));
        match key.trim() {
            "kind" => {
                spec.kind = serde_json::from_value(serde_json::Value::String(value.trim().to_string()))
                    .map_err(|_| bad())?
            }
            "classes" => spec.classes = value.parse().map_err(|_| bad())?,
            "n_train" => spec.n_train = value.parse().map_err(|_| bad())?,
            "n_validation" => spec.n_validation = value.parse().map_err(|_| bad())?,
            "n_test" => spec.n_test = value.parse().map_err(|_| bad())?,
            "dim" => spec.dim = value.parse().map_err(|_| bad())?,
            "overlap" => spec.overlap = value.parse().map_err(|_| bad())?,
            "seed" => spec.seed = value.parse().map_err(|_| bad())?,
            other => return Err(invalid(format!("unknown dataset key {other:?}"))),
        }
    }
    spec.validate()?;
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareSpec {
    pub losses: Vec<LossSpec>,
    pub seeds: Vec<u64>,
    pub dataset: SyntheticSpec,
    pub epochs: usize,
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub bins: usize,
}

impl CompareSpec {
    pub fn config(&self, loss: LossSpec, seed: u64) -> TrainConfig {
        TrainConfig {
            hidden: self.hidden.clone(),
            batch_size: self.batch_size,
            bins: self.bins,
            ..TrainConfig::new(loss, self.epochs, seed)
        }
    }
}

/// Outcome of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub loss: LossSpec,
    pub seed: u64,
    pub pre: MetricReport,
    pub post: MetricReport,
    pub temperature: f64,
    pub logit_stats: LogitStatistics,
}

/// Trains one model per `(loss, seed)` on a shared dataset. Cells run in
/// parallel; results come back loss-major, seed-minor.
pub fn run_comparison(spec: &CompareSpec) -> Result<Vec<CellResult>> {
    if spec.losses.is_empty() || spec.seeds.is_empty() {
        return Err(invalid("comparison needs at least one loss and one seed"));
    }
    let data = generate_dataset(&spec.dataset)?;
    let cells: Vec<(LossSpec, u64)> = spec
        .losses
        .iter()
        .flat_map(|&l| spec.seeds.iter().map(move |&s| (l, s)))
        .collect();
    cells
        .par_iter()
        .map(|&(loss, seed)| {
            let (_, trace) = train_new(&spec.config(loss, seed), &data)?;
            let temperature = fit_temperature(&trace.validation, &default_grid(), spec.bins)?.temperature;
            let mut post = metric_report(&apply_temperature(&trace.test, temperature)?, spec.bins)?;
            post.temperature = Some(temperature);
            Ok(CellResult {
                loss,
                seed,
                pre: metric_report(&trace.test, spec.bins)?,
                post,
                temperature,
                logit_stats: logit_statistics(&trace.test, spec.bins)?,
            })
        })
        .collect()
}

/// Median for odd counts, the lower of the two middle values for even counts,
/// so every aggregate is an observed value.
pub fn lower_median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty data");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted[(sorted.len() - 1) / 2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub loss: String,
    pub error: f64,
    pub ece_pre: f64,
    pub ece_post: f64,
    pub ada_ece_pre: f64,
    pub ada_ece_post: f64,
    pub classwise_ece_pre: f64,
    pub classwise_ece_post: f64,
    pub mce_pre: f64,
    pub mce_post: f64,
    pub nll_pre: f64,
    pub nll_post: f64,
    pub temperature: f64,
    pub max_logit_range: f64,
}

/// Aggregates cells per loss (in `spec.losses` order) by the lower median.
pub fn summarize(spec: &CompareSpec, cells: &[CellResult]) -> Vec<CompareRow> {
    spec.losses
        .iter()
        .map(|loss| {
            let mine: Vec<&CellResult> = cells.iter().filter(|c| c.loss == *loss).collect();
            let med = |f: &dyn Fn(&CellResult) -> f64| {
                lower_median(&mine.iter().map(|c| f(c)).collect::<Vec<_>>())
            };
            CompareRow {
                loss: loss_label(loss),
                error: med(&|c| c.pre.error_rate),
                ece_pre: med(&|c| c.pre.ece),
                ece_post: med(&|c| c.post.ece),
                ada_ece_pre: med(&|c| c.pre.ada_ece),
                ada_ece_post: med(&|c| c.post.ada_ece),
                classwise_ece_pre: med(&|c| c.pre.classwise_ece),
                classwise_ece_post: med(&|c| c.post.classwise_ece),
                mce_pre: med(&|c| c.pre.mce),
                mce_post: med(&|c| c.post.mce),
                nll_pre: med(&|c| c.pre.nll),
                nll_post: med(&|c| c.post.nll),
                temperature: med(&|c| c.temperature),
                max_logit_range: med(&|c| c.logit_stats.max_logit_range),
            }
        })
        .collect()
}

/// CSV rendering with a fixed column order.
pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from(
        "loss,error,ece_pre,ece_post,ada_ece_pre,ada_ece_post,classwise_ece_pre,classwise_ece_post,\
         mce_pre,mce_post,nll_pre,nll_post,temperature,max_logit_range\n",
    );
    for r in rows {
        let values = [
            r.error,
            r.ece_pre,
            r.ece_post,
            r.ada_ece_pre,
            r.ada_ece_post,
            r.classwise_ece_pre,
            r.classwise_ece_post,
            r.mce_pre,
            r.mce_post,
            r.nll_pre,
            r.nll_post,
            r.temperature,
            r.max_logit_range,
        ];
        out.push_str(&r.loss);
        for v in values {
            write!(out, ",{v:.6}").expect("write to string");
        }
        out.push('\n');
    }
    out
}
