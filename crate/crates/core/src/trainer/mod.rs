//! Deterministic desk-scale training with calibration tracking.

pub mod data;
pub mod mlp;
pub mod stats;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::LabeledBatch;
use crate::error::{invalid, Error, Result};
use crate::loss::LossSpec;
use crate::metrics::{ece, error_rate, DEFAULT_BINS};

pub use data::{generate_dataset, Dataset, DatasetKind, FeatureSet, SyntheticSpec};
pub use mlp::{Layer, Mlp, Sgd};
pub use stats::{logit_statistics, quantile, FiveNumberSummary, Histogram, LogitStatistics};

/// Piecewise-constant learning rate. Segment `(threshold, lr)` applies to
/// epochs below `threshold` not covered by an earlier segment; epochs past
/// the last threshold keep the last rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub segments: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn new(segments: Vec<(usize, f64)>) -> Result<Self> {
        if segments.is_empty() {
            return Err(invalid("schedule needs at least one segment"));
        }
        for w in segments.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(invalid("schedule thresholds must increase strictly"));
            }
            if w[1].1 >= w[0].1 {
                return Err(invalid("schedule learning rates must decrease strictly"));
            }
        }
        if segments.iter().any(|&(_, lr)| !(lr.is_finite() && lr > 0.0)) {
            return Err(invalid("learning rates must be positive"));
        }
        Ok(Self { segments })
    }

    /// 0.1, then 0.01, then 0.001 over 3/7, 2/7 and 2/7 of `epochs`.
    pub fn step_decay(epochs: usize) -> Self {
        let cut = |num: usize| ((epochs * num) as f64 / 7.0).round() as usize;
        let mut segments: Vec<(usize, f64)> = Vec::new();
        for (threshold, lr) in [(cut(3), 0.1), (cut(5), 0.01), (epochs, 0.001)] {
            let previous = segments.last().map_or(0, |s| s.0);
            if threshold > previous {
                segments.push((threshold, lr));
            }
        }
        if segments.is_empty() {
            segments.push((epochs.max(1), 0.1));
        }
        Self { segments }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.segments
            .iter()
            .find(|&&(threshold, _)| epoch < threshold)
            .unwrap_or_else(|| self.segments.last().expect("nonempty"))
            .1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub loss: LossSpec,
    /// Hidden layer widths between the input and the class logits.
    pub hidden: Vec<usize>,
    pub bins: usize,
}

impl TrainConfig {
    pub fn new(loss: LossSpec, epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size: 128,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: LrSchedule::step_decay(epochs),
            seed,
            loss,
            hidden: vec![64, 64],
            bins: DEFAULT_BINS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid("epochs and batch size must be positive"));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(invalid("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(invalid("weight decay must be >= 0"));
        }
        LrSchedule::new(self.schedule.segments.clone())?;
        self.loss.validate()
    }

    /// Layer widths for a dataset with `input` features and `classes` outputs.
    pub fn widths(&self, input: usize, classes: usize) -> Vec<usize> {
        let mut w = vec![input];
        w.extend(&self.hidden);
        w.push(classes);
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_ece: f64,
    pub test_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
    pub test: LabeledBatch,
    pub validation: LabeledBatch,
}

/// Seed offset separating the shuffle stream from the initialization stream.
const SHUFFLE_STREAM: u64 = 0x5eed_5bff1e;

/// Builds a freshly initialized network for `data` and trains it.
pub fn train_new(config: &TrainConfig, data: &Dataset) -> Result<(Mlp, TrainTrace)> {
    let mut model = Mlp::new(&config.widths(data.train.dim, data.classes), config.seed)?;
    let trace = train(&mut model, config, data)?;
    Ok((model, trace))
}

/// Minibatch SGD on the training split; after each epoch the test split is
/// scored. Runs are bit-for-bit reproducible for a fixed config.
pub fn train(model: &mut Mlp, config: &TrainConfig, data: &Dataset) -> Result<TrainTrace> {
    config.validate()?;
    if model.input_dim() != data.train.dim || model.classes() != data.classes {
        return Err(invalid(format!(
            "network {:?} does not fit data with {} features and {} classes",
            model.widths(),
            data.train.dim,
            data.classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM);
    let mut optimizer = Sgd::new(config.momentum, config.weight_decay);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut records = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let lr = config.schedule.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (batch, rows) in order.chunks(config.batch_size).enumerate() {
            let (loss, grads) = match model.loss_and_grad(&data.train, rows, &config.loss) {
                Ok(out) => out,
                // The data are finite, so a non-finite logit means the weights blew up.
                Err(Error::InvalidInput(_)) => {
                    return Err(Error::Diverged { epoch, batch, loss: f64::NAN });
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || grads.parameters().iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch, batch, loss });
            }
            loss_sum += loss * rows.len() as f64;
            optimizer.step(model, &grads, lr);
        }
        let test = model.predict(&data.test).map_err(|_| Error::Diverged {
            epoch,
            batch: order.len().div_ceil(config.batch_size),
            loss: f64::NAN,
        })?;
        records.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / data.train.len() as f64,
            test_ece: ece(&test, config.bins)?,
            test_error: error_rate(&test),
        });
    }

    Ok(TrainTrace {
        records,
        test: model.predict(&data.test)?,
        validation: model.predict(&data.validation)?,
    })
}

/// Exponential moving average `s_t = factor * s_{t-1} + (1 - factor) * x_t`,
/// started at `s_0 = x_0`.
pub fn exponential_moving_average(values: &[f64], factor: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    for &x in values {
        let next = match out.last() {
            Some(prev) => factor * prev + (1.0 - factor) * x,
            None => x,
        };
        out.push(next);
    }
    out
}

/// Smoothing factor for ECE-over-training curves.
pub const DEFAULT_EMA_FACTOR: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EceCurvePoint {
    pub epoch: usize,
    pub ece: f64,
    pub smoothed: f64,
}

/// Per-epoch test ECE, optionally EMA-smoothed (otherwise `smoothed == ece`).
pub fn evaluate_over_training(trace: &TrainTrace, smoothing: Option<f64>) -> Vec<EceCurvePoint> {
    let raw: Vec<f64> = trace.records.iter().map(|r| r.test_ece).collect();
    let smoothed = match smoothing {
        Some(f) => exponential_moving_average(&raw, f),
        None => raw.clone(),
    };
    trace
        .records
        .iter()
        .zip(raw.iter().zip(smoothed))
        .map(|(r, (&ece, smoothed))| EceCurvePoint {
            epoch: r.epoch,
            ece,
            smoothed,
        })
        .collect()
}
