//! Dual focal loss and calibration tooling: losses with analytic gradients,
//! calibration metrics, temperature scaling, risk-minimizer analysis and a
//! small deterministic trainer.

pub mod batch;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod posthoc;
pub mod theory;
pub mod trainer;

pub use batch::LabeledBatch;
pub use error::{Error, Result};
pub use loss::{loss_grad, loss_value, DualVariant, LossKind, LossSpec};
pub use metrics::{metric_report, MetricReport};
