//! Experiment plans, regimes and reports on top of `mergelab-core`.

pub mod error;
pub mod lab;
pub mod plan;
pub mod provenance;
pub mod report;
pub mod world;

pub use error::{HarnessError, Result};
pub use lab::Lab;
pub use plan::ExperimentPlan;
pub use report::Report;
