//! Training loop, evaluation, sweeps and run artifacts.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod log;
pub mod sweep;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use eval::{evaluate, EvalReport, Policy};
pub use train::{resume, train, Setup, TrainOutcome, TrainState};

/// Version stamped on every file the harness writes.
pub const SCHEMA_VERSION: u32 = 1;
