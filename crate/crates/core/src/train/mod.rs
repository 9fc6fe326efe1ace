//! Training objective, optimizer loop, and image metrics.

pub mod losses;
pub mod metrics;
pub mod perceptual;
pub mod config;
pub mod trainer;

pub use config::{preset, ConfigError, RunConfig};
pub use losses::{LossError, LossParts, LossWeights};
pub use trainer::{evaluate, train, EvalSummary, RunReport, StepRecord, TrainError, Trainer};
