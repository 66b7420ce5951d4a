//! Variational co-clustering of data matrices.

pub mod config;
pub mod data;
pub mod error;
pub mod estimators;
pub mod export;
pub mod gmm;
pub mod info;
pub mod joint;
pub mod linalg;
pub mod metrics;
pub mod side;
pub mod synth;
pub mod trainer;

pub use config::{Mode, TrainConfig};
pub use error::{Error, ErrorCategory, Result};
pub use trainer::{fit, CoClusterModel, CoClusterResult, LossBreakdown, Trainer};
