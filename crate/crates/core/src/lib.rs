//! Unrolled dual forward-backward denoising networks and their lifted Bregman
//! training by mini-batch block-coordinate forward-backward.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod conv;
pub mod data;
pub mod error;
pub mod metrics;
pub mod objective;
pub mod pnn;
pub mod prox;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::{RunConfig, SweepSpec};
pub use conv::ConvLinearOperator;
pub use data::Dataset;
pub use error::{Error, Result};
pub use metrics::MetricReport;
pub use objective::{ObjectiveBreakdown, SamplePair};
pub use pnn::{AuxVars, KernelGrads, PnnParams};
pub use prox::{BregmanPenalty, LinfBall};
pub use tensor::{FeatureMap, Image};
