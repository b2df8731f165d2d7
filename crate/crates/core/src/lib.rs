//! Deterministic federated-learning simulator for LoRA-adapted MLPs with
//! personalized, B-similarity-weighted aggregation of the A matrices.

pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod lora;
pub mod math;
pub mod metrics;

pub use config::{parse_config, ExperimentConfig};
pub use error::{Error, ErrorKind, Result};
pub use federation::{run_experiment, ServerState, Strategy, StrategyConfig};
pub use lora::{LoraMlp, Gradients};
pub use math::Matrix;
pub use metrics::{write_report, Report};
