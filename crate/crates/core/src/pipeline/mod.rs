//! Progressive three-stage tokenizer training, optimizers, checkpoints and
//! the AE-to-VAE fidelity report.

pub mod checkpoint;
pub mod config;
pub mod fidelity;
pub mod log;
pub mod optim;
pub mod stages;

pub use checkpoint::{load_checkpoint, save_checkpoint, LatentFile};
pub use config::{Ablation, LossWeights, Precision, TrainConfig};
pub use fidelity::{fidelity_bound_report, FidelityReport, FidelitySample, LatentDecoder, LinearDecoder};
pub use log::{LogRow, TrainingLog};
pub use optim::{adamw_step, AdamWConfig, LrSchedule, OptimizerState};
pub use stages::{run_stage, Stage, StagePlan, Tokenizer};
