//! Staged training: hard-routing expert pre-training, gate alignment and
//! top-1 fine-tuning, plus the single-stage end-to-end regime.

pub mod optim;
pub mod plan;
pub mod runner;
pub mod schedule;

pub use optim::{AdamW, AdamWParams};
pub use plan::{LrGroup, Stage, StagePlan, StageSettings, TensorSet, TrainConfig};
pub use runner::{checkpoint_path, log_path, run_stage, EpochRecord, RunOptions, Splits, StopReason, TrainReport, TrainSession};
pub use schedule::SchedulerConfig;
