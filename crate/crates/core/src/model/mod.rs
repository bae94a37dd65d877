//! Context-gated mixture-of-experts transformer for beam prediction.

pub mod config;
pub mod io;
pub mod network;
pub mod ops;
pub mod params;
pub mod real;
pub mod routing;

pub use config::ModelConfig;
pub use io::{load_model, save_model};
pub use network::{ForwardOptions, ForwardTrace, Model, Sample, TrainMask};
pub use params::{fingerprint, CheckpointMeta, Layout, ParamStore};
pub use real::Real;
pub use routing::{hard_assignment, RoutingDirective, RoutingMode};
