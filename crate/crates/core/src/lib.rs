//! Beam prediction from wide-beam uplink sounding: channel simulation, the
//! hybrid-beamforming front end, a context-gated mixture-of-experts
//! transformer, its staged training and evaluation.

pub mod bytes;
pub mod channel;
pub mod config;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
