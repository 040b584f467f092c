//! Bit-level information preserving continual learning.
//!
//! A dense network is trained on a stream of tasks. After each task the
//! diagonal Fisher information gives an estimate of how many bits of every
//! quantized parameter were learned; that many leading bits are frozen, and
//! later training is clipped so they never change.

pub mod config;
pub mod engine;
pub mod error;
pub mod fisher;
pub mod metrics;
pub mod nn;
pub mod parallel;
pub mod quant;
pub mod tasks;

pub use config::{ModelConfig, RunConfig};
pub use engine::{run_continual, run_continual_with, BlipConfig, BlipState, IgFormula, RunFailure, Strategy};
pub use error::{Error, Result};
pub use metrics::{compute_acc, compute_bwt, serialize_report, AccuracyMatrix, RunReport};
pub use nn::{Network, NetworkSpec};
pub use quant::{quantize, FrozenInterval, QuantConfig};
pub use tasks::{StreamConfig, TaskStream};
