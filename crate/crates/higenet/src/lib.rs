//! Command-line companion to `higenet-core`: CSV loading, run
//! configuration, training/evaluation pipelines, the attention benchmark
//! and the ablation sweep.

pub mod ablation;
pub mod bench;
pub mod config;
pub mod csv_io;
pub mod error;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
