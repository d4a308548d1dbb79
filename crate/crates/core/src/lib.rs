//! Forecasting core for long-sequence multivariate time series.
//!
//! The crate is `no_std` (it needs `alloc`) and carries everything that is
//! pure computation: a small dense tensor type with a recording tape for
//! reverse-mode gradients, the gated time embedding, the attention kernels
//! (canonical, NeuralSparse, ProbSparse and their causal variants), the
//! distilling encoder, the generative decoder, scaling/windowing/metrics,
//! Adam training and the binary checkpoint codec.
//!
//! File IO, timing, and the command line live in the `higenet` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{ParamStore, Tensor};
