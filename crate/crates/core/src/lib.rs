//! Core of a one-stage, query-based multi-person pose regressor.
//!
//! Everything here is `no_std` with `alloc`: a tape-based differentiation
//! graph over dense `f64` tensors, attention layers, Hungarian set matching,
//! the training losses, OKS-based keypoint AP evaluation, a toy
//! encoder/decoder network, a synthetic scene generator and an SGD trainer.
//! File formats, the checkpoint container and the command-line tool live in
//! the `jcra` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod attention;
pub mod checks;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod matcher;
pub mod metrics;
pub mod model;
pub mod pose;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
