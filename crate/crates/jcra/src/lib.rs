//! Standard-library side of the pose pipeline: COCO JSON, the checkpoint
//! container, config documents, traces, timing and the `jcra` command line.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod coco;
pub mod config;
pub mod error;
pub mod json;
pub mod report;
pub mod trace;

pub use error::{Error, Result};
