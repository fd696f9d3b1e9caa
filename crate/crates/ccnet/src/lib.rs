//! File formats, drivers and the command line around `ccnet-core`.
//!
//! The core crate is `no_std` and knows nothing about files; this crate
//! reads and writes feature stores, triplet splits, word vectors,
//! checkpoints and configs, runs training with checkpointing, scores
//! splits across threads and exposes it all as the `ccnet` binary.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod run;
pub mod store;
pub mod text;

pub use crate::error::{Error, Result};
