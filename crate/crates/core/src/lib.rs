//! Cycled composition network for compositional image-text retrieval.
//!
//! A forward *composition* pathway maps a reference image embedding and a
//! relative caption to a target embedding; an inverse *correction* pathway
//! embeds the reference/target difference and matches it back against the
//! caption. Both share seven image experts and seven attended text experts,
//! and their softmax probabilities are multiplied into the final ranking.
//!
//! The crate is `no_std` (with `alloc`): it carries the tensor engine with
//! reverse-mode differentiation, the model, the training loop, ranking
//! metrics and the synthetic benchmark generator. File formats and the
//! command-line interface live in the `ccnet` companion crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod composition;
pub mod correction;
pub mod data;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experts;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod retrieval;
pub mod synth;
pub mod tensor;
pub mod train;

mod math;

pub use crate::error::{Error, Result};
pub use crate::graph::{Grads, Graph, Var};
pub use crate::model::{Ccnet, ModelConfig};
pub use crate::params::{ModelParams, Param, ParamKind};
pub use crate::tensor::Tensor;

/// Number of experts per modality: global pool, intermediate layer, five slices.
pub const NUM_EXPERTS: usize = 7;
