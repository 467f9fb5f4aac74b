//! Algorithmic core for studying how adversarial training changes a model's
//! exposure to black-box extraction.
//!
//! Everything here is `no_std` + `alloc`: tensors with reverse-mode autodiff,
//! declarative models and their checkpoint codec, synthetic and IDX datasets,
//! the SGD trainer, FGSM/PGD attacks, the extraction attack against an
//! [`extraction::Oracle`], and the evaluation metrics. File IO, the HTTP
//! oracle and the experiment runner live in the `xlab` crate.

#![no_std]

extern crate alloc;

pub mod attack;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod extraction;
pub mod gradcheck;
pub mod graph;
pub mod idx;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod real;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Bindings, Gradients, Graph, NodeId, OpKind};
pub use real::Real;
pub use tensor::Tensor;
