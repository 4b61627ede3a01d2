//! Multi-level factorisation networks from scratch.
//!
//! This crate is `no_std` (with `alloc`) and holds every numerical piece:
//! tensors and differentiable kernels, a define-by-run autodiff tape, the
//! gated multi-branch model and its ablations, optimisers and the training
//! step, the synthetic re-identification dataset, retrieval metrics, and the
//! selection-unit analyses. File formats and the command line live in the
//! `mlfn` crate.
#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod inspect;
pub mod kernels;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod verify;

#[cfg(test)]
pub(crate) mod testutil;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
