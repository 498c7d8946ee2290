//! Mask-guided attribute editing for text-conditioned diffusion models.
//!
//! This crate holds the pure computation: layout masks, attention biasing,
//! a small trainable denoiser with DDIM sampling and inversion, caption
//! handling, the editing pipeline and evaluation metrics. It needs only
//! `alloc`; the `std` feature is used by the companion binary crate.

#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod attention;
pub mod captions;
pub mod diffusion;
pub mod edit;
mod error;
pub mod layout;
pub mod metrics;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
