//! Quantization adapters for transformer activations.
//!
//! A Quadapter is a per-channel scale inserted in front of an activation
//! quantizer and undone right after it, folded into the neighbouring weights
//! at inference time. The model's own parameters never change; only the
//! scales and the quantizer ranges are learned.
//!
//! The crate contains everything needed to study that idea end to end without
//! an ML framework:
//!
//! - [`autodiff`]: a define-by-run tape over dense `f64` tensors with a
//!   straight-through fake-quantize op,
//! - [`quant`]: the uniform asymmetric fake quantizer and its range modes,
//! - [`adapter`]: adapter blocks, folding, and analytical range equalization,
//! - [`model`]: a small decoder-only transformer with adapter sites,
//! - [`train`]: block-wise calibration, end-to-end fine-tuning and the QAT baseline,
//! - [`data`]: byte corpora, perplexity, per-channel statistics,
//! - [`experiment`]: the method matrix used to compare the approaches.

pub mod adapter;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod model;
pub mod error;
pub mod experiment;
pub mod optim;
pub mod quant;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

// The guide's code blocks run as doctests of this crate.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/quantizer.md")]
    mod quantizer {}
    #[doc = include_str!("../../../book/src/adapter.md")]
    mod adapter {}
    #[doc = include_str!("../../../book/src/equalization.md")]
    mod equalization {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
