//! Per-domain mixtures of batch and instance normalization with learnable
//! mixture weights, the baseline normalization variants, a small
//! convolutional classifier, and a deterministic multi-domain training
//! harness with a synthetic style-shift dataset generator.
//!
//! The crate is `no_std` (with `alloc`); all IO, file formats, and the
//! experiment CLI live in the companion `dson-lab` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod model;
pub mod norm;
pub mod optim;
pub mod oracle;
pub mod synth;
pub mod tensor;

pub use tensor::{Rng, Tensor4};
