//! Core of the semantic-positive-pair contrastive learning toolkit.
//!
//! Everything in this crate is pure computation over in-memory buffers and
//! builds without `std` (only `alloc` is required):
//!
//! - [`tape`]: dense tensors with reverse-mode automatic differentiation.
//! - [`miner`]: dual-threshold cosine-similarity mining of semantic positive
//!   pairs, as a brute-force reference and a blocked tile kernel.
//! - [`augment`]: seeded image augmentation and construction of the combined
//!   (instance + semantic pair) training stream.
//! - [`model`] and [`optim`]: the desk-scale encoder, projection head and
//!   optimizers.
//! - [`loss`]: NT-Xent and its weighted extension with semantic positives.
//! - [`train`]: contrastive pretraining and the linear evaluation protocol.
//!
//! File formats, timing, threading and the command line live in the `sepp`
//! companion crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod augment;
pub mod data;
pub mod error;
pub mod float;
pub mod loss;
pub mod miner;
pub mod model;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use float::Float;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
