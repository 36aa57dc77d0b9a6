//! File formats, pipeline orchestration and the command-line front end for
//! contrastive pretraining with mined semantic positive pairs.
//!
//! The numerical work lives in [`sepp_core`]; this crate adds what needs
//! `std`: reading CIFAR-10 and IDX datasets, the `SEPPE1` embedding and
//! `SEPPW1` parameter files, pair and metrics CSVs, TOML configuration,
//! multi-threaded mining with wall-clock timing, and the staged pipeline
//! driven by the `sepp` binary.

pub mod config;
pub mod error;
pub mod formats;
pub mod metrics;
pub mod mining;
pub mod pipeline;

pub use config::{Arm, PipelineConfig};
pub use error::{Error, Result};
pub use sepp_core;
