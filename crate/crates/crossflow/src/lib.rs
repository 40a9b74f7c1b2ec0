//! Desk-scale laboratory for cross-spectral image translation.
//!
//! The crate reproduces, at CPU scale, a pipeline that adapts a frozen
//! flow-matching image generator to a new sensing modality with low-rank
//! adapters, selects adapters by perceptual distance on a tiny validation
//! split, manufactures pixel-aligned synthetic detection data with reused
//! labels, and measures how well perceptual distance predicts detection mAP.
//!
//! Start with the runnable programs under `examples/`; each one exercises a
//! major capability end to end. The `crossflow` binary chains the same
//! building blocks behind batch subcommands.

pub mod data;
pub mod detect;
pub mod error;
pub mod flow;
pub mod img;
pub mod lora;
pub mod perceptual;
pub mod pipeline;
pub mod seed;
pub mod stats;
pub mod sweep;
pub mod tensor;

pub use error::{Error, Result};
