//! Desk-scale implementation of the DeSamba architecture: per-sequence
//! dual-branch volumetric encoders (SAMNet with a spectral adaptive modulation
//! path, plus a 3D gated-CNN MambaOut branch), decoupled representation
//! learning across MRI sequences, a tabular encoder, and the composite
//! classification objective.
//!
//! The crate is self-contained: it ships its own f64 tensor type, a
//! reverse-mode autodiff tape, deterministic RNG streams, a synthetic
//! multi-sequence data generator, an evaluation suite, 3D Grad-CAM export,
//! and the command layer used by the `desamba` CLI.

pub mod augment;
pub mod commands;
pub mod config;
pub mod data;
pub mod drlm;
pub mod error;
pub mod explain;
pub mod fft;
pub mod fusion;
pub mod gradcheck;
pub mod head;
mod kernels;
pub mod mambaout;
pub mod nifti;
pub mod nn;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod rng;
pub mod samnet;
pub mod spectral;
pub mod synth;
pub mod tape;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use kernels::ConvSpec;
pub use tensor::Array;
