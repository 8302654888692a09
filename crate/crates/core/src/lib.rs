//! Two-stage building damage assessment.
//!
//! Stage 1 segments buildings from the pre-disaster image with a U-Net.
//! Stage 2 runs a weight-shared two-branch U-Net over the pre/post pair,
//! optionally with multi-scale feature fusion ([`mff`]) in the encoder and
//! cross-directional attention ([`cda`]) in the decoder, and predicts one of
//! five damage levels per pixel. The final map is masked by the Stage 1
//! building mask.
//!
//! Everything runs on a small reverse-mode autodiff engine ([`autodiff`])
//! over dense `f64` tensors.

pub mod augment;
pub mod autodiff;
pub mod backbone;
pub mod cda;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod infer;
pub mod io;
pub mod metrics;
pub mod mff;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod sample;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
