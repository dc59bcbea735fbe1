//! Frequency-aware interactive Mamba (FAIM) for time-series classification.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`], [`autodiff`], [`rng`]: dense tensors, a reverse-mode tape,
//!   AdamW and gradient checking.
//! * [`spectral`]: real FFTs, soft band masks, and a circular-convolution
//!   oracle.
//! * [`afb`]: the adaptive filtering block.
//! * [`ssm`]: selective state-space scan and the interactive Mamba block.
//! * [`model`]: patch embedding, the layer stack, heads, and checkpoints.
//! * [`training`]: losses, patch masking, pretraining and fine-tuning.
//! * [`data`]: dataset loading, normalization, noise, synthetic corpora.
//! * [`metrics`], [`config`], [`runner`]: evaluation and the command surface.

pub mod afb;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod runner;
pub mod spectral;
pub mod ssm;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{CTensor, Tensor};
