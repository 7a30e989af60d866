//! Degradation-aware self-prompting diffusion for all-in-one weather image
//! restoration, built from scratch at desk scale.
//!
//! * [`tensor`] dense tensors with a reverse-mode tape, gradient checks, AdamW.
//! * [`wavelet`] one-level Haar DWT/IDWT with subband channel packing.
//! * [`blocks`] prompt fusion, caption refinement and injection, and the
//!   wavelet blocks (WSRB, WFDB, WFUB) plus time embedding.
//! * [`lpg`] latent prompt generators (frozen + learnable encoders).
//! * [`wnenet`] the U-shaped wavelet noise estimator.
//! * [`diffusion`] schedule, forward noising, training step, ancestral sampling.
//! * [`synthdata`] procedural paired weather-degraded imagery.
//! * [`eval`] PSNR, SSIM and the attention op counter.

pub mod blocks;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod gradsuite;
pub mod eval;
pub mod lpg;
pub mod nn;
pub mod synthdata;
pub mod tensor;
pub mod wavelet;
pub mod wnenet;

pub use error::{Error, Result};
pub use tensor::{Graph, ParamStore, Tensor, Var};
