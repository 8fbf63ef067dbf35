//! PPG denoising toolkit.
//!
//! A self-contained implementation of DPNet — a bidirectional selective
//! state-space denoiser for photoplethysmography — together with the
//! auxiliary heart-rate predictor (HRP) used by its training objective,
//! the noise-contamination data pipeline, peak-based heart-rate analysis,
//! and the metrics used to evaluate denoising quality.
//!
//! Layout:
//! - [`tensor`]: reverse-mode autodiff over dense f64 tensors (arena tape).
//! - [`ssm`]: selective state-space scan, Mamba-style block, bidirectional wrapper.
//! - [`models`]: DPNet and HRP parameter structs, init, and forward passes.
//! - [`hr`]: adaptive-threshold peak detection and heart-rate estimation.
//! - [`data`]: ingest, resampling, segmentation, noise contamination, storage.
//! - [`metrics`]: evaluation metrics and the staged training loss.
//! - [`train`]: Adam, training loops, checkpoints.

pub mod data;
pub mod hr;
pub mod metrics;
pub mod models;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use tensor::{Tape, Tensor, TensorError, Var};
