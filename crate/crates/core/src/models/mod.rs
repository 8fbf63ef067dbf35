//! DPNet (denoiser) and HRP (heart-rate predictor) model definitions.
//!
//! Both models share the same building blocks: a three-layer convolutional
//! feature stack, a stack of bidirectional selective-state-space blocks,
//! and task-specific heads. Parameters live in plain structs of tensors;
//! `bind` registers them on a tape for one forward/backward pass.
//!
//! Inputs are z-scored segments shaped `[1, L]`; all training and
//! evaluation comparisons happen in that z-scored frame.

mod common;
mod dpnet;
mod hrp;

pub use common::{conv_layer, ConvLayer, ConvLayerVars};
pub use dpnet::{dpnet_forward, DPNetConfig, DPNetParams, DPNetVars};
pub use hrp::{hrp_forward, HRPConfig, HRPParams, HRPVars};

use thiserror::Error;

/// Model configuration/construction failures.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
}
