//! DPNet: the bidirectional selective-state-space denoiser.
//!
//! `d = α·x + (1−α)·f(x)` where `f` is conv-in (3 layers, SiLU) → BMamba
//! blocks → conv-out (SiLU layer, then a linear 1-channel layer), and
//! `α = sigmoid(a)` is a learned scalar gate. With `α → 1` the model is
//! the identity; with `α → 0` it trusts the learned branch entirely.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::common::{conv_layer, ConvLayer, ConvLayerVars};
use super::ModelError;
use crate::ssm::{bmamba, BMambaParams, BMambaVars};
use crate::tensor::{sigmoid, Padding, Tape, Tensor, TensorError, Var, VarRegistry};

/// Architecture of the denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DPNetConfig {
    /// Feature channels through the block stack.
    pub d_model: usize,
    /// Number of bidirectional blocks.
    pub n_blocks: usize,
    /// States per channel inside each scan.
    pub state_dim: usize,
    /// Kernel widths of the three input conv layers.
    pub in_kernels: [usize; 3],
    /// Kernel widths of the two output conv layers.
    pub out_kernels: [usize; 2],
    /// Raw residual-gate value `a`; the gate is `α = sigmoid(a)`.
    pub alpha_init: f64,
}

impl DPNetConfig {
    /// Full-scale configuration.
    pub fn full() -> Self {
        Self {
            d_model: 64,
            n_blocks: 5,
            state_dim: 16,
            in_kernels: [7, 5, 3],
            out_kernels: [3, 3],
            alpha_init: 0.0,
        }
    }

    /// Small configuration for desk-scale experiments and tests.
    pub fn desk() -> Self {
        Self {
            d_model: 16,
            n_blocks: 2,
            state_dim: 8,
            in_kernels: [7, 5, 3],
            out_kernels: [3, 3],
            alpha_init: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.n_blocks == 0 || self.state_dim == 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model ({}), n_blocks ({}) and state_dim ({}) must all be ≥ 1",
                self.d_model, self.n_blocks, self.state_dim
            )));
        }
        for &k in self.in_kernels.iter().chain(&self.out_kernels) {
            if k % 2 == 0 {
                return Err(ModelError::InvalidConfig(format!(
                    "kernel widths must be odd for symmetric same-padding, got {k}"
                )));
            }
        }
        Ok(())
    }

    /// Largest conv kernel — the minimum admissible input length.
    pub fn min_input_len(&self) -> usize {
        *self
            .in_kernels
            .iter()
            .chain(&self.out_kernels)
            .max()
            .expect("kernel lists are non-empty")
    }
}

/// DPNet parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DPNetParams {
    pub config: DPNetConfig,
    pub conv_in: Vec<ConvLayer>,
    pub blocks: Vec<BMambaParams>,
    pub conv_out: Vec<ConvLayer>,
    /// Raw gate scalar `a`, shape `[1]`.
    pub alpha_raw: Tensor,
}

impl DPNetParams {
    /// Deterministic initialization from a seed.
    pub fn init(config: DPNetConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let conv_in = vec![
            ConvLayer::init(1, d, config.in_kernels[0], &mut rng),
            ConvLayer::init(d, d, config.in_kernels[1], &mut rng),
            ConvLayer::init(d, d, config.in_kernels[2], &mut rng),
        ];
        let blocks = (0..config.n_blocks)
            .map(|_| BMambaParams::init(d, config.state_dim, &mut rng))
            .collect();
        let conv_out = vec![
            ConvLayer::init(d, d, config.out_kernels[0], &mut rng),
            ConvLayer::init(d, 1, config.out_kernels[1], &mut rng),
        ];
        let alpha_raw = Tensor::scalar(config.alpha_init).with_grad();
        Ok(Self {
            config,
            conv_in,
            blocks,
            conv_out,
            alpha_raw,
        })
    }

    /// Current value of the residual gate `α = sigmoid(a)`.
    pub fn alpha(&self) -> f64 {
        sigmoid(self.alpha_raw.data[0])
    }

    pub fn for_each(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, layer) in self.conv_in.iter().enumerate() {
            layer.for_each(&format!("conv_in.{i}"), f);
        }
        for (i, blk) in self.blocks.iter().enumerate() {
            blk.for_each(&format!("block.{i}"), f);
        }
        for (i, layer) in self.conv_out.iter().enumerate() {
            layer.for_each(&format!("conv_out.{i}"), f);
        }
        f("alpha_raw", &self.alpha_raw);
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, layer) in self.conv_in.iter_mut().enumerate() {
            layer.for_each_mut(&format!("conv_in.{i}"), f);
        }
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            blk.for_each_mut(&format!("block.{i}"), f);
        }
        for (i, layer) in self.conv_out.iter_mut().enumerate() {
            layer.for_each_mut(&format!("conv_out.{i}"), f);
        }
        f("alpha_raw", &mut self.alpha_raw);
    }

    /// Enables/disables gradient tracking on every parameter.
    pub fn set_trainable(&mut self, trainable: bool) {
        self.for_each_mut(&mut |_, t| t.requires_grad = trainable);
    }

    pub fn bind(&self, tape: &mut Tape, reg: &mut VarRegistry) -> DPNetVars {
        let conv_in = self
            .conv_in
            .iter()
            .enumerate()
            .map(|(i, l)| l.bind(tape, reg, &format!("conv_in.{i}")))
            .collect();
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| b.bind(tape, reg, &format!("block.{i}")))
            .collect();
        let conv_out = self
            .conv_out
            .iter()
            .enumerate()
            .map(|(i, l)| l.bind(tape, reg, &format!("conv_out.{i}")))
            .collect();
        let alpha_raw = tape.leaf(&self.alpha_raw);
        reg.register("alpha_raw", alpha_raw);
        DPNetVars {
            conv_in,
            blocks,
            conv_out,
            alpha_raw,
        }
    }
}

/// Tape handles for DPNet parameters.
#[derive(Debug, Clone)]
pub struct DPNetVars {
    pub conv_in: Vec<ConvLayerVars>,
    pub blocks: Vec<BMambaVars>,
    pub conv_out: Vec<ConvLayerVars>,
    pub alpha_raw: Var,
}

/// Denoises one z-scored segment `x: [1, L]` → `[1, L]`.
pub fn dpnet_forward(tape: &mut Tape, x: Var, p: &DPNetVars) -> Result<Var, TensorError> {
    let mut h = x;
    for layer in &p.conv_in {
        h = conv_layer(tape, h, layer, Padding::Same)?;
        h = tape.silu(h);
    }
    for blk in &p.blocks {
        h = bmamba(tape, h, &blk.fwd, &blk.bwd)?;
    }
    let o = conv_layer(tape, h, &p.conv_out[0], Padding::Same)?;
    let o = tape.silu(o);
    let f = conv_layer(tape, o, &p.conv_out[1], Padding::Same)?;
    // d = α·x + (1−α)·f(x)
    let alpha = tape.sigmoid(p.alpha_raw);
    let neg_alpha = tape.neg(alpha);
    let one_minus = tape.add_const(neg_alpha, 1.0);
    let identity_part = tape.mul_scalar(x, alpha)?;
    let learned_part = tape.mul_scalar(f, one_minus)?;
    tape.add(identity_part, learned_part)
}
