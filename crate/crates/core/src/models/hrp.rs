//! HRP: the auxiliary heart-rate predictor.
//!
//! Conv feature stack → BMamba blocks → average pool over time → a small
//! MLP head producing a single raw BPM value. Pretrained on clean
//! segments, then frozen to supervise DPNet's heart-rate loss term
//! (gradients flow through it into the denoiser).

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::common::{conv_layer, ConvLayer, ConvLayerVars};
use super::ModelError;
use crate::ssm::{bmamba, BMambaParams, BMambaVars};
use crate::tensor::{Padding, Tape, Tensor, TensorError, Var, VarRegistry};

/// Architecture of the heart-rate predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HRPConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub state_dim: usize,
    /// Kernel widths of the three input conv layers.
    pub in_kernels: [usize; 3],
    /// Hidden width of the MLP head.
    pub hidden: usize,
}

impl HRPConfig {
    /// Full-scale configuration (five temporal blocks).
    pub fn full() -> Self {
        Self {
            d_model: 64,
            n_blocks: 5,
            state_dim: 16,
            in_kernels: [7, 5, 3],
            hidden: 32,
        }
    }

    /// Small configuration for desk-scale experiments and tests.
    pub fn desk() -> Self {
        Self {
            d_model: 16,
            n_blocks: 2,
            state_dim: 8,
            in_kernels: [7, 5, 3],
            hidden: 32,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.n_blocks == 0 || self.state_dim == 0 || self.hidden == 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model ({}), n_blocks ({}), state_dim ({}) and hidden ({}) must all be ≥ 1",
                self.d_model, self.n_blocks, self.state_dim, self.hidden
            )));
        }
        for &k in &self.in_kernels {
            if k % 2 == 0 {
                return Err(ModelError::InvalidConfig(format!(
                    "kernel widths must be odd for symmetric same-padding, got {k}"
                )));
            }
        }
        Ok(())
    }
}

/// HRP parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HRPParams {
    pub config: HRPConfig,
    pub conv_in: Vec<ConvLayer>,
    pub blocks: Vec<BMambaParams>,
    /// MLP head: `[hidden, D]`, `[hidden]`, `[1, hidden]`, `[1]`.
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

fn affine_weight(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (cols as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::new(data, &[rows, cols])
        .expect("sampled length matches shape")
        .with_grad()
}

impl HRPParams {
    /// Deterministic initialization from a seed.
    pub fn init(config: HRPConfig, seed: u64) -> Result<Self, ModelError> {
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
        let w1 = affine_weight(&mut rng, config.hidden, d);
        let b1 = Tensor::zeros(&[config.hidden]).with_grad();
        let w2 = affine_weight(&mut rng, 1, config.hidden);
        let b2 = Tensor::zeros(&[1]).with_grad();
        Ok(Self {
            config,
            conv_in,
            blocks,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn for_each(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, layer) in self.conv_in.iter().enumerate() {
            layer.for_each(&format!("conv_in.{i}"), f);
        }
        for (i, blk) in self.blocks.iter().enumerate() {
            blk.for_each(&format!("block.{i}"), f);
        }
        f("head.w1", &self.w1);
        f("head.b1", &self.b1);
        f("head.w2", &self.w2);
        f("head.b2", &self.b2);
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, layer) in self.conv_in.iter_mut().enumerate() {
            layer.for_each_mut(&format!("conv_in.{i}"), f);
        }
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            blk.for_each_mut(&format!("block.{i}"), f);
        }
        f("head.w1", &mut self.w1);
        f("head.b1", &mut self.b1);
        f("head.w2", &mut self.w2);
        f("head.b2", &mut self.b2);
    }

    /// Enables/disables gradient tracking on every parameter. Frozen HRP
    /// still passes gradients *through* to its input.
    pub fn set_trainable(&mut self, trainable: bool) {
        self.for_each_mut(&mut |_, t| t.requires_grad = trainable);
    }

    pub fn bind(&self, tape: &mut Tape, reg: &mut VarRegistry) -> HRPVars {
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
        let w1 = tape.leaf(&self.w1);
        reg.register("head.w1", w1);
        let b1 = tape.leaf(&self.b1);
        reg.register("head.b1", b1);
        let w2 = tape.leaf(&self.w2);
        reg.register("head.w2", w2);
        let b2 = tape.leaf(&self.b2);
        reg.register("head.b2", b2);
        HRPVars {
            conv_in,
            blocks,
            w1,
            b1,
            w2,
            b2,
        }
    }
}

/// Tape handles for HRP parameters.
#[derive(Debug, Clone)]
pub struct HRPVars {
    pub conv_in: Vec<ConvLayerVars>,
    pub blocks: Vec<BMambaVars>,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Predicts BPM for one z-scored segment `x: [1, L]` → scalar `[1]`.
pub fn hrp_forward(tape: &mut Tape, x: Var, p: &HRPVars) -> Result<Var, TensorError> {
    let mut h = x;
    for layer in &p.conv_in {
        h = conv_layer(tape, h, layer, Padding::Same)?;
        h = tape.silu(h);
    }
    for blk in &p.blocks {
        h = bmamba(tape, h, &blk.fwd, &blk.bwd)?;
    }
    let pooled = tape.mean_axis(h, 1)?;
    let d = tape.shape(pooled)[0];
    let v = tape.reshape(pooled, &[d, 1])?;
    let z = tape.matmul(p.w1, v)?;
    let z = tape.add_bias(z, p.b1)?;
    let z = tape.silu(z);
    let o = tape.matmul(p.w2, z)?;
    let o = tape.add_bias(o, p.b2)?;
    tape.reshape(o, &[1])
}
