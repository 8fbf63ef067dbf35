//! Conv layer shared by both models' feature stacks.

use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use crate::tensor::{Padding, Tape, Tensor, TensorError, Var, VarRegistry};

/// One 1-d convolution layer: kernel `[C_out, C_in, K]` plus bias `[C_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub w: Tensor,
    pub b: Tensor,
}

impl ConvLayer {
    /// Fan-in-scaled uniform kernel, zero bias.
    pub fn init(c_in: usize, c_out: usize, k: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((c_in * k) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let data = (0..c_out * c_in * k).map(|_| dist.sample(rng)).collect();
        Self {
            w: Tensor::new(data, &[c_out, c_in, k])
                .expect("sampled length matches shape")
                .with_grad(),
            b: Tensor::zeros(&[c_out]).with_grad(),
        }
    }

    pub fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.w"), &self.w);
        f(&format!("{prefix}.b"), &self.b);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }

    pub fn bind(&self, tape: &mut Tape, reg: &mut VarRegistry, prefix: &str) -> ConvLayerVars {
        let w = tape.leaf(&self.w);
        reg.register(format!("{prefix}.w"), w);
        let b = tape.leaf(&self.b);
        reg.register(format!("{prefix}.b"), b);
        ConvLayerVars { w, b }
    }
}

/// Tape handles for one conv layer.
#[derive(Debug, Clone, Copy)]
pub struct ConvLayerVars {
    pub w: Var,
    pub b: Var,
}

/// Convolution plus bias (no activation).
pub fn conv_layer(
    tape: &mut Tape,
    x: Var,
    layer: &ConvLayerVars,
    pad: Padding,
) -> Result<Var, TensorError> {
    let y = tape.conv1d(x, layer.w, pad)?;
    tape.add_bias(y, layer.b)
}
