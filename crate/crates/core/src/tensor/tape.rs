//! Arena-based reverse-mode autodiff tape.
//!
//! Every operation appends a [`Node`] holding the forward result plus the
//! operands (and, where recomputation would be wasteful, a small cache such
//! as reduction argmaxes or per-step normalizer values). [`Tape::backward`]
//! seeds the scalar loss with gradient 1 and sweeps the nodes in reverse,
//! accumulating vector-Jacobian products into each differentiable input.
//!
//! `Var` handles are indices into the tape that created them; mixing
//! handles across tapes is a logic error. After `backward` the tape is
//! consumed: gradients stay readable but no further passes are allowed.
//!
//! The fused selective-scan operation records its cache here but its
//! forward/backward kernels live in `crate::ssm::scan`, next to the rest
//! of the state-space math.

use super::kernels;
use super::{Tensor, TensorError};
use crate::ssm::scan::{self, ScanDims, ScanNode};

/// Stable logistic sigmoid. Branch-free (a select on the sign) so loops
/// over slices vectorize together with the inlined polynomial exp.
#[inline]
pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    let e = kernels::exp_fast(-x.abs());
    let s = e / (1.0 + e);
    if x >= 0.0 {
        1.0 - s
    } else {
        s
    }
}

/// Stable softplus, `ln(1 + e^x)`.
#[inline]
pub(crate) fn softplus_scalar(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        kernels::exp_fast(x)
    } else {
        kernels::exp_fast(x).ln_1p()
    }
}

/// Softplus together with its derivative `σ(x)`, sharing one exp. The
/// branch values match [`softplus_scalar`] exactly; the derivative in the
/// saturated tails (`1` above, `e^x` below) differs from the exact
/// sigmoid by less than `e^−30`.
#[inline]
fn softplus_and_sigmoid(x: f64) -> (f64, f64) {
    if x > 30.0 {
        (x, 1.0)
    } else if x < -30.0 {
        let e = kernels::exp_fast(x);
        (e, e)
    } else {
        let e = kernels::exp_fast(x);
        (e.ln_1p(), e / (1.0 + e))
    }
}

/// Inverse of [`softplus_scalar`] for positive arguments.
#[inline]
pub(crate) fn softplus_inv_scalar(y: f64) -> f64 {
    debug_assert!(y > 0.0);
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[inline]
pub(crate) fn silu_scalar(x: f64) -> f64 {
    x * sigmoid_scalar(x)
}

/// Padding mode for 1-d convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero-pad so the output has the input's length (odd kernels center).
    Same,
    /// No padding; output shrinks to `len - k + 1`.
    Valid,
}

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    c_out: usize,
    len: usize,
    k: usize,
    out_len: usize,
    pad_left: usize,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// Elementwise `x + s` with `s` a 1-element tensor.
    AddScalar(Var, Var),
    /// Elementwise `x * s` with `s` a 1-element tensor.
    MulScalar(Var, Var),
    AddConst(Var),
    MulConst(Var, f64),
    /// `x[c,t] + b[c]`.
    AddBias(Var, Var),
    Neg(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Sigmoid(Var),
    /// Caches `σ(x)` (its derivative), shared with the forward's exp.
    Softplus {
        x: Var,
        sig: Vec<f64>,
    },
    /// Caches `σ(x)` so the backward pass avoids re-exponentiating.
    Silu {
        x: Var,
        sig: Vec<f64>,
    },
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    DepthwiseConv1d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    SumAll(Var),
    MeanAll(Var),
    MaxAll {
        x: Var,
        argmax: usize,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    MaxAxis {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        window: usize,
        stride: usize,
    },
    Dot(Var, Var),
    ReverseTime(Var),
    Reshape(Var),
    RmsNorm {
        x: Var,
        gamma: Var,
        inv_rms: Vec<f64>,
    },
    Scan(Box<ScanNode>),
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    needs_grad: bool,
    op: Op,
}

/// Gradient tape. See the module docs for the lifecycle.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

/// Epsilon inside the RMS normalizer's square root.
pub const RMS_NORM_EPS: f64 = 1e-6;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, needs_grad: bool, op: Op) -> Var {
        assert!(
            !self.consumed,
            "tape already consumed by backward; build a fresh tape for a new forward pass"
        );
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            data,
            shape,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a tensor as a leaf; gradients flow into it iff
    /// `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.data.clone(), t.shape.clone(), t.requires_grad, Op::Leaf)
    }

    /// Non-differentiable scalar of shape `[1]`.
    pub fn literal(&mut self, value: f64) -> Var {
        self.push(vec![value], vec![1], false, Op::Leaf)
    }

    /// Non-differentiable leaf from raw parts.
    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<Var, TensorError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                len: data.len(),
                shape: shape.to_vec(),
                expected,
            });
        }
        Ok(self.push(data, shape.to_vec(), false, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Copies a value off the tape.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor {
            data: self.nodes[v.0].data.clone(),
            shape: self.nodes[v.0].shape.clone(),
            requires_grad: self.nodes[v.0].needs_grad,
        }
    }

    /// Accumulated gradient, if any reached this var during backward.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient with unreached vars reported as zeros.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        match self.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.nodes[v.0].data.len()],
        }
    }

    // ---- shape plumbing -------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    fn expect_scalar(&self, op: &'static str, s: Var) -> Result<(), TensorError> {
        if self.nodes[s.0].data.len() != 1 {
            return Err(TensorError::BadOperand {
                op,
                expected: "a 1-element scalar tensor",
                got: self.nodes[s.0].shape.clone(),
            });
        }
        Ok(())
    }

    fn expect_rank2(&self, op: &'static str, x: Var) -> Result<(usize, usize), TensorError> {
        match self.nodes[x.0].shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::BadOperand {
                op,
                expected: "a rank-2 tensor",
                got: self.nodes[x.0].shape.clone(),
            }),
        }
    }

    // ---- elementwise ----------------------------------------------------

    fn binary_map(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        self.same_shape(op_name, a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(data, shape, needs, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_map("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `x + s`, broadcasting the 1-element `s` over all of `x`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        self.expect_scalar("add_scalar", s)?;
        let sv = self.nodes[s.0].data[0];
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v + sv).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.nodes[x.0].needs_grad || self.nodes[s.0].needs_grad;
        Ok(self.push(data, shape, needs, Op::AddScalar(x, s)))
    }

    /// `x * s`, broadcasting the 1-element `s` over all of `x`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        self.expect_scalar("mul_scalar", s)?;
        let sv = self.nodes[s.0].data[0];
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v * sv).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.nodes[x.0].needs_grad || self.nodes[s.0].needs_grad;
        Ok(self.push(data, shape, needs, Op::MulScalar(x, s)))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v + c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.nodes[x.0].needs_grad;
        self.push(data, shape, needs, Op::AddConst(x))
    }

    pub fn mul_const(&mut self, x: Var, c: f64) -> Var {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.nodes[x.0].needs_grad;
        self.push(data, shape, needs, Op::MulConst(x, c))
    }

    /// `x[c,t] + b[c]` for `x: [C, L]`, `b: [C]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let (c, l) = self.expect_rank2("add_bias", x)?;
        if self.nodes[b.0].shape != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut data = self.nodes[x.0].data.clone();
        for ch in 0..c {
            let bias = self.nodes[b.0].data[ch];
            for v in &mut data[ch * l..(ch + 1) * l] {
                *v += bias;
            }
        }
        let needs = self.nodes[x.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(data, vec![c, l], needs, Op::AddBias(x, b)))
    }

    fn unary_map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| f(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.nodes[x.0].needs_grad;
        self.push(data, shape, needs, op)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary_map(x, |v| -v, Op::Neg(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary_map(x, f64::exp, Op::Exp(x))
    }

    /// Natural log; the caller guarantees positive inputs.
    pub fn ln(&mut self, x: Var) -> Var {
        self.unary_map(x, f64::ln, Op::Ln(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary_map(x, f64::abs, Op::Abs(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary_map(x, sigmoid_scalar, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let needs = self.nodes[x.0].needs_grad;
        let src = &self.nodes[x.0].data;
        let mut data = Vec::with_capacity(src.len());
        let mut sig = Vec::with_capacity(if needs { src.len() } else { 0 });
        if needs {
            for &v in src {
                let (y, s) = softplus_and_sigmoid(v);
                data.push(y);
                sig.push(s);
            }
        } else {
            data.extend(src.iter().map(|&v| softplus_scalar(v)));
        }
        let shape = self.nodes[x.0].shape.clone();
        self.push(data, shape, needs, Op::Softplus { x, sig })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let needs = self.nodes[x.0].needs_grad;
        let src = &self.nodes[x.0].data;
        let mut data = Vec::with_capacity(src.len());
        let mut sig = Vec::with_capacity(if needs { src.len() } else { 0 });
        if needs {
            for &v in src {
                let s = sigmoid_scalar(v);
                data.push(v * s);
                sig.push(s);
            }
        } else {
            data.extend(src.iter().map(|&v| silu_scalar(v)));
        }
        let shape = self.nodes[x.0].shape.clone();
        self.push(data, shape, needs, Op::Silu { x, sig })
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, ka) = self.expect_rank2("matmul", a)?;
        let (kb, n) = self.expect_rank2("matmul", b)?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut data = vec![0.0; m * n];
        kernels::matmul_nn_acc(&self.nodes[a.0].data, &self.nodes[b.0].data, &mut data, m, ka, n);
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(data, vec![m, n], needs, Op::Matmul { a, b, m, k: ka, n }))
    }

    fn conv_geometry(
        &self,
        op: &'static str,
        len: usize,
        k: usize,
        pad: Padding,
    ) -> Result<(usize, usize), TensorError> {
        if k == 0 || k > len {
            return Err(TensorError::BadArgument {
                op,
                detail: format!("kernel width {k} unusable for input length {len}"),
                shape: vec![len],
            });
        }
        if pad == Padding::Same && k % 2 == 0 {
            return Err(TensorError::BadArgument {
                op,
                detail: format!("same padding requires an odd kernel width, got {k}"),
                shape: vec![k],
            });
        }
        Ok(kernels::conv_geometry(len, k, pad == Padding::Same))
    }

    /// 1-d convolution: `x: [C_in, L]`, `w: [C_out, C_in, K]` → `[C_out, L']`.
    pub fn conv1d(&mut self, x: Var, w: Var, pad: Padding) -> Result<Var, TensorError> {
        let (c_in, len) = self.expect_rank2("conv1d", x)?;
        let (c_out, wc_in, k) = match self.nodes[w.0].shape[..] {
            [o, i, k] => (o, i, k),
            _ => {
                return Err(TensorError::BadOperand {
                    op: "conv1d",
                    expected: "a rank-3 [c_out, c_in, k] kernel",
                    got: self.nodes[w.0].shape.clone(),
                })
            }
        };
        if wc_in != c_in {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[w.0].shape.clone(),
            });
        }
        let (out_len, pad_left) = self.conv_geometry("conv1d", len, k, pad)?;
        let geom = ConvGeom {
            c_in,
            c_out,
            len,
            k,
            out_len,
            pad_left,
        };
        let mut data = vec![0.0; c_out * out_len];
        kernels::conv1d_acc(
            &self.nodes[x.0].data,
            &self.nodes[w.0].data,
            &mut data,
            c_in,
            c_out,
            len,
            k,
            out_len,
            pad_left,
        );
        let needs = self.nodes[x.0].needs_grad || self.nodes[w.0].needs_grad;
        Ok(self.push(data, vec![c_out, out_len], needs, Op::Conv1d { x, w, geom }))
    }

    /// Depthwise 1-d convolution: `x: [C, L]`, `w: [C, K]` → `[C, L']`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, pad: Padding) -> Result<Var, TensorError> {
        let (c, len) = self.expect_rank2("depthwise_conv1d", x)?;
        let (wc, k) = self.expect_rank2("depthwise_conv1d", w)?;
        if wc != c {
            return Err(TensorError::ShapeMismatch {
                op: "depthwise_conv1d",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[w.0].shape.clone(),
            });
        }
        let (out_len, pad_left) = self.conv_geometry("depthwise_conv1d", len, k, pad)?;
        let geom = ConvGeom {
            c_in: c,
            c_out: c,
            len,
            k,
            out_len,
            pad_left,
        };
        let mut data = vec![0.0; c * out_len];
        kernels::depthwise_conv1d_acc(
            &self.nodes[x.0].data,
            &self.nodes[w.0].data,
            &mut data,
            c,
            len,
            k,
            out_len,
            pad_left,
        );
        let needs = self.nodes[x.0].needs_grad || self.nodes[w.0].needs_grad;
        Ok(self.push(
            data,
            vec![c, out_len],
            needs,
            Op::DepthwiseConv1d { x, w, geom },
        ))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let needs = self.nodes[x.0].needs_grad;
        self.push(vec![s], vec![1], needs, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].data.len() as f64;
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let needs = self.nodes[x.0].needs_grad;
        self.push(vec![s / n], vec![1], needs, Op::MeanAll(x))
    }

    pub fn max_all(&mut self, x: Var) -> Var {
        let (argmax, &m) = self.nodes[x.0]
            .data
            .iter()
            .enumerate()
            .reduce(|best, cur| if cur.1 > best.1 { cur } else { best })
            .expect("max_all of empty tensor");
        let needs = self.nodes[x.0].needs_grad;
        self.push(vec![m], vec![1], needs, Op::MaxAll { x, argmax })
    }

    fn axis_dims(
        &self,
        op: &'static str,
        x: Var,
        axis: usize,
    ) -> Result<(usize, usize), TensorError> {
        let (r, c) = self.expect_rank2(op, x)?;
        if axis > 1 {
            return Err(TensorError::BadArgument {
                op,
                detail: format!("axis {axis} out of range for rank 2"),
                shape: self.nodes[x.0].shape.clone(),
            });
        }
        Ok((r, c))
    }

    /// Sum over `axis` of a rank-2 tensor.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let (r, c) = self.axis_dims("sum_axis", x, axis)?;
        let xd = &self.nodes[x.0].data;
        let (data, out_len) = if axis == 0 {
            let mut out = vec![0.0; c];
            for row in xd.chunks_exact(c) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            (out, c)
        } else {
            (xd.chunks_exact(c).map(|row| row.iter().sum()).collect(), r)
        };
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(data, vec![out_len], needs, Op::SumAxis { x, axis }))
    }

    /// Mean over `axis` of a rank-2 tensor.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let (r, c) = self.axis_dims("mean_axis", x, axis)?;
        let denom = if axis == 0 { r as f64 } else { c as f64 };
        let sum = self.sum_axis(x, axis)?;
        // Reuse the sum node, then rescale; a dedicated node keeps backward
        // trivial at the cost of one extra tape entry.
        let _ = sum;
        let xd = &self.nodes[x.0].data;
        let (data, out_len) = if axis == 0 {
            let mut out = vec![0.0; c];
            for row in xd.chunks_exact(c) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            for o in &mut out {
                *o /= denom;
            }
            (out, c)
        } else {
            (
                xd.chunks_exact(c)
                    .map(|row| row.iter().sum::<f64>() / denom)
                    .collect(),
                r,
            )
        };
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(data, vec![out_len], needs, Op::MeanAxis { x, axis }))
    }

    /// Max over `axis` of a rank-2 tensor.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let (r, c) = self.axis_dims("max_axis", x, axis)?;
        let xd = &self.nodes[x.0].data;
        let out_len = if axis == 0 { c } else { r };
        let mut data = vec![f64::NEG_INFINITY; out_len];
        let mut argmax = vec![0usize; out_len];
        for i in 0..r {
            for j in 0..c {
                let o = if axis == 0 { j } else { i };
                let v = xd[i * c + j];
                if v > data[o] {
                    data[o] = v;
                    argmax[o] = i * c + j;
                }
            }
        }
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(data, vec![out_len], needs, Op::MaxAxis { x, argmax }))
    }

    /// Non-overlapping-or-strided average pooling over the time axis of
    /// `x: [C, L]` → `[C, (L - window)/stride + 1]`.
    pub fn avg_pool(&mut self, x: Var, window: usize, stride: usize) -> Result<Var, TensorError> {
        let (c, l) = self.expect_rank2("avg_pool", x)?;
        if window == 0 || stride == 0 || window > l {
            return Err(TensorError::BadArgument {
                op: "avg_pool",
                detail: format!("window {window} / stride {stride} unusable for length {l}"),
                shape: self.nodes[x.0].shape.clone(),
            });
        }
        let out_len = (l - window) / stride + 1;
        let xd = &self.nodes[x.0].data;
        let mut data = vec![0.0; c * out_len];
        for ch in 0..c {
            let row = &xd[ch * l..(ch + 1) * l];
            for t in 0..out_len {
                let start = t * stride;
                data[ch * out_len + t] =
                    row[start..start + window].iter().sum::<f64>() / window as f64;
            }
        }
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(
            data,
            vec![c, out_len],
            needs,
            Op::AvgPool { x, window, stride },
        ))
    }

    /// Scalar inner product of two same-shape tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("dot", a, b)?;
        let d = kernels::dot(&self.nodes[a.0].data, &self.nodes[b.0].data);
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        Ok(self.push(vec![d], vec![1], needs, Op::Dot(a, b)))
    }

    // ---- structural -----------------------------------------------------

    /// Reverses the time (last) axis of a rank-1 or rank-2 tensor.
    pub fn reverse_time(&mut self, x: Var) -> Result<Var, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        let data = match shape[..] {
            [_] => {
                let mut d = self.nodes[x.0].data.clone();
                d.reverse();
                d
            }
            [c, l] => {
                let mut d = self.nodes[x.0].data.clone();
                for ch in 0..c {
                    d[ch * l..(ch + 1) * l].reverse();
                }
                d
            }
            _ => {
                return Err(TensorError::BadOperand {
                    op: "reverse_time",
                    expected: "a rank-1 or rank-2 tensor",
                    got: shape,
                })
            }
        };
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(data, shape, needs, Op::ReverseTime(x)))
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let expected: usize = shape.iter().product();
        if self.nodes[x.0].data.len() != expected {
            return Err(TensorError::LengthMismatch {
                len: self.nodes[x.0].data.len(),
                shape: shape.to_vec(),
                expected,
            });
        }
        let data = self.nodes[x.0].data.clone();
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(data, shape.to_vec(), needs, Op::Reshape(x)))
    }

    // ---- fused domain ops ------------------------------------------------

    /// RMS normalization over the channel axis of `x: [C, L]`, per time
    /// step, with a learned per-channel gain: `y[c,t] = g[c]·x[c,t]·r[t]`,
    /// `r[t] = (mean_c x[c,t]² + ε)^{-1/2}`.
    pub fn rms_norm(&mut self, x: Var, gamma: Var) -> Result<Var, TensorError> {
        let (c, l) = self.expect_rank2("rms_norm", x)?;
        if self.nodes[gamma.0].shape != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "rms_norm",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: self.nodes[gamma.0].shape.clone(),
            });
        }
        let xd = &self.nodes[x.0].data;
        let g = &self.nodes[gamma.0].data;
        let mut mean_sq = vec![0.0; l];
        for row in xd.chunks_exact(l) {
            for (m, v) in mean_sq.iter_mut().zip(row) {
                *m += v * v;
            }
        }
        let inv_rms: Vec<f64> = mean_sq
            .iter()
            .map(|&m| 1.0 / (m / c as f64 + RMS_NORM_EPS).sqrt())
            .collect();
        let mut data = vec![0.0; c * l];
        for ch in 0..c {
            let gain = g[ch];
            let x_row = &xd[ch * l..(ch + 1) * l];
            let y_row = &mut data[ch * l..(ch + 1) * l];
            for ((y, &xv), &r) in y_row.iter_mut().zip(x_row).zip(&inv_rms) {
                *y = gain * xv * r;
            }
        }
        let needs = self.nodes[x.0].needs_grad || self.nodes[gamma.0].needs_grad;
        Ok(self.push(data, vec![c, l], needs, Op::RmsNorm { x, gamma, inv_rms }))
    }

    /// Fused selective-state-space scan. Shapes: `u, delta: [D, L]`,
    /// `b, c: [N, L]`, `a: [D, N]`; output `[D, L]`. See
    /// `crate::ssm::scan` for the recurrence and its gradient.
    pub fn selective_scan(
        &mut self,
        u: Var,
        delta: Var,
        b: Var,
        c: Var,
        a: Var,
    ) -> Result<Var, TensorError> {
        let (d_ch, l) = self.expect_rank2("selective_scan", u)?;
        self.same_shape("selective_scan", u, delta)?;
        let (n_b, l_b) = self.expect_rank2("selective_scan", b)?;
        self.same_shape("selective_scan", b, c)?;
        let (d_a, n_a) = self.expect_rank2("selective_scan", a)?;
        if l_b != l || d_a != d_ch || n_a != n_b {
            return Err(TensorError::ShapeMismatch {
                op: "selective_scan",
                lhs: vec![d_ch, n_b, l],
                rhs: self.nodes[a.0].shape.clone(),
            });
        }
        let dims = ScanDims {
            channels: d_ch,
            state: n_b,
            len: l,
        };
        let (y, cache) = scan::forward_cached(
            &self.nodes[u.0].data,
            &self.nodes[delta.0].data,
            &self.nodes[b.0].data,
            &self.nodes[c.0].data,
            &self.nodes[a.0].data,
            dims,
        )?;
        let needs = [u, delta, b, c, a]
            .iter()
            .any(|v| self.nodes[v.0].needs_grad);
        let node = ScanNode {
            u,
            delta,
            b,
            c,
            a,
            dims,
            cache,
        };
        Ok(self.push(y, vec![d_ch, l], needs, Op::Scan(Box::new(node))))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar loss. Consumes the tape: a second call
    /// (or further forward ops) is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        self.consumed = true;
        self.grads = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            self.grads[loss.0] = Some(vec![1.0]);
        }

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(dy) = self.grads[i].take() else {
                continue;
            };
            self.apply_vjp(i, &dy);
            self.grads[i] = Some(dy);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Adds `contribute`'s output into the gradient buffer of `v`.
    fn acc(&mut self, v: Var, contribute: impl FnOnce(&[Node], &mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let mut buf = self.grads[v.0]
            .take()
            .unwrap_or_else(|| vec![0.0; self.nodes[v.0].data.len()]);
        contribute(&self.nodes, &mut buf);
        self.grads[v.0] = Some(buf);
    }

    fn apply_vjp(&mut self, i: usize, dy: &[f64]) {
        // `Op` owns no `Var` back-references to `i` itself, and all input
        // indices are strictly smaller than `i`, so taking the op out for
        // the duration of the dispatch is safe.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(*a, |_, g| kernels::axpy(1.0, dy, g));
                self.acc(*b, |_, g| kernels::axpy(1.0, dy, g));
            }
            Op::Sub(a, b) => {
                self.acc(*a, |_, g| kernels::axpy(1.0, dy, g));
                self.acc(*b, |_, g| kernels::axpy(-1.0, dy, g));
            }
            Op::Mul(a, b) => {
                self.acc(*a, |nodes, g| {
                    for ((gi, di), bi) in g.iter_mut().zip(dy).zip(&nodes[b.0].data) {
                        *gi += di * bi;
                    }
                });
                self.acc(*b, |nodes, g| {
                    for ((gi, di), ai) in g.iter_mut().zip(dy).zip(&nodes[a.0].data) {
                        *gi += di * ai;
                    }
                });
            }
            Op::Div(a, b) => {
                self.acc(*a, |nodes, g| {
                    for ((gi, di), bi) in g.iter_mut().zip(dy).zip(&nodes[b.0].data) {
                        *gi += di / bi;
                    }
                });
                // d(a/b)/db = -a/b² = -y/b
                self.acc(*b, |nodes, g| {
                    let y = &nodes[i].data;
                    for (((gi, di), yi), bi) in g.iter_mut().zip(dy).zip(y).zip(&nodes[b.0].data) {
                        *gi -= di * yi / bi;
                    }
                });
            }
            Op::AddScalar(x, s) => {
                self.acc(*x, |_, g| kernels::axpy(1.0, dy, g));
                self.acc(*s, |_, g| g[0] += dy.iter().sum::<f64>());
            }
            Op::MulScalar(x, s) => {
                self.acc(*x, |nodes, g| {
                    kernels::axpy(nodes[s.0].data[0], dy, g);
                });
                self.acc(*s, |nodes, g| {
                    g[0] += kernels::dot(dy, &nodes[x.0].data);
                });
            }
            Op::AddConst(x) => {
                self.acc(*x, |_, g| kernels::axpy(1.0, dy, g));
            }
            Op::MulConst(x, c) => {
                let c = *c;
                self.acc(*x, |_, g| kernels::axpy(c, dy, g));
            }
            Op::AddBias(x, b) => {
                self.acc(*x, |_, g| kernels::axpy(1.0, dy, g));
                let l = self.nodes[i].shape[1];
                self.acc(*b, |_, g| {
                    for (gc, dy_row) in g.iter_mut().zip(dy.chunks_exact(l)) {
                        *gc += dy_row.iter().sum::<f64>();
                    }
                });
            }
            Op::Neg(x) => {
                self.acc(*x, |_, g| kernels::axpy(-1.0, dy, g));
            }
            Op::Exp(x) => {
                self.acc(*x, |nodes, g| {
                    for ((gi, di), yi) in g.iter_mut().zip(dy).zip(&nodes[i].data) {
                        *gi += di * yi;
                    }
                });
            }
            Op::Ln(x) => {
                self.acc(*x, |nodes, g| {
                    for ((gi, di), xi) in g.iter_mut().zip(dy).zip(&nodes[x.0].data) {
                        *gi += di / xi;
                    }
                });
            }
            Op::Abs(x) => {
                self.acc(*x, |nodes, g| {
                    for ((gi, di), xi) in g.iter_mut().zip(dy).zip(&nodes[x.0].data) {
                        *gi += di * if *xi > 0.0 {
                            1.0
                        } else if *xi < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                });
            }
            Op::Sigmoid(x) => {
                self.acc(*x, |nodes, g| {
                    for ((gi, di), yi) in g.iter_mut().zip(dy).zip(&nodes[i].data) {
                        *gi += di * yi * (1.0 - yi);
                    }
                });
            }
            Op::Softplus { x, sig } => {
                self.acc(*x, |_, g| {
                    for ((gi, di), si) in g.iter_mut().zip(dy).zip(sig) {
                        *gi += di * si;
                    }
                });
            }
            Op::Silu { x, sig } => {
                self.acc(*x, |nodes, g| {
                    for (((gi, di), xi), si) in
                        g.iter_mut().zip(dy).zip(&nodes[x.0].data).zip(sig)
                    {
                        *gi += di * si * (1.0 + xi * (1.0 - si));
                    }
                });
            }
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                self.acc(*a, |nodes, g| {
                    kernels::matmul_nt_acc(dy, &nodes[b.0].data, g, m, n, k);
                });
                self.acc(*b, |nodes, g| {
                    kernels::matmul_tn_acc(&nodes[a.0].data, dy, g, m, k, n);
                });
            }
            Op::Conv1d { x, w, geom } => {
                let ConvGeom {
                    c_in,
                    c_out,
                    len,
                    k,
                    out_len,
                    pad_left,
                } = *geom;
                self.acc(*x, |nodes, g| {
                    kernels::conv1d_dx_acc(
                        dy,
                        &nodes[w.0].data,
                        g,
                        c_in,
                        c_out,
                        len,
                        k,
                        out_len,
                        pad_left,
                    );
                });
                self.acc(*w, |nodes, g| {
                    kernels::conv1d_dw_acc(
                        &nodes[x.0].data,
                        dy,
                        g,
                        c_in,
                        c_out,
                        len,
                        k,
                        out_len,
                        pad_left,
                    );
                });
            }
            Op::DepthwiseConv1d { x, w, geom } => {
                let ConvGeom {
                    c_in: c,
                    len,
                    k,
                    out_len,
                    pad_left,
                    ..
                } = *geom;
                self.acc(*x, |nodes, g| {
                    kernels::depthwise_conv1d_dx_acc(
                        dy,
                        &nodes[w.0].data,
                        g,
                        c,
                        len,
                        k,
                        out_len,
                        pad_left,
                    );
                });
                self.acc(*w, |nodes, g| {
                    kernels::depthwise_conv1d_dw_acc(
                        &nodes[x.0].data,
                        dy,
                        g,
                        c,
                        len,
                        k,
                        out_len,
                        pad_left,
                    );
                });
            }
            Op::SumAll(x) => {
                let d = dy[0];
                self.acc(*x, |_, g| {
                    for gi in g.iter_mut() {
                        *gi += d;
                    }
                });
            }
            Op::MeanAll(x) => {
                let n = self.nodes[x.0].data.len() as f64;
                let d = dy[0] / n;
                self.acc(*x, |_, g| {
                    for gi in g.iter_mut() {
                        *gi += d;
                    }
                });
            }
            Op::MaxAll { x, argmax } => {
                let (d, am) = (dy[0], *argmax);
                self.acc(*x, |_, g| g[am] += d);
            }
            Op::SumAxis { x, axis } => {
                let axis = *axis;
                let c = self.nodes[x.0].shape[1];
                self.acc(*x, |_, g| {
                    for (row, g_row) in g.chunks_exact_mut(c).enumerate() {
                        if axis == 0 {
                            kernels::axpy(1.0, dy, g_row);
                        } else {
                            for gi in g_row.iter_mut() {
                                *gi += dy[row];
                            }
                        }
                    }
                });
            }
            Op::MeanAxis { x, axis } => {
                let axis = *axis;
                let (r, c) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let denom = if axis == 0 { r as f64 } else { c as f64 };
                self.acc(*x, |_, g| {
                    for (row, g_row) in g.chunks_exact_mut(c).enumerate() {
                        if axis == 0 {
                            kernels::axpy(1.0 / denom, dy, g_row);
                        } else {
                            let d = dy[row] / denom;
                            for gi in g_row.iter_mut() {
                                *gi += d;
                            }
                        }
                    }
                });
            }
            Op::MaxAxis { x, argmax } => {
                self.acc(*x, |_, g| {
                    for (&am, &d) in argmax.iter().zip(dy) {
                        g[am] += d;
                    }
                });
            }
            Op::AvgPool { x, window, stride } => {
                let (window, stride) = (*window, *stride);
                let l = self.nodes[x.0].shape[1];
                let out_len = self.nodes[i].shape[1];
                let scale = 1.0 / window as f64;
                self.acc(*x, |_, g| {
                    for (ch, g_row) in g.chunks_exact_mut(l).enumerate() {
                        let dy_row = &dy[ch * out_len..(ch + 1) * out_len];
                        for (t, &d) in dy_row.iter().enumerate() {
                            for gi in &mut g_row[t * stride..t * stride + window] {
                                *gi += d * scale;
                            }
                        }
                    }
                });
            }
            Op::Dot(a, b) => {
                let d = dy[0];
                self.acc(*a, |nodes, g| kernels::axpy(d, &nodes[b.0].data, g));
                self.acc(*b, |nodes, g| kernels::axpy(d, &nodes[a.0].data, g));
            }
            Op::ReverseTime(x) => {
                let shape = &self.nodes[x.0].shape;
                let (c, l) = if shape.len() == 1 {
                    (1, shape[0])
                } else {
                    (shape[0], shape[1])
                };
                self.acc(*x, |_, g| {
                    for ch in 0..c {
                        let g_row = &mut g[ch * l..(ch + 1) * l];
                        let dy_row = &dy[ch * l..(ch + 1) * l];
                        for (gi, di) in g_row.iter_mut().zip(dy_row.iter().rev()) {
                            *gi += di;
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                self.acc(*x, |_, g| kernels::axpy(1.0, dy, g));
            }
            Op::RmsNorm { x, gamma, inv_rms } => {
                let (c, l) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                // s[t] = Σ_c dy[c,t]·g[c]·x[c,t]
                let mut s = vec![0.0; l];
                {
                    let xd = &self.nodes[x.0].data;
                    let gd = &self.nodes[gamma.0].data;
                    for ch in 0..c {
                        let gain = gd[ch];
                        let x_row = &xd[ch * l..(ch + 1) * l];
                        let dy_row = &dy[ch * l..(ch + 1) * l];
                        for ((si, &di), &xi) in s.iter_mut().zip(dy_row).zip(x_row) {
                            *si += di * gain * xi;
                        }
                    }
                }
                self.acc(*x, |nodes, g| {
                    let gd = &nodes[gamma.0].data;
                    let xd = &nodes[x.0].data;
                    for ch in 0..c {
                        let gain = gd[ch];
                        let g_row = &mut g[ch * l..(ch + 1) * l];
                        let x_row = &xd[ch * l..(ch + 1) * l];
                        let dy_row = &dy[ch * l..(ch + 1) * l];
                        for t in 0..l {
                            let r = inv_rms[t];
                            g_row[t] +=
                                r * gain * dy_row[t] - r * r * r / c as f64 * x_row[t] * s[t];
                        }
                    }
                });
                self.acc(*gamma, |nodes, g| {
                    let xd = &nodes[x.0].data;
                    for ch in 0..c {
                        let x_row = &xd[ch * l..(ch + 1) * l];
                        let dy_row = &dy[ch * l..(ch + 1) * l];
                        let mut acc = 0.0;
                        for ((&di, &xi), &r) in dy_row.iter().zip(x_row).zip(inv_rms.iter()) {
                            acc += di * xi * r;
                        }
                        g[ch] += acc;
                    }
                });
            }
            Op::Scan(node) => {
                let grads = scan::backward(
                    dy,
                    &self.nodes[node.u.0].data,
                    &self.nodes[node.delta.0].data,
                    &self.nodes[node.b.0].data,
                    &self.nodes[node.c.0].data,
                    &self.nodes[node.a.0].data,
                    node.dims,
                    &node.cache,
                    self.wants(node.u),
                    self.wants(node.delta),
                    self.wants(node.b),
                    self.wants(node.c),
                    self.wants(node.a),
                );
                if let Some(du) = &grads.du {
                    self.acc(node.u, |_, g| kernels::axpy(1.0, du, g));
                }
                if let Some(dd) = &grads.ddelta {
                    self.acc(node.delta, |_, g| kernels::axpy(1.0, dd, g));
                }
                if let Some(db) = &grads.db {
                    self.acc(node.b, |_, g| kernels::axpy(1.0, db, g));
                }
                if let Some(dc) = &grads.dc {
                    self.acc(node.c, |_, g| kernels::axpy(1.0, dc, g));
                }
                if let Some(da) = &grads.da {
                    self.acc(node.a, |_, g| kernels::axpy(1.0, da, g));
                }
            }
        }
        self.nodes[i].op = op;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_rejects_mismatched_shapes_reporting_both() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1.0, 2.0], &[2]).unwrap();
        let b = tape.constant(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let err = tape.add(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "add",
                lhs: vec![2],
                rhs: vec![3],
            }
        );
    }

    #[test]
    fn matmul_rejects_inner_dim_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![0.0; 6], &[2, 3]).unwrap();
        let b = tape.constant(vec![0.0; 8], &[4, 2]).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { op: "matmul", .. }));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let t = Tensor::from_slice(&[1.0, 2.0]).with_grad();
        let x = tape.leaf(&t);
        let y = tape.mul_const(x, 2.0);
        let err = tape.backward(y).unwrap_err();
        assert_eq!(err, TensorError::NonScalarLoss(vec![2]));
    }

    #[test]
    fn backward_consumes_the_tape() {
        let mut tape = Tape::new();
        let t = Tensor::from_slice(&[1.0, 2.0]).with_grad();
        let x = tape.leaf(&t);
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.backward(loss).unwrap_err(), TensorError::TapeConsumed);
    }

    #[test]
    fn gradients_accumulate_across_shared_uses() {
        // loss = sum(x·x): d/dx = 2x via two accumulated contributions.
        let mut tape = Tape::new();
        let t = Tensor::from_slice(&[1.5, -2.0, 3.0]).with_grad();
        let x = tape.leaf(&t);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, -4.0, 6.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let t = Tensor::from_slice(&[1.0, 2.0]).with_grad();
        let x = tape.leaf(&t);
        let c = tape.constant(vec![5.0, 7.0], &[2]).unwrap();
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[5.0, 7.0]);
        assert_eq!(tape.grad(c), None);
        assert_eq!(tape.grad_or_zeros(c), vec![0.0, 0.0]);
    }

    #[test]
    fn unreached_leaf_has_zero_grad() {
        let mut tape = Tape::new();
        let t = Tensor::from_slice(&[1.0]).with_grad();
        let used = tape.leaf(&t);
        let unused = tape.leaf(&t);
        let loss = tape.sum_all(used);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(unused), None);
        assert_eq!(tape.grad_or_zeros(unused), vec![0.0]);
    }

    #[test]
    fn reverse_time_reverses_rows_independently() {
        let mut tape = Tape::new();
        let x = tape
            .constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3])
            .unwrap();
        let r = tape.reverse_time(x).unwrap();
        assert_eq!(tape.value(r), &[3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
        // Involution: reversing twice restores the input.
        let rr = tape.reverse_time(r).unwrap();
        assert_eq!(tape.value(rr), tape.value(x));
    }

    #[test]
    fn rms_norm_scales_each_time_step_to_unit_rms() {
        let mut tape = Tape::new();
        // Two channels, one time step: rms = sqrt((9+16)/2) = 3.5355…
        let x = tape.constant(vec![3.0, 4.0], &[2, 1]).unwrap();
        let g = tape.constant(vec![1.0, 1.0], &[2]).unwrap();
        let y = tape.rms_norm(x, g).unwrap();
        let rms = ((9.0 + 16.0) / 2.0_f64 + RMS_NORM_EPS).sqrt();
        assert!((tape.value(y)[0] - 3.0 / rms).abs() < 1e-12);
        assert!((tape.value(y)[1] - 4.0 / rms).abs() < 1e-12);
    }

    #[test]
    fn avg_pool_windows_and_strides() {
        let mut tape = Tape::new();
        let x = tape
            .constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[1, 6])
            .unwrap();
        let y = tape.avg_pool(x, 2, 2).unwrap();
        assert_eq!(tape.value(y), &[1.5, 3.5, 5.5]);
        assert_eq!(tape.shape(y), &[1, 3]);
    }

    #[test]
    fn max_ops_track_argmax() {
        let mut tape = Tape::new();
        let t = Tensor::new(vec![1.0, 9.0, 2.0, 3.0, -1.0, 4.0], &[2, 3])
            .unwrap()
            .with_grad();
        let x = tape.leaf(&t);
        let m = tape.max_all(x);
        assert_eq!(tape.value(m), &[9.0]);
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }
}
