//! Finite-difference verification of every tape operation's gradient,
//! plus end-to-end checks through the fused scan, the Mamba block, and
//! both model forwards. The central-difference oracle is independent of
//! the backward implementation, so these tests pin the VJPs.

use ppg_denoise_core::models::{
    dpnet_forward, hrp_forward, DPNetConfig, DPNetParams, HRPConfig, HRPParams,
};
use ppg_denoise_core::ssm::{bmamba, mamba_block, MambaBlockParams};
use ppg_denoise_core::tensor::gradcheck::{check_default, check_gradients};
use ppg_denoise_core::tensor::{Padding, Tape, Tensor, Var, VarRegistry};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic quasi-random filler: bounded, non-repeating, sign-mixed.
fn fill(n: usize, phase: f64) -> Vec<f64> {
    (0..n)
        .map(|i| (i as f64 * 0.731 + phase).sin() * 1.3 + 0.1)
        .collect()
}

fn grad_tensor(shape: &[usize], phase: f64) -> Tensor {
    Tensor::new(fill(shape.iter().product(), phase), shape)
        .unwrap()
        .with_grad()
}

/// Reduces a non-scalar output with fixed, element-varying weights so
/// gradient errors cannot cancel inside a plain sum.
fn weighted_sum(tape: &mut Tape, y: Var) -> Var {
    let n = tape.value(y).len();
    let w: Vec<f64> = (0..n).map(|i| 0.4 + (i as f64 * 1.917).sin()).collect();
    let shape = tape.shape(y).to_vec();
    let wv = tape.constant(w, &shape).unwrap();
    tape.dot(y, wv).unwrap()
}

#[test]
fn grad_elementwise_binary_ops() {
    let a = grad_tensor(&[2, 5], 0.0);
    let b = grad_tensor(&[2, 5], 3.0);
    check_default(
        |t, v| {
            let y = t.add(v[0], v[1]).unwrap();
            weighted_sum(t, y)
        },
        &[a.clone(), b.clone()],
    )
    .unwrap();
    check_default(
        |t, v| {
            let y = t.sub(v[0], v[1]).unwrap();
            weighted_sum(t, y)
        },
        &[a.clone(), b.clone()],
    )
    .unwrap();
    check_default(
        |t, v| {
            let y = t.mul(v[0], v[1]).unwrap();
            weighted_sum(t, y)
        },
        &[a.clone(), b.clone()],
    )
    .unwrap();
    // Keep denominators away from zero for div.
    let denom = Tensor::new(
        fill(10, 1.0).iter().map(|v| v + 2.5).collect(),
        &[2, 5],
    )
    .unwrap()
    .with_grad();
    check_default(
        |t, v| {
            let y = t.div(v[0], v[1]).unwrap();
            weighted_sum(t, y)
        },
        &[a, denom],
    )
    .unwrap();
}

#[test]
fn grad_scalar_broadcast_and_const_ops() {
    let x = grad_tensor(&[3, 4], 0.5);
    let s = Tensor::scalar(0.75).with_grad();
    check_default(
        |t, v| {
            let y = t.add_scalar(v[0], v[1]).unwrap();
            weighted_sum(t, y)
        },
        &[x.clone(), s.clone()],
    )
    .unwrap();
    check_default(
        |t, v| {
            let y = t.mul_scalar(v[0], v[1]).unwrap();
            weighted_sum(t, y)
        },
        &[x.clone(), s],
    )
    .unwrap();
    check_default(
        |t, v| {
            let y = t.add_const(v[0], 1.7);
            let y = t.mul_const(y, -0.6);
            weighted_sum(t, y)
        },
        &[x],
    )
    .unwrap();
}

#[test]
fn grad_unary_ops() {
    let x = grad_tensor(&[2, 6], 0.2);
    for op in ["neg", "exp", "sigmoid", "softplus", "silu"] {
        check_default(
            |t, v| {
                let y = match op {
                    "neg" => t.neg(v[0]),
                    "exp" => t.exp(v[0]),
                    "sigmoid" => t.sigmoid(v[0]),
                    "softplus" => t.softplus(v[0]),
                    _ => t.silu(v[0]),
                };
                weighted_sum(t, y)
            },
            &[x.clone()],
        )
        .unwrap_or_else(|e| panic!("{op}: {e}"));
    }
    // ln needs positive inputs, abs needs inputs away from 0.
    let pos = Tensor::new(fill(12, 0.4).iter().map(|v| v.abs() + 0.5).collect(), &[2, 6])
        .unwrap()
        .with_grad();
    check_default(
        |t, v| {
            let y = t.ln(v[0]);
            weighted_sum(t, y)
        },
        &[pos.clone()],
    )
    .unwrap();
    check_default(
        |t, v| {
            let y = t.abs(v[0]);
            weighted_sum(t, y)
        },
        &[pos],
    )
    .unwrap();
}

#[test]
fn grad_add_bias() {
    let x = grad_tensor(&[3, 7], 0.1);
    let b = grad_tensor(&[3], 2.2);
    check_default(
        |t, v| {
            let y = t.add_bias(v[0], v[1]).unwrap();
            weighted_sum(t, y)
        },
        &[x, b],
    )
    .unwrap();
}

#[test]
fn grad_matmul() {
    let a = grad_tensor(&[3, 4], 0.0);
    let b = grad_tensor(&[4, 5], 1.0);
    check_default(
        |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            weighted_sum(t, y)
        },
        &[a, b],
    )
    .unwrap();
}

#[test]
fn grad_conv1d_same_and_valid() {
    let x = grad_tensor(&[2, 12], 0.3);
    let w = grad_tensor(&[3, 2, 5], 0.9);
    for pad in [Padding::Same, Padding::Valid] {
        check_default(
            |t, v| {
                let y = t.conv1d(v[0], v[1], pad).unwrap();
                weighted_sum(t, y)
            },
            &[x.clone(), w.clone()],
        )
        .unwrap_or_else(|e| panic!("{pad:?}: {e}"));
    }
}

#[test]
fn grad_depthwise_conv1d() {
    let x = grad_tensor(&[3, 10], 0.6);
    let w = grad_tensor(&[3, 3], 1.4);
    for pad in [Padding::Same, Padding::Valid] {
        check_default(
            |t, v| {
                let y = t.depthwise_conv1d(v[0], v[1], pad).unwrap();
                weighted_sum(t, y)
            },
            &[x.clone(), w.clone()],
        )
        .unwrap_or_else(|e| panic!("{pad:?}: {e}"));
    }
}

#[test]
fn grad_reductions() {
    let x = grad_tensor(&[3, 5], 0.8);
    check_default(|t, v| t.sum_all(v[0]), &[x.clone()]).unwrap();
    check_default(|t, v| t.mean_all(v[0]), &[x.clone()]).unwrap();
    check_default(|t, v| t.max_all(v[0]), &[x.clone()]).unwrap();
    for axis in [0, 1] {
        check_default(
            |t, v| {
                let y = t.sum_axis(v[0], axis).unwrap();
                weighted_sum(t, y)
            },
            &[x.clone()],
        )
        .unwrap();
        check_default(
            |t, v| {
                let y = t.mean_axis(v[0], axis).unwrap();
                weighted_sum(t, y)
            },
            &[x.clone()],
        )
        .unwrap();
        check_default(
            |t, v| {
                let y = t.max_axis(v[0], axis).unwrap();
                weighted_sum(t, y)
            },
            &[x.clone()],
        )
        .unwrap();
    }
}

#[test]
fn grad_avg_pool_with_overlap() {
    let x = grad_tensor(&[2, 11], 0.45);
    check_default(
        |t, v| {
            let y = t.avg_pool(v[0], 3, 2).unwrap();
            weighted_sum(t, y)
        },
        &[x],
    )
    .unwrap();
}

#[test]
fn grad_dot_reverse_reshape() {
    let a = grad_tensor(&[9], 0.0);
    let b = grad_tensor(&[9], 2.0);
    check_default(|t, v| t.dot(v[0], v[1]).unwrap(), &[a.clone(), b]).unwrap();
    check_default(
        |t, v| {
            let y = t.reverse_time(v[0]).unwrap();
            weighted_sum(t, y)
        },
        &[grad_tensor(&[2, 6], 1.1)],
    )
    .unwrap();
    check_default(
        |t, v| {
            let y = t.reshape(v[0], &[3, 3]).unwrap();
            let z = t.mul(y, y).unwrap();
            weighted_sum(t, z)
        },
        &[a],
    )
    .unwrap();
}

#[test]
fn grad_rms_norm() {
    let x = grad_tensor(&[4, 6], 0.7);
    let g = grad_tensor(&[4], 1.9);
    check_default(
        |t, v| {
            let y = t.rms_norm(v[0], v[1]).unwrap();
            weighted_sum(t, y)
        },
        &[x, g],
    )
    .unwrap();
}

#[test]
fn grad_selective_scan_matches_finite_differences() {
    // D=2, N=3, L=6 — all five inputs differentiable.
    let u = grad_tensor(&[2, 6], 0.0);
    let delta = Tensor::new(
        fill(12, 0.5).iter().map(|v| 0.05 + 0.03 * v.abs()).collect(),
        &[2, 6],
    )
    .unwrap()
    .with_grad();
    let b = grad_tensor(&[3, 6], 1.0);
    let c = grad_tensor(&[3, 6], 2.0);
    let a = Tensor::new(vec![-0.5, -1.0, -2.0, -0.8, -1.5, -2.5], &[2, 3])
        .unwrap()
        .with_grad();
    check_gradients(
        |t, v| {
            let y = t.selective_scan(v[0], v[1], v[2], v[3], v[4]).unwrap();
            weighted_sum(t, y)
        },
        &[u, delta, b, c, a],
        1e-5,
        1e-4,
    )
    .unwrap();
}

#[test]
fn grad_selective_scan_near_series_branch() {
    // Diagonal entries straddling the |Δ·a| < 1e-6 series fallback.
    let u = grad_tensor(&[1, 5], 0.3);
    let delta = Tensor::new(vec![0.02; 5], &[1, 5]).unwrap().with_grad();
    let b = grad_tensor(&[2, 5], 1.3);
    let c = grad_tensor(&[2, 5], 2.3);
    // |Δ·a| = 0.02·1e-6 (inside the branch) and 0.02·1.0 (outside).
    let a = Tensor::new(vec![-1e-6, -1.0], &[1, 2]).unwrap().with_grad();
    check_gradients(
        |t, v| {
            let y = t.selective_scan(v[0], v[1], v[2], v[3], v[4]).unwrap();
            weighted_sum(t, y)
        },
        &[u, delta, b, c, a],
        1e-6,
        1e-4,
    )
    .unwrap();
}

#[test]
fn grad_mamba_block_end_to_end() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let params = MambaBlockParams::init(3, 2, &mut rng);
    // Leaf order follows for_each: the 12 parameter tensors, then the input.
    let mut tensors: Vec<Tensor> = Vec::new();
    params.for_each("blk", &mut |_, t| {
        tensors.push(t.clone());
    });
    tensors.push(grad_tensor(&[3, 10], 0.0));

    check_gradients(
        |t, v| {
            let vars = ppg_denoise_core::ssm::MambaBlockVars {
                norm_gamma: v[0],
                w_in: v[1],
                w_gate: v[2],
                conv_w: v[3],
                conv_b: v[4],
                w_b: v[5],
                w_c: v[6],
                w_dt_lo: v[7],
                w_dt_up: v[8],
                b_dt: v[9],
                a: v[10],
                w_out: v[11],
            };
            let y = mamba_block(t, v[12], &vars).unwrap();
            weighted_sum(t, y)
        },
        &tensors,
        1e-5,
        1e-4,
    )
    .unwrap();
}

/// Runs FD over every parameter of a full DPNet forward on a tiny config.
#[test]
fn grad_dpnet_end_to_end() {
    let cfg = DPNetConfig {
        d_model: 4,
        n_blocks: 1,
        state_dim: 2,
        in_kernels: [7, 5, 3],
        out_kernels: [3, 3],
        alpha_init: 0.0,
    };
    let params = DPNetParams::init(cfg, 41).unwrap();
    let x = Tensor::new(fill(32, 0.0), &[1, 32]).unwrap();

    // Loss: weighted sum of the denoised output.
    let build = |t: &mut Tape, p: &DPNetParams| -> Var {
        let mut reg = VarRegistry::new();
        let vars = p.bind(t, &mut reg);
        let xv = t.leaf(&x);
        let y = dpnet_forward(t, xv, &vars).unwrap();
        weighted_sum(t, y)
    };

    // Analytic grads.
    let mut tape = Tape::new();
    let mut reg = VarRegistry::new();
    let vars = params.bind(&mut tape, &mut reg);
    let xv = tape.leaf(&x);
    let y = dpnet_forward(&mut tape, xv, &vars).unwrap();
    let loss = weighted_sum(&mut tape, y);
    tape.backward(loss).unwrap();
    let grads = reg.collect_grads(&tape);

    // FD spot-check: a handful of elements of every parameter tensor.
    let mut failures = Vec::new();
    let mut work = params.clone();
    let names: Vec<String> = grads.keys().cloned().collect();
    for name in &names {
        let len = grads[name].len();
        let picks: Vec<usize> = [0, len / 2, len.saturating_sub(1)]
            .into_iter()
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        for j in picks {
            let eps = 1e-5;
            let mut eval = |delta: f64| -> f64 {
                work.for_each_mut(&mut |n, t| {
                    if n == name {
                        t.data[j] += delta;
                    }
                });
                let mut t = Tape::new();
                let out = build(&mut t, &work);
                let val = t.value(out)[0];
                work.for_each_mut(&mut |n, t| {
                    if n == name {
                        t.data[j] -= delta;
                    }
                });
                val
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let analytic = grads[name][j];
            let tol = 1e-3 * (1.0 + analytic.abs().max(numeric.abs()));
            if (analytic - numeric).abs() > tol {
                failures.push(format!(
                    "{name}[{j}]: analytic {analytic:.6e} vs numeric {numeric:.6e}"
                ));
            }
        }
    }
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}

#[test]
fn grad_hrp_flows_through_frozen_parameters_to_the_input() {
    // Freeze HRP; the prediction must still carry gradient to its input.
    let cfg = HRPConfig {
        d_model: 4,
        n_blocks: 1,
        state_dim: 2,
        in_kernels: [7, 5, 3],
        hidden: 8,
    };
    let mut params = HRPParams::init(cfg, 17).unwrap();
    params.set_trainable(false);

    let x = Tensor::new(fill(32, 0.0), &[1, 32]).unwrap().with_grad();
    check_gradients(
        |t, v| {
            let mut reg = VarRegistry::new();
            let vars = params.bind(t, &mut reg);
            let bpm = hrp_forward(t, v[0], &vars).unwrap();
            t.sum_all(bpm)
        },
        &[x.clone()],
        1e-5,
        1e-4,
    )
    .unwrap();

    // And the frozen parameters themselves accumulate nothing.
    let mut tape = Tape::new();
    let mut reg = VarRegistry::new();
    let vars = params.bind(&mut tape, &mut reg);
    let xv = tape.leaf(&x);
    let bpm = hrp_forward(&mut tape, xv, &vars).unwrap();
    let loss = tape.sum_all(bpm);
    tape.backward(loss).unwrap();
    for (name, g) in reg.collect_grads(&tape) {
        assert!(
            g.iter().all(|&v| v == 0.0),
            "frozen parameter {name} received gradient"
        );
    }
    assert!(tape.grad(xv).is_some(), "input gradient missing");
}
