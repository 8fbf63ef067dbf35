//! The selective scan: a time-varying linear state-space recurrence.
//!
//! Continuous parameters `(A, B_t)` are discretized per step with a
//! zero-order hold over the step size `Δ_t`:
//!
//! ```text
//! Ā_t = exp(Δ_t · A)          B̄_t = (exp(Δ_t · A) − 1) / A · B_t
//! h_t = Ā_t · h_{t−1} + B̄_t · x_t          y_t = C_t · h_t
//! ```
//!
//! with `B̄_t → Δ_t · B_t` as `Δ_t·A → 0` (series limit, used below
//! `|Δ·A| < 1e-6` to avoid cancellation). `A` is diagonal per channel —
//! shape `[D, N]` holds the diagonal for each of `D` independent channels
//! with `N` states — so every `(d, n)` pair is a scalar recurrence and the
//! scan costs `O(D·N·L)`.
//!
//! [`selective_scan`] is the sequential reference. [`chunked_scan`]
//! evaluates the same recurrence in fixed-size blocks, carrying the
//! boundary state across chunks as `h_t = local_t + P_t · h_in` (`local`
//! = scan of the chunk from a zero state, `P` = running decay product),
//! which is the decomposition a blocked or parallel evaluator would use.
//! Both produce the same sequence up to floating-point rounding.
//!
//! `forward_cached`/`backward` implement the fused tape operation:
//! backpropagation through time over the cached per-step states.

use crate::tensor::kernels::{exp_fast, exp_fast_inplace};
use crate::tensor::{TensorError, Var};

/// Below this magnitude of `Δ·A`, `(exp(Δ·A) − 1)/A` is replaced by its
/// series expansion `Δ·(1 + Δ·A/2)` (limit `Δ` as `Δ·A → 0`). The direct
/// form loses all precision to cancellation there; the series keeps both
/// the value and its `A`-derivative (`Δ²/2`) smooth across the switch.
pub const SERIES_EPS: f64 = 1e-6;

/// Dimensions of one scan: `channels` independent recurrences (`D`), each
/// with `state` hidden states (`N`), over `len` time steps (`L`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanDims {
    pub channels: usize,
    pub state: usize,
    pub len: usize,
}

impl ScanDims {
    fn dl(&self) -> usize {
        self.channels * self.len
    }
    fn nl(&self) -> usize {
        self.state * self.len
    }
}

/// ZOH discretization of one scalar state: returns `(Ā, B̄)` for diagonal
/// entry `a`, input matrix entry `b`, and step size `delta`.
pub fn discretize(a: f64, b: f64, delta: f64) -> Result<(f64, f64), TensorError> {
    if !(delta > 0.0) {
        return Err(TensorError::BadArgument {
            op: "discretize",
            detail: format!("step size must be strictly positive, got {delta}"),
            shape: vec![1],
        });
    }
    let (abar, bcoef) = zoh(a, delta);
    Ok((abar, bcoef * b))
}

/// `(Ā, B̄/B)` — the state decay and the input coefficient before
/// multiplying by `B`.
#[inline]
fn zoh(a: f64, delta: f64) -> (f64, f64) {
    let da = delta * a;
    let abar = exp_fast(da);
    (abar, bcoef_of(a, delta, abar))
}

/// The `B̄/B` input coefficient given an already-exponentiated decay.
#[inline]
fn bcoef_of(a: f64, delta: f64, abar: f64) -> f64 {
    let da = delta * a;
    if da.abs() < SERIES_EPS {
        delta * (1.0 + 0.5 * da)
    } else {
        (abar - 1.0) / a
    }
}

fn validate(
    u: &[f64],
    delta: &[f64],
    b: &[f64],
    c: &[f64],
    a: &[f64],
    dims: ScanDims,
) -> Result<(), TensorError> {
    let checks = [
        ("u", u.len(), dims.dl()),
        ("delta", delta.len(), dims.dl()),
        ("b", b.len(), dims.nl()),
        ("c", c.len(), dims.nl()),
        ("a", a.len(), dims.channels * dims.state),
    ];
    for (name, len, expected) in checks {
        if len != expected {
            return Err(TensorError::BadArgument {
                op: "selective_scan",
                detail: format!("{name} has {len} elements, expected {expected}"),
                shape: vec![dims.channels, dims.state, dims.len],
            });
        }
    }
    if let Some(bad) = delta.iter().find(|&&v| !(v > 0.0)) {
        return Err(TensorError::BadArgument {
            op: "selective_scan",
            detail: format!("step sizes must be strictly positive, got {bad}"),
            shape: vec![dims.channels, dims.len],
        });
    }
    Ok(())
}

fn transpose(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Sequential reference evaluation. Inputs are row-major: `u`, `delta`
/// `[D, L]`; `b`, `c` `[N, L]`; `a` `[D, N]`. Returns `y: [D, L]`.
pub fn selective_scan(
    u: &[f64],
    delta: &[f64],
    b: &[f64],
    c: &[f64],
    a: &[f64],
    dims: ScanDims,
) -> Result<Vec<f64>, TensorError> {
    validate(u, delta, b, c, a, dims)?;
    let (d_ch, n_st, l) = (dims.channels, dims.state, dims.len);
    let bt = transpose(b, n_st, l);
    let ct = transpose(c, n_st, l);
    let mut y = vec![0.0; d_ch * l];
    let mut h = vec![0.0; n_st];
    for d in 0..d_ch {
        let a_row = &a[d * n_st..(d + 1) * n_st];
        h.iter_mut().for_each(|v| *v = 0.0);
        for t in 0..l {
            let dt = delta[d * l + t];
            let ut = u[d * l + t];
            let bt_row = &bt[t * n_st..(t + 1) * n_st];
            let ct_row = &ct[t * n_st..(t + 1) * n_st];
            let mut acc = 0.0;
            for n in 0..n_st {
                let (abar, bcoef) = zoh(a_row[n], dt);
                let hn = abar * h[n] + bcoef * bt_row[n] * ut;
                h[n] = hn;
                acc += ct_row[n] * hn;
            }
            y[d * l + t] = acc;
        }
    }
    Ok(y)
}

/// Blocked evaluation with uniform chunk length. Identical recurrence to
/// [`selective_scan`]; the boundary state is carried across chunks.
pub fn chunked_scan(
    u: &[f64],
    delta: &[f64],
    b: &[f64],
    c: &[f64],
    a: &[f64],
    dims: ScanDims,
    chunk: usize,
) -> Result<Vec<f64>, TensorError> {
    if chunk == 0 {
        return Err(TensorError::BadArgument {
            op: "chunked_scan",
            detail: "chunk length must be at least 1".to_string(),
            shape: vec![dims.len],
        });
    }
    let mut bounds: Vec<usize> = (1..=dims.len / chunk).map(|i| i * chunk).collect();
    if bounds.last() != Some(&dims.len) {
        bounds.push(dims.len);
    }
    chunked_scan_at(u, delta, b, c, a, dims, &bounds)
}

/// Blocked evaluation with explicit chunk end positions (strictly
/// increasing, final entry `dims.len`).
pub fn chunked_scan_at(
    u: &[f64],
    delta: &[f64],
    b: &[f64],
    c: &[f64],
    a: &[f64],
    dims: ScanDims,
    bounds: &[usize],
) -> Result<Vec<f64>, TensorError> {
    validate(u, delta, b, c, a, dims)?;
    let monotone = bounds.windows(2).all(|w| w[0] < w[1]);
    if dims.len > 0 && (!monotone || bounds.first() == Some(&0) || bounds.last() != Some(&dims.len))
    {
        return Err(TensorError::BadArgument {
            op: "chunked_scan",
            detail: format!("chunk bounds {bounds:?} do not partition the sequence"),
            shape: vec![dims.len],
        });
    }
    let (d_ch, n_st, l) = (dims.channels, dims.state, dims.len);
    let bt = transpose(b, n_st, l);
    let ct = transpose(c, n_st, l);
    let mut y = vec![0.0; d_ch * l];
    let mut h_in = vec![0.0; n_st];
    let mut local = vec![0.0; n_st];
    let mut prefix = vec![0.0; n_st];
    for d in 0..d_ch {
        let a_row = &a[d * n_st..(d + 1) * n_st];
        h_in.iter_mut().for_each(|v| *v = 0.0);
        let mut t0 = 0;
        for &t1 in bounds {
            local.iter_mut().for_each(|v| *v = 0.0);
            prefix.iter_mut().for_each(|v| *v = 1.0);
            for t in t0..t1 {
                let dt = delta[d * l + t];
                let ut = u[d * l + t];
                let bt_row = &bt[t * n_st..(t + 1) * n_st];
                let ct_row = &ct[t * n_st..(t + 1) * n_st];
                let mut acc = 0.0;
                for n in 0..n_st {
                    let (abar, bcoef) = zoh(a_row[n], dt);
                    local[n] = abar * local[n] + bcoef * bt_row[n] * ut;
                    prefix[n] *= abar;
                    acc += ct_row[n] * (local[n] + prefix[n] * h_in[n]);
                }
                y[d * l + t] = acc;
            }
            for n in 0..n_st {
                h_in[n] = local[n] + prefix[n] * h_in[n];
            }
            t0 = t1;
        }
    }
    Ok(y)
}

// ---- fused tape operation ----------------------------------------------

/// Per-step values saved by the forward pass for backpropagation through
/// time. `h`, `abar`, `bcoef` are `[D, L, N]` (state contiguous); `bt`,
/// `ct` are the `[L, N]` transposes of the inputs.
pub(crate) struct ScanCache {
    h: Vec<f64>,
    abar: Vec<f64>,
    bcoef: Vec<f64>,
    bt: Vec<f64>,
    ct: Vec<f64>,
}

/// Tape node payload for the fused scan.
pub(crate) struct ScanNode {
    pub u: Var,
    pub delta: Var,
    pub b: Var,
    pub c: Var,
    pub a: Var,
    pub dims: ScanDims,
    pub cache: ScanCache,
}

pub(crate) struct ScanGrads {
    pub du: Option<Vec<f64>>,
    pub ddelta: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
    pub dc: Option<Vec<f64>>,
    pub da: Option<Vec<f64>>,
}

pub(crate) fn forward_cached(
    u: &[f64],
    delta: &[f64],
    b: &[f64],
    c: &[f64],
    a: &[f64],
    dims: ScanDims,
) -> Result<(Vec<f64>, ScanCache), TensorError> {
    validate(u, delta, b, c, a, dims)?;
    let (d_ch, n_st, l) = (dims.channels, dims.state, dims.len);
    let bt = transpose(b, n_st, l);
    let ct = transpose(c, n_st, l);
    // The discretization has no time recurrence, so it is hoisted out of
    // the scan into flat passes over [D, L, N]: one sweep filling Δ·A and
    // exponentiating it (the lone transcendental, vectorized), one sweep
    // deriving the input coefficients. The values land directly in the
    // backward cache. Same arithmetic per element as [`zoh`].
    let mut abar_all = Vec::with_capacity(d_ch * l * n_st);
    for d in 0..d_ch {
        let a_row = &a[d * n_st..(d + 1) * n_st];
        for &dt in &delta[d * l..(d + 1) * l] {
            abar_all.extend(a_row.iter().map(|&an| dt * an));
        }
    }
    exp_fast_inplace(&mut abar_all);
    let mut bcoef_all = Vec::with_capacity(d_ch * l * n_st);
    for d in 0..d_ch {
        let a_row = &a[d * n_st..(d + 1) * n_st];
        for (t, &dt) in delta[d * l..(d + 1) * l].iter().enumerate() {
            let ab_row = &abar_all[(d * l + t) * n_st..(d * l + t + 1) * n_st];
            bcoef_all.extend(
                a_row
                    .iter()
                    .zip(ab_row)
                    .map(|(&an, &ab)| bcoef_of(an, dt, ab)),
            );
        }
    }
    let mut y = Vec::with_capacity(d_ch * l);
    let mut h_all = Vec::with_capacity(d_ch * l * n_st);
    let mut h = vec![0.0; n_st];
    for d in 0..d_ch {
        h.iter_mut().for_each(|v| *v = 0.0);
        let u_row = &u[d * l..(d + 1) * l];
        for (t, &ut) in u_row.iter().enumerate() {
            let base = (d * l + t) * n_st;
            let ab_row = &abar_all[base..base + n_st];
            let bc_row = &bcoef_all[base..base + n_st];
            let bt_row = &bt[t * n_st..(t + 1) * n_st];
            let ct_row = &ct[t * n_st..(t + 1) * n_st];
            let mut acc = 0.0;
            for n in 0..n_st {
                let hn = ab_row[n] * h[n] + bc_row[n] * bt_row[n] * ut;
                h[n] = hn;
                acc += ct_row[n] * hn;
            }
            h_all.extend_from_slice(&h);
            y.push(acc);
        }
    }
    Ok((
        y,
        ScanCache {
            h: h_all,
            abar: abar_all,
            bcoef: bcoef_all,
            bt,
            ct,
        },
    ))
}

/// Backpropagation through time for the fused scan. Each `want_*` flag
/// suppresses a gradient that no differentiable input needs.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    dy: &[f64],
    u: &[f64],
    delta: &[f64],
    _b: &[f64],
    _c: &[f64],
    a: &[f64],
    dims: ScanDims,
    cache: &ScanCache,
    want_u: bool,
    want_delta: bool,
    want_b: bool,
    want_c: bool,
    want_a: bool,
) -> ScanGrads {
    let (d_ch, n_st, l) = (dims.channels, dims.state, dims.len);
    let mut du = want_u.then(|| vec![0.0; d_ch * l]);
    let mut ddelta = want_delta.then(|| vec![0.0; d_ch * l]);
    let mut dbt = want_b.then(|| vec![0.0; n_st * l]);
    let mut dct = want_c.then(|| vec![0.0; n_st * l]);
    let mut da = want_a.then(|| vec![0.0; d_ch * n_st]);

    let mut dh = vec![0.0; n_st];
    let zero_row = vec![0.0; n_st];
    for d in 0..d_ch {
        let a_row = &a[d * n_st..(d + 1) * n_st];
        let delta_row = &delta[d * l..(d + 1) * l];
        let u_row = &u[d * l..(d + 1) * l];
        let dy_row = &dy[d * l..(d + 1) * l];
        let mut da_row = da.as_deref_mut().map(|g| &mut g[d * n_st..(d + 1) * n_st]);
        let mut du_row = du.as_deref_mut().map(|g| &mut g[d * l..(d + 1) * l]);
        let mut ddelta_row = ddelta.as_deref_mut().map(|g| &mut g[d * l..(d + 1) * l]);
        dh.iter_mut().for_each(|v| *v = 0.0);
        for t in (0..l).rev() {
            let dt = delta_row[t];
            let ut = u_row[t];
            let dyt = dy_row[t];
            let base = (d * l + t) * n_st;
            let h_row = &cache.h[base..base + n_st];
            // h_{t−1} for the first step is the zero initial state.
            let h_prev_row = if t > 0 {
                &cache.h[base - n_st..base]
            } else {
                &zero_row[..]
            };
            let ab_row = &cache.abar[base..base + n_st];
            let bc_row = &cache.bcoef[base..base + n_st];
            let bt_row = &cache.bt[t * n_st..(t + 1) * n_st];
            let ct_row = &cache.ct[t * n_st..(t + 1) * n_st];
            let mut ddelta_acc = 0.0;
            let mut du_acc = 0.0;
            if let Some(dct) = &mut dct {
                let row = &mut dct[t * n_st..(t + 1) * n_st];
                for (g, &hn) in row.iter_mut().zip(h_row) {
                    *g += dyt * hn;
                }
            }
            if let Some(dbt) = &mut dbt {
                let row = &mut dbt[t * n_st..(t + 1) * n_st];
                for (n, g) in row.iter_mut().enumerate() {
                    let dhn = dh[n] + dyt * ct_row[n];
                    *g += dhn * bc_row[n] * ut;
                }
            }
            for n in 0..n_st {
                // Contribution of y_t, then undo the step h_t = Ā·h_{t−1} + B̄coef·B·u.
                let dhn = dh[n] + dyt * ct_row[n];
                let abar = ab_row[n];
                let bcoef = bc_row[n];
                let d_abar = dhn * h_prev_row[n];
                let d_bcoef = dhn * bt_row[n] * ut;
                du_acc += dhn * bcoef * bt_row[n];
                // ∂Ā/∂Δ = a·Ā and ∂B̄coef/∂Δ = Ā (also the series limit);
                // ∂Ā/∂a = Δ·Ā and ∂B̄coef/∂a = (Δ·Ā − B̄coef)/a, with series
                // limit Δ²/2 as Δ·a → 0.
                ddelta_acc += d_abar * a_row[n] * abar + d_bcoef * abar;
                if let Some(da_row) = &mut da_row {
                    let dbc_da = if (dt * a_row[n]).abs() < SERIES_EPS {
                        0.5 * dt * dt
                    } else {
                        (dt * abar - bcoef) / a_row[n]
                    };
                    da_row[n] += d_abar * dt * abar + d_bcoef * dbc_da;
                }
                dh[n] = dhn * abar;
            }
            if let Some(ddelta_row) = &mut ddelta_row {
                ddelta_row[t] = ddelta_acc;
            }
            if let Some(du_row) = &mut du_row {
                du_row[t] = du_acc;
            }
        }
    }
    ScanGrads {
        du,
        ddelta,
        db: dbt.map(|g| transpose(&g, l, n_st)),
        dc: dct.map(|g| transpose(&g, l, n_st)),
        da,
    }
}
