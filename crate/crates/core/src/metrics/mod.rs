//! Evaluation metrics (MSE, cosine similarity, SNR improvement, HR-MAE,
//! SI-SDR) and the staged training loss built on the autodiff tape.
//!
//! Conventions, stated once and tested: SNR is residual-based
//! 10·log10(Σg²/Σ(s−g)²); degenerate ratios clamp to ±100 dB; SI-SDR
//! subtracts means first and carries ε = 1e-8, scaled by the estimate's
//! energy to preserve scale invariance, in its denominator; HR
//! failure on the clean reference excludes a segment while failure on
//! the denoised signal alone scores the worst-case 110 BPM; aggregates
//! are population mean ± std over the segments where a metric is defined.

use crate::hr;
use crate::tensor::{Tape, TensorError, Var};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Clamp for dB-valued metrics when a ratio degenerates.
pub const DB_CLAMP: f64 = 100.0;
/// Denominator guard inside SI-SDR.
pub const SI_SDR_EPS: f64 = 1e-8;
/// Score for a segment whose denoised signal defeats beat detection
/// while the clean reference does not: the width of the physiological
/// band, 150 − 40 BPM.
pub const HR_FAIL_PENALTY: f64 = 110.0;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {lhs} vs {rhs}")]
    LengthMismatch { lhs: usize, rhs: usize },
    #[error("{0} is a zero vector, metric undefined")]
    ZeroVector(&'static str),
    #[error("empty input: {0}")]
    Empty(&'static str),
}

fn check_len(a: &[f64], b: &[f64]) -> Result<(), MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch {
            lhs: a.len(),
            rhs: b.len(),
        });
    }
    if a.is_empty() {
        return Err(MetricsError::Empty("metric over empty vectors"));
    }
    Ok(())
}

/// Mean squared error (1/N)·Σ(g−d)².
pub fn mse(g: &[f64], d: &[f64]) -> Result<f64, MetricsError> {
    check_len(g, d)?;
    Ok(g.iter()
        .zip(d)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / g.len() as f64)
}

/// Cosine similarity ⟨g,d⟩/(‖g‖‖d‖) ∈ [−1, 1].
pub fn cos_sim(g: &[f64], d: &[f64]) -> Result<f64, MetricsError> {
    check_len(g, d)?;
    let dot: f64 = g.iter().zip(d).map(|(a, b)| a * b).sum();
    let ng: f64 = g.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nd: f64 = d.iter().map(|b| b * b).sum::<f64>().sqrt();
    if ng == 0.0 {
        return Err(MetricsError::ZeroVector("reference"));
    }
    if nd == 0.0 {
        return Err(MetricsError::ZeroVector("estimate"));
    }
    Ok((dot / (ng * nd)).clamp(-1.0, 1.0))
}

/// Residual signal-to-noise ratio of `s` against reference `g`:
/// 10·log10(Σg²/Σ(s−g)²), clamped to ±[`DB_CLAMP`] dB.
pub fn snr_db(s: &[f64], g: &[f64]) -> Result<f64, MetricsError> {
    check_len(s, g)?;
    let signal: f64 = g.iter().map(|v| v * v).sum();
    let residual: f64 = s.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum();
    let db = if residual == 0.0 {
        f64::INFINITY
    } else if signal == 0.0 {
        f64::NEG_INFINITY
    } else {
        10.0 * (signal / residual).log10()
    };
    Ok(db.clamp(-DB_CLAMP, DB_CLAMP))
}

/// SNR improvement of the denoised signal over the noisy input:
/// snr_db(d, g) − snr_db(n, g).
pub fn snr_imp(d: &[f64], n: &[f64], g: &[f64]) -> Result<f64, MetricsError> {
    Ok(snr_db(d, g)? - snr_db(n, g)?)
}

/// Scale-invariant signal-to-distortion ratio in dB (means removed,
/// ε-guarded, clamped to ±[`DB_CLAMP`]).
///
/// The guard is scaled by the estimate's energy (ε·‖d‖² rather than a
/// bare ε), which leaves the ideal target/residual ratio untouched and
/// keeps the metric invariant under rescaling of the estimate down to
/// float rounding. An exactly zero residual clamps high; a constant
/// estimate carries no projection and clamps low.
pub fn si_sdr(d: &[f64], g: &[f64]) -> Result<f64, MetricsError> {
    check_len(d, g)?;
    let n = g.len() as f64;
    let gm = g.iter().sum::<f64>() / n;
    let dm = d.iter().sum::<f64>() / n;
    let gz: Vec<f64> = g.iter().map(|v| v - gm).collect();
    let dz: Vec<f64> = d.iter().map(|v| v - dm).collect();
    let gg: f64 = gz.iter().map(|v| v * v).sum();
    if gg == 0.0 {
        return Err(MetricsError::ZeroVector("reference"));
    }
    let dd: f64 = dz.iter().map(|v| v * v).sum();
    if dd == 0.0 {
        return Ok(-DB_CLAMP);
    }
    let dg: f64 = dz.iter().zip(&gz).map(|(a, b)| a * b).sum();
    let scale = dg / gg;
    let target_power = scale * scale * gg;
    let residual_power: f64 = dz
        .iter()
        .zip(&gz)
        .map(|(a, b)| {
            let e = a - scale * b;
            e * e
        })
        .sum();
    if residual_power == 0.0 {
        return Ok(DB_CLAMP);
    }
    let db = 10.0 * (target_power / (residual_power + SI_SDR_EPS * dd)).log10();
    Ok(db.clamp(-DB_CLAMP, DB_CLAMP))
}

/// Per-segment HR-MAE outcome under the declared failure conventions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HrMaeOutcome {
    /// |HR(g) − HR(d)| in BPM.
    Value(f64),
    /// Beat detection failed on the clean reference: segment excluded.
    CleanFailed,
    /// Detection failed on the denoised signal only: scored at
    /// [`HR_FAIL_PENALTY`] and counted.
    DenoisedFailed,
}

/// |HR(g) − HR(d)| for one segment, with failures classified.
pub fn hr_mae(g: &[f64], d: &[f64], fs: f64) -> HrMaeOutcome {
    let Ok(hr_g) = hr::hr(g, fs) else {
        return HrMaeOutcome::CleanFailed;
    };
    match hr::hr(d, fs) {
        Ok(hr_d) => HrMaeOutcome::Value((hr_g - hr_d).abs()),
        Err(_) => HrMaeOutcome::DenoisedFailed,
    }
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// An aggregated metric: population mean ± std over `n` segments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Aggregate {
    fn over(xs: &[f64]) -> Aggregate {
        let (mean, std) = mean_std(xs);
        Aggregate {
            mean,
            std,
            n: xs.len(),
        }
    }
}

/// Aggregate evaluation of a set of (clean, noisy, denoised) segments.
/// Aggregates cover only segments where each metric is defined;
/// exclusion counts are reported alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_segments: usize,
    pub mse: Aggregate,
    pub cos: Aggregate,
    pub snr_imp_db: Aggregate,
    pub hr_mae: Aggregate,
    /// Segments where beat detection failed on the clean reference.
    pub hr_fail_g: usize,
    /// Segments where it failed on the noisy input (informational).
    pub hr_fail_n: usize,
    /// Segments where it failed on the denoised output alone.
    pub hr_fail_d: usize,
}

/// Compute the full report over (clean, noisy, denoised) triples, all
/// expressed in the same (z-scored) frame at sample rate `fs`.
pub fn evaluate_segments<'a, I>(items: I, fs: f64) -> Result<MetricReport, MetricsError>
where
    I: IntoIterator<Item = (&'a [f64], &'a [f64], &'a [f64])>,
{
    let mut mses = Vec::new();
    let mut coses = Vec::new();
    let mut imps = Vec::new();
    let mut maes = Vec::new();
    let (mut fail_g, mut fail_n, mut fail_d) = (0usize, 0usize, 0usize);
    let mut n_segments = 0usize;
    for (g, n, d) in items {
        n_segments += 1;
        mses.push(mse(g, d)?);
        if let Ok(c) = cos_sim(g, d) {
            coses.push(c);
        }
        imps.push(snr_imp(d, n, g)?);
        if hr::hr(n, fs).is_err() {
            fail_n += 1;
        }
        match hr_mae(g, d, fs) {
            HrMaeOutcome::Value(v) => maes.push(v),
            HrMaeOutcome::CleanFailed => fail_g += 1,
            HrMaeOutcome::DenoisedFailed => {
                fail_d += 1;
                maes.push(HR_FAIL_PENALTY);
            }
        }
    }
    if n_segments == 0 {
        return Err(MetricsError::Empty("no segments to evaluate"));
    }
    Ok(MetricReport {
        n_segments,
        mse: Aggregate::over(&mses),
        cos: Aggregate::over(&coses),
        snr_imp_db: Aggregate::over(&imps),
        hr_mae: Aggregate::over(&maes),
        hr_fail_g: fail_g,
        hr_fail_n: fail_n,
        hr_fail_d: fail_d,
    })
}

// ---- tape-side losses ----------------------------------------------------

/// Loss weights and warmup schedule of the staged objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the negative SI-SDR term.
    pub lambda1: f64,
    /// Weight of the HR absolute-error term after warmup.
    pub lambda2: f64,
    /// Epochs (0-based) before which the HR term is withheld.
    pub warmup_epochs: usize,
}

/// Mean squared error between two same-shape tensors as a tape scalar.
pub fn mse_loss(tape: &mut Tape, d: Var, g: Var) -> Result<Var, TensorError> {
    let r = tape.sub(d, g)?;
    let sq = tape.mul(r, r)?;
    Ok(tape.mean_all(sq))
}

/// Negative SI-SDR in dB as a tape scalar (the loss form: lower is
/// better). Mirrors [`si_sdr`] — including the energy-scaled ε guard —
/// without the clamp, which is a reporting convention, not part of the
/// objective.
pub fn neg_si_sdr_loss(tape: &mut Tape, d: Var, g: Var) -> Result<Var, TensorError> {
    let gz = {
        let m = tape.mean_all(g);
        let nm = tape.neg(m);
        tape.add_scalar(g, nm)?
    };
    let dz = {
        let m = tape.mean_all(d);
        let nm = tape.neg(m);
        tape.add_scalar(d, nm)?
    };
    let gg = tape.dot(gz, gz)?;
    if tape.value(gg)[0] == 0.0 {
        return Err(TensorError::BadArgument {
            op: "neg_si_sdr_loss",
            detail: "reference signal is constant (zero after mean removal)".into(),
            shape: tape.shape(g).to_vec(),
        });
    }
    let dd = tape.dot(dz, dz)?;
    if tape.value(dd)[0] == 0.0 {
        return Err(TensorError::BadArgument {
            op: "neg_si_sdr_loss",
            detail: "estimate is constant (zero after mean removal)".into(),
            shape: tape.shape(d).to_vec(),
        });
    }
    let dg = tape.dot(dz, gz)?;
    let scale = tape.div(dg, gg)?;
    let target = tape.mul_scalar(gz, scale)?;
    let residual = tape.sub(dz, target)?;
    let tp = tape.dot(target, target)?;
    let rp = tape.dot(residual, residual)?;
    let guard = tape.mul_const(dd, SI_SDR_EPS);
    let rp_eps = tape.add(rp, guard)?;
    let ratio = tape.div(tp, rp_eps)?;
    let ln = tape.ln(ratio);
    let db = tape.mul_const(ln, 10.0 / std::f64::consts::LN_10);
    Ok(tape.neg(db))
}

/// One sample's staged objective: L_MSE + λ1·(−SI-SDR), plus
/// λ2·|bpm_pred − bpm_true| once `epoch ≥ warmup_epochs` and an HR
/// prediction is supplied. `hr_term` is (predicted BPM as a tape scalar,
/// true BPM); it is ignored during warmup, matching the schedule.
pub fn staged_sample_loss(
    tape: &mut Tape,
    epoch: usize,
    weights: &LossWeights,
    d: Var,
    g: Var,
    hr_term: Option<(Var, f64)>,
) -> Result<Var, TensorError> {
    let mse_term = mse_loss(tape, d, g)?;
    let sisdr_term = neg_si_sdr_loss(tape, d, g)?;
    let weighted = tape.mul_const(sisdr_term, weights.lambda1);
    let mut total = tape.add(mse_term, weighted)?;
    if epoch >= weights.warmup_epochs {
        if let Some((bpm_pred, bpm_true)) = hr_term {
            let diff = tape.add_const(bpm_pred, -bpm_true);
            let abs = tape.abs(diff);
            let hr_weighted = tape.mul_const(abs, weights.lambda2);
            total = tape.add(total, hr_weighted)?;
        }
    }
    Ok(total)
}
