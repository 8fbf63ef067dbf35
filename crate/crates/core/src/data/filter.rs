//! Band-pass comparison baseline: linear-phase windowed-sinc FIR,
//! applied forward and backward for zero net phase, with the output
//! mean removed.

use super::DataError;

/// Filter order (taps − 1).
pub const FIR_ORDER: usize = 255;

/// Hamming-windowed ideal band-pass taps for the band [low, high] Hz.
fn design_taps(low: f64, high: f64, fs: f64) -> Vec<f64> {
    let n = FIR_ORDER + 1;
    let m = (n - 1) as f64 / 2.0; // fractional center: no division by zero
    let (wl, wh) = (
        2.0 * std::f64::consts::PI * low / fs,
        2.0 * std::f64::consts::PI * high / fs,
    );
    (0..n)
        .map(|i| {
            let t = i as f64 - m;
            let ideal = ((wh * t).sin() - (wl * t).sin()) / (std::f64::consts::PI * t);
            let window = 0.54
                - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos();
            ideal * window
        })
        .collect()
}

/// Full linear convolution, output length `x.len() + h.len() − 1`.
fn conv_full(x: &[f64], h: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len() + h.len() - 1];
    for (i, &xi) in x.iter().enumerate() {
        for (j, &hj) in h.iter().enumerate() {
            y[i + j] += xi * hj;
        }
    }
    y
}

/// Band-pass `signal` to [low, high] Hz with a windowed-sinc FIR of
/// order 255, run forward and backward (zero phase, squared magnitude
/// response), then remove the residual DC by subtracting the mean.
pub fn bandpass_baseline(
    signal: &[f64],
    low: f64,
    high: f64,
    fs: f64,
) -> Result<Vec<f64>, DataError> {
    if !(0.0 < low && low < high && high < fs / 2.0) {
        return Err(DataError::BadParam {
            op: "bandpass_baseline",
            param: "band",
            value: low,
            expected: "0 < low < high < fs/2",
        });
    }
    if signal.is_empty() {
        return Ok(Vec::new());
    }
    let h = design_taps(low, high, fs);
    let k = h.len();
    let forward = conv_full(signal, &h);
    let mut reversed: Vec<f64> = forward.into_iter().rev().collect();
    let backward = conv_full(&reversed, &h);
    reversed = backward.into_iter().rev().collect();
    // The twice-filtered signal aligned with x[i] sits at index i + (k−1).
    let mut out: Vec<f64> = reversed[k - 1..k - 1 + signal.len()].to_vec();
    let mean = out.iter().sum::<f64>() / out.len() as f64;
    out.iter_mut().for_each(|v| *v -= mean);
    Ok(out)
}
