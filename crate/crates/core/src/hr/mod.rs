//! Beat detection and heart-rate statistics.
//!
//! The detector is a rolling-mean threshold scheme: the signal is shifted
//! to a zero minimum, a 0.75 s centred rolling mean forms an envelope, and
//! the envelope is raised by a percentage of the signal's mean level.
//! Peaks are the maxima of above-threshold runs. The percentage is swept
//! over a fixed ladder and the candidate whose inter-beat intervals have
//! the smallest population standard deviation (while the implied rate is
//! physiologically plausible) is kept.
//!
//! All variance-based statistics here use *population* variance
//! (divide by n, not n − 1).

use thiserror::Error;

/// Rolling-mean window length in seconds.
pub const ROLLING_MEAN_SECONDS: f64 = 0.75;
/// Threshold offsets swept by the detector, in percent of the mean level.
pub const THRESHOLD_PERCENTAGES: [f64; 6] = [5.0, 10.0, 15.0, 20.0, 25.0, 30.0];
/// Heart-rate range (BPM) a threshold candidate must imply to be eligible.
pub const DETECT_BPM_RANGE: (f64, f64) = (40.0, 180.0);

/// Quality-gate bounds: exclusive BPM interval.
pub const GATE_BPM: (f64, f64) = (40.0, 150.0);
/// Quality-gate bounds: exclusive per-IBI interval in milliseconds.
pub const GATE_IBI_MS: (f64, f64) = (400.0, 2000.0);
/// Quality-gate bound: RMSSD must stay below this (ms).
pub const GATE_RMSSD_MS: f64 = 100.0;
/// Quality-gate bound: the SD1/SD2 ratio must stay below this.
pub const GATE_SD1SD2: f64 = 6.0;

/// Failures of beat detection or of the statistics' preconditions.
#[derive(Debug, Error, PartialEq)]
pub enum HrError {
    #[error("signal too short for beat detection: {got} samples, need at least {needed}")]
    TooShort { got: usize, needed: usize },
    #[error("sample rate must be positive, got {0}")]
    BadSampleRate(f64),
    #[error("no threshold candidate produced at least two plausible beats")]
    DetectionFailed,
    #[error("need at least {needed} inter-beat intervals, got {got}")]
    TooFewIbis { got: usize, needed: usize },
}

/// Why a window was rejected by [`quality_gate`].
#[derive(Debug, Error, PartialEq)]
pub enum GateReject {
    #[error("beat detection failed: {0}")]
    Detection(#[from] HrError),
    #[error("bpm {0:.2} outside ({lo}, {hi})", lo = GATE_BPM.0, hi = GATE_BPM.1)]
    BpmOutOfRange(f64),
    #[error("inter-beat interval {0:.1} ms outside ({lo}, {hi}) ms", lo = GATE_IBI_MS.0, hi = GATE_IBI_MS.1)]
    IbiOutOfRange(f64),
    #[error("rmssd {0:.1} ms exceeds {max} ms", max = GATE_RMSSD_MS)]
    RmssdTooHigh(f64),
    #[error("sd1/sd2 ratio {0:.2} exceeds {max}", max = GATE_SD1SD2)]
    Sd1Sd2TooHigh(f64),
}

/// Detected beats: sample positions of peaks and the intervals between them.
#[derive(Debug, Clone, PartialEq)]
pub struct BeatSeries {
    /// Strictly increasing sample indices of detected peaks.
    pub peak_indices: Vec<usize>,
    /// Successive inter-beat intervals in milliseconds:
    /// `ibis[i] = (peak[i+1] − peak[i]) / fs × 1000`.
    pub ibis: Vec<f64>,
}

/// Heart-rate statistics of one window, as checked by the quality gate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HrStats {
    /// Mean rate: 60000 / mean(ibis).
    pub bpm: f64,
    /// Root mean square of successive IBI differences (ms).
    pub rmssd: f64,
    /// Short-term Poincaré spread (ms).
    pub sd1: f64,
    /// Long-term Poincaré spread (ms).
    pub sd2: f64,
    /// sd1/sd2; 0 when both are 0, +∞ when sd2 = 0 < sd1.
    pub sd1sd2: f64,
}

/// Population mean. Zero for an empty slice.
fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Population variance (divide by n). Zero for an empty slice.
fn pvar(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

/// Centred rolling mean with the window clamped at the edges, so every
/// output averages only samples that exist.
fn rolling_mean(xs: &[f64], window: usize) -> Vec<f64> {
    let n = xs.len();
    let mut prefix = vec![0.0; n + 1];
    for (i, &x) in xs.iter().enumerate() {
        prefix[i + 1] = prefix[i] + x;
    }
    let half = window / 2;
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            (prefix[hi + 1] - prefix[lo]) / (hi + 1 - lo) as f64
        })
        .collect()
}

/// Peaks as maxima of runs where `xs` strictly exceeds `threshold`.
/// Within an equal-height plateau the first sample wins. A maximum
/// sitting exactly on the first or last sample is discarded: the window
/// has cut that beat and its true apex may lie outside, so the descending
/// (or ascending) stub would register as a spurious early (or late) beat.
fn peaks_above(xs: &[f64], threshold: &[f64]) -> Vec<usize> {
    let mut peaks = Vec::new();
    let mut run_start: Option<usize> = None;
    for i in 0..=xs.len() {
        let above = i < xs.len() && xs[i] > threshold[i];
        match (run_start, above) {
            (None, true) => run_start = Some(i),
            (Some(start), false) => {
                let mut best = start;
                for j in start..i {
                    if xs[j] > xs[best] {
                        best = j;
                    }
                }
                if best != 0 && best != xs.len() - 1 {
                    peaks.push(best);
                }
                run_start = None;
            }
            _ => {}
        }
    }
    peaks
}

fn ibis_ms(peaks: &[usize], fs: f64) -> Vec<f64> {
    peaks
        .windows(2)
        .map(|w| (w[1] - w[0]) as f64 / fs * 1000.0)
        .collect()
}

fn median(xs: &[f64]) -> f64 {
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 0 {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    } else {
        sorted[mid]
    }
}

/// Drop first/last peaks whose adjacent interval deviates from the median
/// interval by more than 25%. A beat cut by the window edge can leave its
/// secondary bump visible with the masking systolic peak missing, and that
/// stub registers as a spurious edge beat with a far-off interval; genuine
/// beat-to-beat variation in signals this detector accepts stays well
/// inside the tolerance.
fn trim_edge_outliers(peaks: &mut Vec<usize>, fs: f64) {
    while peaks.len() >= 3 {
        let ibis = ibis_ms(peaks, fs);
        let mid = median(&ibis);
        let tol = 0.25 * mid;
        let first = (ibis[0] - mid).abs();
        let last = (ibis[ibis.len() - 1] - mid).abs();
        if first > tol && first >= last {
            peaks.remove(0);
        } else if last > tol {
            peaks.pop();
        } else {
            return;
        }
    }
}

/// Detect beats in `signal` sampled at `fs` Hz.
///
/// Requires at least two seconds of signal. Candidate peaks from each
/// swept threshold are cleaned of window-edge artifacts (maxima on the
/// boundary samples, edge beats with outlier intervals). Fails when no
/// swept threshold yields at least two peaks with a mean rate inside
/// [`DETECT_BPM_RANGE`]. Ties in IBI spread keep the lowest percentage.
pub fn detect_peaks(signal: &[f64], fs: f64) -> Result<BeatSeries, HrError> {
    if !(fs > 0.0) {
        return Err(HrError::BadSampleRate(fs));
    }
    let needed = (2.0 * fs).ceil() as usize;
    if signal.len() < needed {
        return Err(HrError::TooShort {
            got: signal.len(),
            needed,
        });
    }

    let lowest = signal.iter().cloned().fold(f64::INFINITY, f64::min);
    let shifted: Vec<f64> = signal.iter().map(|&x| x - lowest).collect();
    let window = ((ROLLING_MEAN_SECONDS * fs).round() as usize).max(1);
    let envelope = rolling_mean(&shifted, window);
    let level = mean(&shifted);

    let mut best: Option<(f64, BeatSeries)> = None;
    for pct in THRESHOLD_PERCENTAGES {
        let threshold: Vec<f64> = envelope.iter().map(|&e| e + pct / 100.0 * level).collect();
        let mut peak_indices = peaks_above(&shifted, &threshold);
        trim_edge_outliers(&mut peak_indices, fs);
        if peak_indices.len() < 2 {
            continue;
        }
        let ibis = ibis_ms(&peak_indices, fs);
        let bpm = 60_000.0 / mean(&ibis);
        if bpm < DETECT_BPM_RANGE.0 || bpm > DETECT_BPM_RANGE.1 {
            continue;
        }
        let spread = pvar(&ibis).sqrt();
        if best.as_ref().is_none_or(|(s, _)| spread < *s) {
            best = Some(
                (spread, BeatSeries { peak_indices, ibis }),
            );
        }
    }
    best.map(|(_, b)| b).ok_or(HrError::DetectionFailed)
}

/// Mean heart rate of `signal` in BPM: 60000 / mean inter-beat interval.
pub fn hr(signal: &[f64], fs: f64) -> Result<f64, HrError> {
    let beats = detect_peaks(signal, fs)?;
    Ok(60_000.0 / mean(&beats.ibis))
}

/// Root mean square of successive differences of `ibis` (ms).
/// Needs at least two intervals.
pub fn rmssd(ibis: &[f64]) -> Result<f64, HrError> {
    if ibis.len() < 2 {
        return Err(HrError::TooFewIbis {
            got: ibis.len(),
            needed: 2,
        });
    }
    let sq_sum: f64 = ibis.windows(2).map(|w| (w[1] - w[0]) * (w[1] - w[0])).sum();
    Ok((sq_sum / (ibis.len() - 1) as f64).sqrt())
}

/// Poincaré descriptors `(sd1, sd2, sd1/sd2)` of an IBI series.
///
/// sd1 = √(var(diff)/2) and sd2 = √(max(0, 2·var(ibis) − var(diff)/2)),
/// with population variances. The ratio is 0 when both spreads are 0 and
/// +∞ when sd2 = 0 < sd1 (which the quality gate then fails).
/// Needs at least three intervals.
pub fn poincare(ibis: &[f64]) -> Result<(f64, f64, f64), HrError> {
    if ibis.len() < 3 {
        return Err(HrError::TooFewIbis {
            got: ibis.len(),
            needed: 3,
        });
    }
    let diffs: Vec<f64> = ibis.windows(2).map(|w| w[1] - w[0]).collect();
    let vd = pvar(&diffs);
    let vi = pvar(ibis);
    let sd1 = (vd / 2.0).sqrt();
    let sd2 = (2.0 * vi - vd / 2.0).max(0.0).sqrt();
    let ratio = if sd2 > 0.0 {
        sd1 / sd2
    } else if sd1 > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    Ok((sd1, sd2, ratio))
}

/// Accept or reject a window for use as ground truth.
///
/// Accepts iff 40 < bpm < 150, every IBI lies in (400, 2000) ms,
/// rmssd < 100 ms and sd1/sd2 < 6.0; otherwise reports the first
/// violated criterion. Needs at least three IBIs (four beats) so all
/// statistics are defined.
pub fn quality_gate(signal: &[f64], fs: f64) -> Result<HrStats, GateReject> {
    let beats = detect_peaks(signal, fs)?;
    if beats.ibis.len() < 3 {
        return Err(GateReject::Detection(HrError::TooFewIbis {
            got: beats.ibis.len(),
            needed: 3,
        }));
    }
    let bpm = 60_000.0 / mean(&beats.ibis);
    if bpm <= GATE_BPM.0 || bpm >= GATE_BPM.1 {
        return Err(GateReject::BpmOutOfRange(bpm));
    }
    for &ibi in &beats.ibis {
        if ibi <= GATE_IBI_MS.0 || ibi >= GATE_IBI_MS.1 {
            return Err(GateReject::IbiOutOfRange(ibi));
        }
    }
    let rm = rmssd(&beats.ibis).expect("gate requires >= 3 ibis");
    if rm >= GATE_RMSSD_MS {
        return Err(GateReject::RmssdTooHigh(rm));
    }
    let (sd1, sd2, ratio) = poincare(&beats.ibis).expect("gate requires >= 3 ibis");
    if !(ratio < GATE_SD1SD2) {
        return Err(GateReject::Sd1Sd2TooHigh(ratio));
    }
    Ok(HrStats {
        bpm,
        rmssd: rm,
        sd1,
        sd2,
        sd1sd2: ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Unit impulses every `period_s` seconds for `dur_s` seconds,
    /// starting half a period in so no impulse sits on a window edge.
    fn impulse_train(period_s: f64, dur_s: f64, fs: f64) -> Vec<f64> {
        let n = (dur_s * fs) as usize;
        let mut x = vec![0.0; n];
        let mut t = period_s / 2.0;
        while (t * fs).round() < n as f64 {
            x[(t * fs).round() as usize] = 1.0;
            t += period_s;
        }
        x
    }

    /// Smooth pulse train: one Gaussian bump per beat at exact intervals.
    fn bump_train(bpm: f64, dur_s: f64, fs: f64) -> Vec<f64> {
        let n = (dur_s * fs) as usize;
        let period = 60.0 / bpm;
        let width = 0.06 * period;
        let mut x = vec![0.0; n];
        for (i, v) in x.iter_mut().enumerate() {
            let t = i as f64 / fs;
            let phase = (t / period).round();
            let dt = t - phase * period;
            *v = (-0.5 * (dt / width) * (dt / width)).exp();
        }
        x
    }

    #[test]
    fn one_hz_impulse_train_gives_six_peaks_and_60_bpm() {
        let x = impulse_train(1.0, 6.0, 125.0);
        let beats = detect_peaks(&x, 125.0).unwrap();
        assert_eq!(beats.peak_indices.len(), 6);
        assert!(beats.ibis.iter().all(|&i| i == 1000.0));
        assert_relative_eq!(hr(&x, 125.0).unwrap(), 60.0);
    }

    #[test]
    fn flat_zero_signal_fails_detection() {
        let x = vec![0.0; 750];
        assert_eq!(detect_peaks(&x, 125.0).unwrap_err(), HrError::DetectionFailed);
    }

    #[test]
    fn short_signal_rejected() {
        let x = vec![0.0; 249];
        assert_eq!(
            detect_peaks(&x, 125.0).unwrap_err(),
            HrError::TooShort { got: 249, needed: 250 }
        );
    }

    #[test]
    fn hr_invariant_to_scaling_and_offset() {
        let x = bump_train(72.0, 6.0, 125.0);
        let base = hr(&x, 125.0).unwrap();
        let scaled: Vec<f64> = x.iter().map(|&v| 3.7 * v - 11.0).collect();
        assert_relative_eq!(hr(&scaled, 125.0).unwrap(), base);
    }

    #[test]
    fn pulse_trains_recover_rate_within_2_bpm_across_40_to_150() {
        let mut bpm = 40.0;
        while bpm <= 150.0 {
            let x = bump_train(bpm, 6.0, 125.0);
            let est = hr(&x, 125.0).unwrap();
            assert!(
                (est - bpm).abs() <= 2.0,
                "estimated {est:.2} for true {bpm}"
            );
            bpm += 5.0;
        }
    }

    #[test]
    fn rmssd_known_values() {
        assert_relative_eq!(rmssd(&[800.0, 850.0, 800.0]).unwrap(), 50.0);
        assert_eq!(rmssd(&[700.0; 5]).unwrap(), 0.0);
    }

    #[test]
    fn rmssd_is_homogeneous() {
        let ibis = [810.0, 770.0, 845.0, 790.0];
        let doubled: Vec<f64> = ibis.iter().map(|&i| 2.0 * i).collect();
        assert_relative_eq!(
            rmssd(&doubled).unwrap(),
            2.0 * rmssd(&ibis).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn rmssd_needs_two_ibis() {
        assert_eq!(
            rmssd(&[800.0]).unwrap_err(),
            HrError::TooFewIbis { got: 1, needed: 2 }
        );
    }

    #[test]
    fn poincare_constant_series_is_degenerate_zero() {
        let (sd1, sd2, ratio) = poincare(&[820.0; 6]).unwrap();
        assert_eq!((sd1, sd2, ratio), (0.0, 0.0, 0.0));
    }

    #[test]
    fn poincare_matches_brute_force_variance_oracle() {
        let ibis = [800.0, 900.0, 800.0, 900.0, 800.0];
        let diffs: Vec<f64> = ibis.windows(2).map(|w| w[1] - w[0]).collect();
        let brute_var = |xs: &[f64]| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64
        };
        let (sd1, sd2, ratio) = poincare(&ibis).unwrap();
        assert_relative_eq!(sd1, (brute_var(&diffs) / 2.0).sqrt());
        assert_relative_eq!(
            sd2,
            (2.0 * brute_var(&ibis) - brute_var(&diffs) / 2.0)
                .max(0.0)
                .sqrt()
        );
        // Alternating series collapses sd2 to zero, so the ratio blows up.
        assert_eq!(sd2, 0.0);
        assert!(ratio.is_infinite());
    }

    #[test]
    fn poincare_nonnegative_for_random_series() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n = rng.gen_range(3..20);
            let ibis: Vec<f64> = (0..n).map(|_| rng.gen_range(400.0..1500.0)).collect();
            let (sd1, sd2, _) = poincare(&ibis).unwrap();
            assert!(sd1 >= 0.0 && sd2 >= 0.0);
        }
    }

    #[test]
    fn gate_accepts_clean_pulse_train_with_rate_label() {
        let x = bump_train(75.0, 6.0, 125.0);
        let stats = quality_gate(&x, 125.0).unwrap();
        assert!((stats.bpm - 75.0).abs() <= 2.0);
        assert!(stats.rmssd < GATE_RMSSD_MS);
    }

    #[test]
    fn gate_rejects_160_bpm_train_on_rate_bound() {
        let x = bump_train(160.0, 6.0, 125.0);
        match quality_gate(&x, 125.0) {
            Err(GateReject::BpmOutOfRange(bpm)) => assert!(bpm > 150.0),
            other => panic!("expected rate rejection, got {other:?}"),
        }
    }

    #[test]
    fn gate_reports_detection_failure_with_reason() {
        let flat = vec![1.0; 750];
        match quality_gate(&flat, 125.0) {
            Err(GateReject::Detection(HrError::DetectionFailed)) => {}
            other => panic!("expected detection failure, got {other:?}"),
        }
    }

    #[test]
    fn constant_ibi_train_passes_rmssd_criterion() {
        let x = impulse_train(0.8, 6.0, 125.0);
        let stats = quality_gate(&x, 125.0).unwrap();
        assert_eq!(stats.rmssd, 0.0);
        assert_relative_eq!(stats.bpm, 75.0);
    }
}
