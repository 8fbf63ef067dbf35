//! Synthetic clean PPG and pseudo-motion generation for desk-scale runs.

use super::{
    derive_rng, split_assignments, DataError, Record, SegmentStore, Source, StoredSegment,
    SEGMENT_LEN, TARGET_FS, WINDOW_SECONDS,
};
use crate::hr::quality_gate;
use rand::Rng;

/// Default relative jitter of beat-to-beat intervals (1.5%, under the
/// 2% the generator promises).
pub const DEFAULT_JITTER: f64 = 0.015;

/// Systolic peak: amplitude, phase within the beat, width (both as
/// fractions of the period).
const SYSTOLIC: (f64, f64, f64) = (1.0, 0.30, 0.09);
/// Dicrotic bump, same parameterization.
const DICROTIC: (f64, f64, f64) = (0.25, 0.62, 0.13);
/// Seconds between beat-interval drift changes. Longer than one analysis
/// window, so any 6 s window sees at most one interval step.
const DRIFT_STRETCH_SECONDS: f64 = 8.0;

/// RNG purpose tags.
const BEAT_TAG: u64 = 0x42454154;
const MOTION_TAG: u64 = 0x4d4f544e;
const STORE_TAG: u64 = 0x53544f52;

/// Generate a quasi-periodic clean PPG record: two Gaussians per beat
/// (systolic peak plus dicrotic bump). Beat onsets sit on whole samples
/// with the base interval snapped to the sample grid, and the interval
/// drifts in seeded integer-sample steps of relative size ≤ `jitter`,
/// held constant over [`DRIFT_STRETCH_SECONDS`] stretches. `jitter = 0`
/// yields an exactly periodic waveform. The global phase is drawn from
/// the seed.
///
/// The drift is piecewise-constant rather than white on purpose: any
/// analysis window shorter than a stretch then measures inter-beat
/// intervals that are constant or carry one monotone step, and equal
/// intervals repeat bit-identical beat waveforms (rendering uses offsets
/// relative to each onset). Both properties keep the small-sample
/// Poincaré statistics of clean signals away from the quality gate's
/// sd1/sd2 bound, which white jitter — at any magnitude, because the
/// ratio is scale-free — trips with high probability on short windows.
pub fn synth_clean_ppg_with_jitter(
    bpm: f64,
    duration_s: f64,
    fs: f64,
    seed: u64,
    jitter: f64,
) -> Result<Record, DataError> {
    if !(40.0 < bpm && bpm < 150.0) {
        return Err(DataError::BadParam {
            op: "synth_clean_ppg",
            param: "bpm",
            value: bpm,
            expected: "(40, 150)",
        });
    }
    if !(0.0..0.02 + 1e-12).contains(&jitter) {
        return Err(DataError::BadParam {
            op: "synth_clean_ppg",
            param: "jitter",
            value: jitter,
            expected: "[0, 0.02]",
        });
    }
    let mut rng = derive_rng(seed, 0, BEAT_TAG);
    let n = (duration_s * fs).round() as usize;
    // Base beat interval in whole samples.
    let period = (60.0 / bpm * fs).round() as i64;
    let max_step = (jitter * period as f64).floor() as i64;
    let stretch = (DRIFT_STRETCH_SECONDS * fs).round().max(1.0) as i64;

    // One interval offset per drift stretch, drawn in index order. Onsets
    // start two periods early so edge samples see complete beats.
    let first_stretch = (-2 * period).div_euclid(stretch);
    let last_stretch = (n as i64 + period).div_euclid(stretch);
    let steps: Vec<i64> = (first_stretch..=last_stretch)
        .map(|_| {
            if max_step > 0 {
                rng.gen_range(-max_step..=max_step)
            } else {
                0
            }
        })
        .collect();

    let phase = rng.gen_range(0..period);
    let mut onsets = Vec::new();
    let mut onset = -2 * period + phase;
    while onset < n as i64 + period {
        onsets.push(onset);
        let j = (onset.div_euclid(stretch) - first_stretch) as usize;
        onset += period + steps[j.min(steps.len() - 1)];
    }

    let mut samples = vec![0.0; n];
    let period_f = period as f64;
    for &o in &onsets {
        for &(amp, at, width) in &[SYSTOLIC, DICROTIC] {
            // Work in samples relative to the onset, so equal-interval
            // beats produce bit-identical values.
            let center = at * period_f;
            let w = width * period_f;
            // Gaussians are negligible beyond 5 widths.
            let lo = (o + (center - 5.0 * w).floor() as i64).max(0);
            let hi = (o + (center + 5.0 * w).ceil() as i64).min(n as i64);
            for i in lo..hi {
                let dt = ((i - o) as f64 - center) / w;
                samples[i as usize] += amp * (-0.5 * dt * dt).exp();
            }
        }
    }
    Ok(Record {
        subject_id: format!("synth-{seed:08x}"),
        fs,
        samples,
        source: Source::Synthetic,
    })
}

/// [`synth_clean_ppg_with_jitter`] at the default jitter.
pub fn synth_clean_ppg(bpm: f64, duration_s: f64, fs: f64, seed: u64) -> Result<Record, DataError> {
    synth_clean_ppg_with_jitter(bpm, duration_s, fs, seed, DEFAULT_JITTER)
}

/// Generate a pseudo-motion record: a slow AR(1) random walk rescaled to
/// unit standard deviation, mimicking low-frequency wrist movement. Used
/// when no real motion recording is supplied.
pub fn synth_motion_record(duration_s: f64, fs: f64, seed: u64) -> Record {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = derive_rng(seed, 0, MOTION_TAG);
    let n = (duration_s * fs).round() as usize;
    let mut samples = Vec::with_capacity(n);
    let mut x = 0.0;
    for _ in 0..n {
        let w: f64 = StandardNormal.sample(&mut rng);
        x = 0.995 * x + 0.1 * w;
        samples.push(x);
    }
    let mean = samples.iter().sum::<f64>() / n.max(1) as f64;
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n.max(1) as f64;
    let std = var.sqrt();
    if std > 0.0 {
        for v in &mut samples {
            *v = (*v - mean) / std;
        }
    }
    Record {
        subject_id: format!("motion-{seed:08x}"),
        fs,
        samples,
        source: Source::Synthetic,
    }
}

/// Build a store of `n` synthetic quality-gated segments with an 8:1:1
/// split: each segment is one 6-second generation at a rate drawn from
/// (45, 145) BPM, regenerated with fresh seeds until the quality gate
/// accepts it. The noisy channel starts equal to the clean channel.
pub fn synthesize_store(n: usize, seed: u64) -> Result<SegmentStore, DataError> {
    if n == 0 {
        return Err(DataError::Empty("synthesize_store needs n > 0"));
    }
    let mut rng = derive_rng(seed, 0, STORE_TAG);
    let mut segments = Vec::with_capacity(n);
    let mut attempt = 0u64;
    while segments.len() < n {
        let bpm = rng.gen_range(45.0..145.0);
        let gen_seed = seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(attempt);
        attempt += 1;
        let record = synth_clean_ppg(bpm, WINDOW_SECONDS, TARGET_FS, gen_seed)?;
        debug_assert_eq!(record.samples.len(), SEGMENT_LEN);
        if let Ok(stats) = quality_gate(&record.samples, TARGET_FS) {
            segments.push(StoredSegment {
                clean: record.samples.clone(),
                noisy: record.samples,
                bpm_label: stats.bpm,
                split: super::Split::Train,
            });
        }
    }
    let splits = split_assignments(n, seed);
    for (seg, split) in segments.iter_mut().zip(splits) {
        seg.split = split;
    }
    Ok(SegmentStore {
        fs: TARGET_FS,
        segments,
    })
}
