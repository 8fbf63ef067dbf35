//! Synthetic noise contamination and motion-artifact blending.
//!
//! Every operation is pure and deterministic given its spec: the same
//! seed yields a bit-identical noisy output, and contamination never
//! changes the segment length.

use super::{derive_rng, DataError};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// The seven synthetic corruption families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Additive white Gaussian noise scaled to a target SNR (dB).
    Gaussian,
    /// Additive uniform noise scaled to a target SNR (dB).
    Uniform,
    /// Multiplicative Gaussian (signal × noise) scaled to a target SNR (dB).
    Speckle,
    /// Linear baseline ramp; intensity = end amplitude in units of signal std.
    SlopingBaseline,
    /// Symmetric clipping; intensity = percentile of |signal| giving the level.
    Saturation,
    /// Shot noise: Poisson counts of the min-shifted signal; intensity =
    /// counts per amplitude unit (smaller ⇒ noisier).
    Poisson,
    /// Impulses at the signal min/max; intensity = corrupted fraction.
    SaltPepper,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 7] = [
        NoiseKind::Gaussian,
        NoiseKind::Uniform,
        NoiseKind::Speckle,
        NoiseKind::SlopingBaseline,
        NoiseKind::Saturation,
        NoiseKind::Poisson,
        NoiseKind::SaltPepper,
    ];

    /// Default intensity used when a profile does not draw one.
    pub fn default_intensity(self) -> f64 {
        match self {
            NoiseKind::Gaussian | NoiseKind::Uniform | NoiseKind::Speckle => 5.0,
            NoiseKind::SlopingBaseline => 1.0,
            NoiseKind::Saturation => 90.0,
            NoiseKind::Poisson => 30.0,
            NoiseKind::SaltPepper => 0.01,
        }
    }

    /// Draw an intensity from the kind's documented range: target SNR
    /// uniform in [0, 10] dB for the additive/multiplicative kinds, end
    /// amplitude uniform in [0.5, 2]×std for the ramp, the 90th
    /// percentile for saturation, 10–50 counts per unit for shot noise,
    /// and density uniform in [0.5%, 2%] for impulses.
    pub fn draw_intensity<R: Rng>(self, rng: &mut R) -> f64 {
        match self {
            NoiseKind::Gaussian | NoiseKind::Uniform | NoiseKind::Speckle => {
                rng.gen_range(0.0..10.0)
            }
            NoiseKind::SlopingBaseline => rng.gen_range(0.5..2.0),
            NoiseKind::Saturation => 90.0,
            NoiseKind::Poisson => rng.gen_range(10.0..50.0),
            NoiseKind::SaltPepper => rng.gen_range(0.005..0.02),
        }
    }
}

/// A fully determined contamination: kind, kind-specific intensity, seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub intensity: f64,
    pub rng_seed: u64,
}

/// A fully determined motion blend: where the motion window starts in
/// the motion record, how much of the segment is blended, and the seed
/// that places the blended span.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub blend_fraction: f64,
    pub alignment_offset: usize,
    pub rng_seed: u64,
}

const NOISE_TAG: u64 = 0x4e4f4953;
const MIX_TAG: u64 = 0x4d495853;

fn sum_sq(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum()
}

/// Scale `noise` in place so that SNR(clean + noise, clean) hits
/// `target_snr_db` exactly: ‖c·noise‖² = ‖clean‖² / 10^(snr/10).
fn scale_to_snr(clean: &[f64], noise: &mut [f64], target_snr_db: f64) {
    let signal_power = sum_sq(clean);
    let noise_power = sum_sq(noise);
    if noise_power == 0.0 || signal_power == 0.0 {
        noise.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let c = (signal_power / (10f64.powf(target_snr_db / 10.0) * noise_power)).sqrt();
    noise.iter_mut().for_each(|v| *v *= c);
}

/// Nearest-rank percentile of a nonnegative slice, `p` in [0, 100].
fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = ((p / 100.0) * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// Apply one synthetic corruption to a clean segment. Pure and
/// deterministic in `spec`; the output always has the input's length.
pub fn add_synthetic_noise(clean: &[f64], spec: &NoiseSpec) -> Result<Vec<f64>, DataError> {
    let n = clean.len();
    let mut rng = derive_rng(spec.rng_seed, spec.kind as u64, NOISE_TAG);
    match spec.kind {
        NoiseKind::Gaussian => {
            let mut noise: Vec<f64> =
                (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            scale_to_snr(clean, &mut noise, spec.intensity);
            Ok(clean.iter().zip(&noise).map(|(c, w)| c + w).collect())
        }
        NoiseKind::Uniform => {
            let mut noise: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            scale_to_snr(clean, &mut noise, spec.intensity);
            Ok(clean.iter().zip(&noise).map(|(c, w)| c + w).collect())
        }
        NoiseKind::Speckle => {
            let mut noise: Vec<f64> = clean
                .iter()
                .map(|&c| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    c * e
                })
                .collect();
            scale_to_snr(clean, &mut noise, spec.intensity);
            Ok(clean.iter().zip(&noise).map(|(c, w)| c + w).collect())
        }
        NoiseKind::SlopingBaseline => {
            let mean = clean.iter().sum::<f64>() / n.max(1) as f64;
            let std = (clean.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>()
                / n.max(1) as f64)
                .sqrt();
            let end = spec.intensity * std;
            let denom = (n - 1).max(1) as f64;
            Ok(clean
                .iter()
                .enumerate()
                .map(|(i, c)| c + end * i as f64 / denom)
                .collect())
        }
        NoiseKind::Saturation => {
            if !(0.0..=100.0).contains(&spec.intensity) {
                return Err(DataError::BadParam {
                    op: "add_synthetic_noise",
                    param: "saturation percentile",
                    value: spec.intensity,
                    expected: "[0, 100]",
                });
            }
            let mut mags: Vec<f64> = clean.iter().map(|c| c.abs()).collect();
            mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let level = percentile(&mags, spec.intensity);
            Ok(clean.iter().map(|&c| c.clamp(-level, level)).collect())
        }
        NoiseKind::Poisson => {
            if spec.intensity <= 0.0 {
                return Err(DataError::BadParam {
                    op: "add_synthetic_noise",
                    param: "poisson counts per unit",
                    value: spec.intensity,
                    expected: "> 0",
                });
            }
            let lowest = clean.iter().cloned().fold(f64::INFINITY, f64::min);
            let scale = spec.intensity;
            Ok(clean
                .iter()
                .map(|&c| {
                    let lambda = (c - lowest) * scale;
                    let count = if lambda > 0.0 {
                        rand_distr::Poisson::new(lambda).unwrap().sample(&mut rng)
                    } else {
                        0.0
                    };
                    lowest + count / scale
                })
                .collect())
        }
        NoiseKind::SaltPepper => {
            if !(0.0..=1.0).contains(&spec.intensity) {
                return Err(DataError::BadParam {
                    op: "add_synthetic_noise",
                    param: "salt/pepper density",
                    value: spec.intensity,
                    expected: "[0, 1]",
                });
            }
            let lowest = clean.iter().cloned().fold(f64::INFINITY, f64::min);
            let highest = clean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            Ok(clean
                .iter()
                .map(|&c| {
                    let u: f64 = rng.gen_range(0.0..1.0);
                    if u < spec.intensity / 2.0 {
                        lowest
                    } else if u < spec.intensity {
                        highest
                    } else {
                        c
                    }
                })
                .collect())
        }
    }
}

/// Blend a motion window into a clean segment: a 750-sample motion
/// window is taken at `alignment_offset`, a contiguous span of
/// round(blend_fraction × len) samples is placed at a seeded position,
/// and within the span the output is the sample-wise average
/// (clean + motion)/2; elsewhere it is the clean signal.
pub fn blend_motion(clean: &[f64], motion: &[f64], mix: &MixSpec) -> Result<Vec<f64>, DataError> {
    let n = clean.len();
    if !(0.0..=1.0).contains(&mix.blend_fraction) {
        return Err(DataError::BadParam {
            op: "blend_motion",
            param: "blend_fraction",
            value: mix.blend_fraction,
            expected: "[0, 1]",
        });
    }
    if mix.alignment_offset + n > motion.len() {
        return Err(DataError::MotionTooShort {
            got: motion.len(),
            needed: n,
            offset: mix.alignment_offset,
        });
    }
    let window = &motion[mix.alignment_offset..mix.alignment_offset + n];
    let span = (mix.blend_fraction * n as f64).round() as usize;
    let mut out = clean.to_vec();
    if span == 0 {
        return Ok(out);
    }
    let mut rng = derive_rng(mix.rng_seed, mix.alignment_offset as u64, MIX_TAG);
    let start = rng.gen_range(0..=n - span);
    for i in start..start + span {
        out[i] = 0.5 * (clean[i] + window[i]);
    }
    Ok(out)
}

/// Per-segment contamination provenance, written next to the store.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub segment: usize,
    pub noise: Option<NoiseSpec>,
    pub motion: Option<MixSpec>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::synth_clean_ppg;
    use crate::metrics::snr_db;

    fn clean_segment() -> Vec<f64> {
        synth_clean_ppg(72.0, 6.0, 125.0, 77).unwrap().samples
    }

    #[test]
    fn gaussian_hits_target_snr_exactly() {
        let g = clean_segment();
        for target in [0.0, 5.0, 10.0] {
            let spec = NoiseSpec {
                kind: NoiseKind::Gaussian,
                intensity: target,
                rng_seed: 3,
            };
            let n = add_synthetic_noise(&g, &spec).unwrap();
            let measured = snr_db(&n, &g).unwrap();
            assert!(
                (measured - target).abs() < 1e-9,
                "target {target} measured {measured}"
            );
        }
    }

    #[test]
    fn uniform_and_speckle_hit_target_snr() {
        let g = clean_segment();
        for kind in [NoiseKind::Uniform, NoiseKind::Speckle] {
            let spec = NoiseSpec {
                kind,
                intensity: 4.0,
                rng_seed: 5,
            };
            let n = add_synthetic_noise(&g, &spec).unwrap();
            assert!((snr_db(&n, &g).unwrap() - 4.0).abs() < 1e-9);
        }
    }

    #[test]
    fn salt_pepper_density_zero_is_identity() {
        let g = clean_segment();
        let spec = NoiseSpec {
            kind: NoiseKind::SaltPepper,
            intensity: 0.0,
            rng_seed: 9,
        };
        assert_eq!(add_synthetic_noise(&g, &spec).unwrap(), g);
    }

    #[test]
    fn saturation_above_max_is_identity() {
        let g = clean_segment();
        let spec = NoiseSpec {
            kind: NoiseKind::Saturation,
            intensity: 100.0,
            rng_seed: 0,
        };
        assert_eq!(add_synthetic_noise(&g, &spec).unwrap(), g);
    }

    #[test]
    fn saturation_at_90th_percentile_clips_the_top() {
        let g = clean_segment();
        let spec = NoiseSpec {
            kind: NoiseKind::Saturation,
            intensity: 90.0,
            rng_seed: 0,
        };
        let n = add_synthetic_noise(&g, &spec).unwrap();
        let peak_in = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let peak_out = n.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(peak_out < peak_in);
        assert_ne!(n, g);
    }

    #[test]
    fn every_kind_is_deterministic_and_length_preserving() {
        let g = clean_segment();
        for kind in NoiseKind::ALL {
            let spec = NoiseSpec {
                kind,
                intensity: kind.default_intensity(),
                rng_seed: 21,
            };
            let a = add_synthetic_noise(&g, &spec).unwrap();
            let b = add_synthetic_noise(&g, &spec).unwrap();
            assert_eq!(a, b, "{kind:?} not deterministic");
            assert_eq!(a.len(), g.len(), "{kind:?} changed length");
        }
    }

    #[test]
    fn every_kind_strictly_corrupts_at_default_intensity() {
        let g = clean_segment();
        for kind in NoiseKind::ALL {
            let spec = NoiseSpec {
                kind,
                intensity: kind.default_intensity(),
                rng_seed: 2,
            };
            let n = add_synthetic_noise(&g, &spec).unwrap();
            assert_ne!(n, g, "{kind:?} left the signal untouched");
            let snr = snr_db(&n, &g).unwrap();
            assert!(snr.is_finite() && snr < 100.0, "{kind:?} snr {snr}");
        }
    }

    #[test]
    fn poisson_noise_preserves_the_floor() {
        let g = clean_segment();
        let spec = NoiseSpec {
            kind: NoiseKind::Poisson,
            intensity: 30.0,
            rng_seed: 8,
        };
        let n = add_synthetic_noise(&g, &spec).unwrap();
        let floor = g.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(n.iter().all(|&v| v >= floor - 1e-12));
    }

    #[test]
    fn blend_fraction_zero_is_identity() {
        let g = clean_segment();
        let motion = vec![0.5; 800];
        let mix = MixSpec {
            blend_fraction: 0.0,
            alignment_offset: 10,
            rng_seed: 1,
        };
        assert_eq!(blend_motion(&g, &motion, &mix).unwrap(), g);
    }

    #[test]
    fn blending_identical_motion_is_identity() {
        let g = clean_segment();
        let mix = MixSpec {
            blend_fraction: 1.0,
            alignment_offset: 0,
            rng_seed: 1,
        };
        assert_eq!(blend_motion(&g, &g, &mix).unwrap(), g);
    }

    #[test]
    fn blending_zero_motion_halves_the_signal() {
        let g = clean_segment();
        let motion = vec![0.0; 750];
        let mix = MixSpec {
            blend_fraction: 1.0,
            alignment_offset: 0,
            rng_seed: 1,
        };
        let out = blend_motion(&g, &motion, &mix).unwrap();
        for (o, c) in out.iter().zip(&g) {
            assert_eq!(*o, c / 2.0);
        }
    }

    #[test]
    fn short_motion_record_is_rejected() {
        let g = clean_segment();
        let motion = vec![0.0; 700];
        let mix = MixSpec {
            blend_fraction: 0.5,
            alignment_offset: 0,
            rng_seed: 1,
        };
        assert!(matches!(
            blend_motion(&g, &motion, &mix),
            Err(DataError::MotionTooShort { .. })
        ));
    }

    #[test]
    fn partial_blend_touches_only_a_contiguous_span() {
        let g = clean_segment();
        let motion = vec![10.0; 750];
        let mix = MixSpec {
            blend_fraction: 0.4,
            alignment_offset: 0,
            rng_seed: 6,
        };
        let out = blend_motion(&g, &motion, &mix).unwrap();
        let changed: Vec<usize> = (0..g.len()).filter(|&i| out[i] != g[i]).collect();
        assert_eq!(changed.len(), 300);
        assert_eq!(changed.last().unwrap() - changed.first().unwrap(), 299);
    }
}
