//! Data pipeline: ingestion, resampling, segmentation, quality gating,
//! synthetic clean-PPG generation, noise contamination, motion blending,
//! dataset splitting, and the on-disk segment store.
//!
//! The unit of training and evaluation is one [`SEGMENT_LEN`]-sample
//! window at [`TARGET_FS`] Hz. Segments are z-scored before entering a
//! model, and denoised outputs are compared in z-scored space.

mod filter;
mod ingest;
mod noise;
mod store;
mod synth;

pub use filter::bandpass_baseline;
pub use ingest::{
    ingest_csv, prepare_records, resample, segment_windows, GateSummary, PreparedDataset,
};
pub use noise::{add_synthetic_noise, blend_motion, MixSpec, NoiseKind, NoiseSpec, ProvenanceEntry};
pub use store::{Manifest, ManifestSeeds, SegmentStore, StoredSegment, STORE_VERSION};
pub use synth::{synth_clean_ppg, synth_motion_record, synthesize_store, DEFAULT_JITTER};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Samples per segment: 6 s at 125 Hz.
pub const SEGMENT_LEN: usize = 750;
/// Sample rate every segment is expressed at.
pub const TARGET_FS: f64 = 125.0;
/// Segment window length in seconds.
pub const WINDOW_SECONDS: f64 = 6.0;
/// Hop between successive windows in seconds (6 s window − 4 s overlap).
pub const HOP_SECONDS: f64 = 2.0;

/// Errors raised by the data pipeline.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("column {name:?} not found; available: {available:?}")]
    MissingColumn { name: String, available: Vec<String> },
    #[error("no usable rows in {path}")]
    NoUsableRows { path: String },
    #[error("cannot resample {from} Hz up to {to} Hz (downsampling only)")]
    Upsample { from: f64, to: f64 },
    #[error("record of {got} samples is shorter than one {needed}-sample window")]
    RecordTooShort { got: usize, needed: usize },
    #[error("motion record of {got} samples cannot cover a {needed}-sample window at offset {offset}")]
    MotionTooShort {
        got: usize,
        needed: usize,
        offset: usize,
    },
    #[error("{op}: parameter {param} = {value} outside {expected}")]
    BadParam {
        op: &'static str,
        param: &'static str,
        value: f64,
        expected: &'static str,
    },
    #[error("segment has {got} samples, store requires {expected}")]
    BadSegmentLen { got: usize, expected: usize },
    #[error("not a segment store: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported store version {0}")]
    BadVersion(u32),
    #[error("store file truncated: expected {expected} bytes, found {got}")]
    Truncated { expected: u64, got: u64 },
    #[error("invalid split tag {0}")]
    BadSplitTag(u8),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("empty dataset: {0}")]
    Empty(&'static str),
}

/// Which partition a segment belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    /// Store tag byte: 0 train, 1 val, 2 test.
    pub fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self, DataError> {
        match tag {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            other => Err(DataError::BadSplitTag(other)),
        }
    }

    fn letter(self) -> char {
        match self {
            Split::Train => 't',
            Split::Val => 'v',
            Split::Test => 's',
        }
    }

    fn from_letter(c: char) -> Option<Self> {
        match c {
            't' => Some(Split::Train),
            'v' => Some(Split::Val),
            's' => Some(Split::Test),
            _ => None,
        }
    }
}

/// Where a record came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    BidmcCsv,
    WristCsv,
    Synthetic,
}

/// One continuous recording from a single subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub subject_id: String,
    pub fs: f64,
    pub samples: Vec<f64>,
    pub source: Source,
}

/// One quality-gated clean window with its rate label.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    /// Clean samples, [`SEGMENT_LEN`] at [`TARGET_FS`].
    pub samples: Vec<f64>,
    /// Heart rate of the clean window in BPM.
    pub bpm_label: f64,
    pub subject_id: String,
    pub window_index: usize,
    pub split: Split,
}

/// Z-score a signal with population statistics. A constant signal
/// (zero standard deviation) maps to all zeros.
pub fn zscore(xs: &[f64]) -> Vec<f64> {
    if xs.is_empty() {
        return Vec::new();
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
    let std = var.sqrt();
    if std == 0.0 {
        vec![0.0; xs.len()]
    } else {
        xs.iter().map(|x| (x - mean) / std).collect()
    }
}

/// RNG purpose tag for dataset splitting streams.
const SPLIT_TAG: u64 = 0x53504c49;

/// Derive an independent deterministic RNG stream from a global seed,
/// a stream index (e.g. segment position), and a fixed purpose tag so
/// different pipeline stages never share a stream.
pub fn derive_rng(global_seed: u64, stream: u64, tag: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[0..8].copy_from_slice(&global_seed.to_le_bytes());
    seed[8..16].copy_from_slice(&stream.to_le_bytes());
    seed[16..24].copy_from_slice(&tag.to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}

/// Assign `n` segments to train/val/test at an 8:1:1 ratio:
/// deterministic shuffle by `seed`, val and test each get round(n/10),
/// the remainder trains. Counts differ from the exact ratio by at most
/// one each.
pub fn split_assignments(n: usize, seed: u64) -> Vec<Split> {
    use rand::seq::SliceRandom;
    let n_val = ((n as f64) * 0.1).round() as usize;
    let n_test = n_val;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive_rng(seed, 0, SPLIT_TAG));
    let mut splits = vec![Split::Train; n];
    for (rank, &idx) in order.iter().enumerate() {
        splits[idx] = if rank < n_val {
            Split::Val
        } else if rank < n_val + n_test {
            Split::Test
        } else {
            Split::Train
        };
    }
    splits
}

/// Subject-wise variant: whole subjects are assigned to one partition,
/// greedily filling val then test toward round(n/10) segments each.
/// Counts can deviate from the exact ratio by up to one subject's worth
/// of segments.
pub fn split_assignments_by_subject(subjects: &[String], seed: u64) -> Vec<Split> {
    use rand::seq::SliceRandom;
    let n = subjects.len();
    let target = ((n as f64) * 0.1).round() as usize;
    let mut uniques: Vec<&String> = Vec::new();
    for s in subjects {
        if !uniques.contains(&s) {
            uniques.push(s);
        }
    }
    let mut order: Vec<usize> = (0..uniques.len()).collect();
    order.shuffle(&mut derive_rng(seed, 1, SPLIT_TAG));
    let count_of = |subj: &String| subjects.iter().filter(|s| *s == subj).count();
    let mut assignment = std::collections::HashMap::new();
    let (mut in_val, mut in_test) = (0usize, 0usize);
    for &ui in &order {
        let subj = uniques[ui];
        let c = count_of(subj);
        let split = if in_val < target {
            in_val += c;
            Split::Val
        } else if in_test < target {
            in_test += c;
            Split::Test
        } else {
            Split::Train
        };
        assignment.insert(subj.clone(), split);
    }
    subjects.iter().map(|s| assignment[s]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zscore_normalizes_mean_and_std() {
        let z = zscore(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let mean: f64 = z.iter().sum::<f64>() / z.len() as f64;
        let var: f64 = z.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / z.len() as f64;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zscore_of_constant_signal_is_zero() {
        assert_eq!(zscore(&[3.5; 10]), vec![0.0; 10]);
    }

    #[test]
    fn split_ten_segments_is_exact_ratio() {
        let splits = split_assignments(10, 1);
        let count = |s: Split| splits.iter().filter(|&&x| x == s).count();
        assert_eq!(
            (count(Split::Train), count(Split::Val), count(Split::Test)),
            (8, 1, 1)
        );
    }

    #[test]
    fn split_238_segments_gives_190_24_24() {
        let splits = split_assignments(238, 7);
        let count = |s: Split| splits.iter().filter(|&&x| x == s).count();
        assert_eq!(
            (count(Split::Train), count(Split::Val), count(Split::Test)),
            (190, 24, 24)
        );
    }

    #[test]
    fn split_is_deterministic_in_seed() {
        assert_eq!(split_assignments(100, 42), split_assignments(100, 42));
        assert_ne!(split_assignments(100, 42), split_assignments(100, 43));
    }

    #[test]
    fn split_is_a_partition() {
        let splits = split_assignments(57, 3);
        assert_eq!(splits.len(), 57);
        let count = |s: Split| splits.iter().filter(|&&x| x == s).count();
        assert_eq!(
            count(Split::Train) + count(Split::Val) + count(Split::Test),
            57
        );
    }

    #[test]
    fn subject_split_keeps_subjects_whole() {
        let subjects: Vec<String> = (0..10)
            .flat_map(|s| std::iter::repeat_n(format!("subj{s}"), 20))
            .collect();
        let splits = split_assignments_by_subject(&subjects, 5);
        for s in 0..10 {
            let per: Vec<Split> = subjects
                .iter()
                .zip(&splits)
                .filter(|(subj, _)| **subj == format!("subj{s}"))
                .map(|(_, sp)| *sp)
                .collect();
            assert!(per.windows(2).all(|w| w[0] == w[1]), "subject {s} split up");
        }
        let count = |s: Split| splits.iter().filter(|&&x| x == s).count();
        assert_eq!(count(Split::Val), 20);
        assert_eq!(count(Split::Test), 20);
    }

    #[test]
    fn split_tags_round_trip() {
        for s in [Split::Train, Split::Val, Split::Test] {
            assert_eq!(Split::from_tag(s.tag()).unwrap(), s);
            assert_eq!(Split::from_letter(s.letter()).unwrap(), s);
        }
        assert!(Split::from_tag(3).is_err());
    }
}
