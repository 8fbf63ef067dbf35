//! On-disk segment store: a little-endian flat binary file plus a
//! structured-text manifest.
//!
//! Binary layout (file `segments.ppgs`): magic "PPGS", version u32,
//! fs f32, n u32, then per segment 750 f32 clean samples, 750 f32 noisy
//! samples, f32 bpm label, u8 split tag (0 train, 1 val, 2 test).
//! Everything little-endian. Samples are stored in f32; the in-memory
//! pipeline works in f64, so the first save projects once and
//! save → load → save is byte-identical.

use super::ingest::GateSummary;
use super::{DataError, Split, SEGMENT_LEN};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const STORE_MAGIC: [u8; 4] = *b"PPGS";
pub const STORE_VERSION: u32 = 1;
pub const STORE_FILE: &str = "segments.ppgs";
pub const MANIFEST_FILE: &str = "manifest.toml";

/// One stored segment: paired clean/noisy channels, rate label, split.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredSegment {
    pub clean: Vec<f64>,
    pub noisy: Vec<f64>,
    pub bpm_label: f64,
    pub split: Split,
}

/// The whole dataset at rest.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentStore {
    pub fs: f64,
    pub segments: Vec<StoredSegment>,
}

/// Seeds recorded in the manifest for provenance.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestSeeds {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prepare: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contaminate: Option<u64>,
}

/// Per-split segment counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Structured-text companion of the binary file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub fs: f64,
    pub n_segments: usize,
    pub counts: SplitCounts,
    pub seeds: ManifestSeeds,
    /// One letter per segment: t = train, v = val, s = test.
    pub split_assignment: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate: Option<GateSummary>,
}

impl SegmentStore {
    pub fn counts(&self) -> SplitCounts {
        let count = |s: Split| self.segments.iter().filter(|seg| seg.split == s).count();
        SplitCounts {
            train: count(Split::Train),
            val: count(Split::Val),
            test: count(Split::Test),
        }
    }

    /// Indices of the segments in one split, in store order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.segments.len())
            .filter(|&i| self.segments[i].split == split)
            .collect()
    }

    fn assignment_string(&self) -> String {
        self.segments.iter().map(|s| s.split.letter()).collect()
    }

    fn encode(&self) -> Result<Vec<u8>, DataError> {
        let mut bytes = Vec::with_capacity(
            12 + self.segments.len() * (2 * SEGMENT_LEN * 4 + 5),
        );
        bytes.extend_from_slice(&STORE_MAGIC);
        bytes.extend_from_slice(&STORE_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(self.fs as f32).to_le_bytes());
        bytes.extend_from_slice(&(self.segments.len() as u32).to_le_bytes());
        for seg in &self.segments {
            for channel in [&seg.clean, &seg.noisy] {
                if channel.len() != SEGMENT_LEN {
                    return Err(DataError::BadSegmentLen {
                        got: channel.len(),
                        expected: SEGMENT_LEN,
                    });
                }
                for &v in channel.iter() {
                    bytes.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            bytes.extend_from_slice(&(seg.bpm_label as f32).to_le_bytes());
            bytes.push(seg.split.tag());
        }
        Ok(bytes)
    }

    /// Write `segments.ppgs` and `manifest.toml` into `dir` (created if
    /// missing) and return the manifest that was written.
    pub fn save(
        &self,
        dir: &Path,
        seeds: ManifestSeeds,
        gate: Option<GateSummary>,
    ) -> Result<Manifest, DataError> {
        std::fs::create_dir_all(dir)?;
        let bytes = self.encode()?;
        let mut file = std::fs::File::create(dir.join(STORE_FILE))?;
        file.write_all(&bytes)?;
        let manifest = Manifest {
            version: STORE_VERSION,
            fs: self.fs,
            n_segments: self.segments.len(),
            counts: self.counts(),
            seeds,
            split_assignment: self.assignment_string(),
            gate,
        };
        let text = toml::to_string_pretty(&manifest)
            .map_err(|e| DataError::Manifest(e.to_string()))?;
        std::fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(manifest)
    }

    /// Read a store directory back. Samples come back as the f32 values
    /// written, widened to f64.
    pub fn load(dir: &Path) -> Result<(Self, Manifest), DataError> {
        let mut bytes = Vec::new();
        std::fs::File::open(dir.join(STORE_FILE))?.read_to_end(&mut bytes)?;
        let mut cursor = 0usize;
        let take = |cursor: &mut usize, n: usize| -> Result<&[u8], DataError> {
            if *cursor + n > bytes.len() {
                return Err(DataError::Truncated {
                    expected: (*cursor + n) as u64,
                    got: bytes.len() as u64,
                });
            }
            let slice = &bytes[*cursor..*cursor + n];
            *cursor += n;
            Ok(slice)
        };

        let magic: [u8; 4] = take(&mut cursor, 4)?.try_into().unwrap();
        if magic != STORE_MAGIC {
            return Err(DataError::BadMagic(magic));
        }
        let version = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap());
        if version != STORE_VERSION {
            return Err(DataError::BadVersion(version));
        }
        let fs = f32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as f64;
        let n = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
        let expected = 16 + n as u64 * (2 * SEGMENT_LEN as u64 * 4 + 5);
        if bytes.len() as u64 != expected {
            return Err(DataError::Truncated {
                expected,
                got: bytes.len() as u64,
            });
        }

        let mut segments = Vec::with_capacity(n);
        for _ in 0..n {
            let read_channel = |cursor: &mut usize| -> Result<Vec<f64>, DataError> {
                let raw = take(cursor, SEGMENT_LEN * 4)?;
                Ok(raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                    .collect())
            };
            let clean = read_channel(&mut cursor)?;
            let noisy = read_channel(&mut cursor)?;
            let bpm_label =
                f32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as f64;
            let split = Split::from_tag(take(&mut cursor, 1)?[0])?;
            segments.push(StoredSegment {
                clean,
                noisy,
                bpm_label,
                split,
            });
        }

        let manifest_text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let manifest: Manifest =
            toml::from_str(&manifest_text).map_err(|e| DataError::Manifest(e.to_string()))?;
        if manifest.n_segments != n {
            return Err(DataError::Manifest(format!(
                "manifest lists {} segments but the binary holds {}",
                manifest.n_segments, n
            )));
        }
        let manifest_splits: Vec<Split> = manifest
            .split_assignment
            .chars()
            .map(Split::from_letter)
            .collect::<Option<_>>()
            .ok_or_else(|| {
                DataError::Manifest("split assignment contains an unknown letter".into())
            })?;
        if manifest_splits.len() != n
            || manifest_splits
                .iter()
                .zip(&segments)
                .any(|(m, s)| *m != s.split)
        {
            return Err(DataError::Manifest(
                "manifest split assignment disagrees with the binary store".into(),
            ));
        }
        Ok((SegmentStore { fs, segments }, manifest))
    }
}
