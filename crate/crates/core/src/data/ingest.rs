//! CSV ingestion, resampling, windowing, and the gate-then-split
//! preparation pipeline that turns raw records into a segment store.

use super::{
    split_assignments, split_assignments_by_subject, DataError, Record, SegmentStore, Source,
    StoredSegment, HOP_SECONDS, TARGET_FS, WINDOW_SECONDS,
};
use crate::hr::{quality_gate, GateReject};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Read one column of a headered CSV into a record at the stated sample
/// rate. Rows whose value does not parse to a finite number are dropped
/// and counted. The subject id is the file stem.
pub fn ingest_csv(
    path: &Path,
    column: &str,
    fs: f64,
    source: Source,
) -> Result<(Record, usize), DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = headers
        .iter()
        .position(|h| h.trim() == column)
        .ok_or_else(|| DataError::MissingColumn {
            name: column.to_string(),
            available: headers.iter().map(|h| h.trim().to_string()).collect(),
        })?;

    let mut samples = Vec::new();
    let mut dropped = 0usize;
    for row in reader.records() {
        let row = row?;
        match row.get(col).map(|v| v.trim().parse::<f64>()) {
            Some(Ok(v)) if v.is_finite() => samples.push(v),
            _ => dropped += 1,
        }
    }
    if samples.is_empty() {
        return Err(DataError::NoUsableRows {
            path: path.display().to_string(),
        });
    }
    let subject_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "unknown".into());
    Ok((
        Record {
            subject_id,
            fs,
            samples,
            source,
        },
        dropped,
    ))
}

/// Downsample a record to `target_fs` by linear interpolation onto the
/// uniform target grid. Equal rates are an identity; upsampling is an
/// error. Output length: floor((L−1)·target_fs/fs) + 1.
pub fn resample(record: &Record, target_fs: f64) -> Result<Record, DataError> {
    if target_fs > record.fs {
        return Err(DataError::Upsample {
            from: record.fs,
            to: target_fs,
        });
    }
    if target_fs == record.fs {
        return Ok(record.clone());
    }
    let l = record.samples.len();
    let n_out = (((l - 1) as f64) * target_fs / record.fs).floor() as usize + 1;
    let ratio = record.fs / target_fs;
    let samples = (0..n_out)
        .map(|i| {
            let pos = i as f64 * ratio;
            let idx = pos.floor() as usize;
            if idx >= l - 1 {
                record.samples[l - 1]
            } else {
                let frac = pos - idx as f64;
                record.samples[idx] * (1.0 - frac) + record.samples[idx + 1] * frac
            }
        })
        .collect();
    Ok(Record {
        subject_id: record.subject_id.clone(),
        fs: target_fs,
        samples,
        source: record.source,
    })
}

/// Slice a record into overlapping windows: 6 s length, 2 s hop
/// (4 s overlap), partial tail dropped. Returns (window_index, samples).
pub fn segment_windows(record: &Record) -> Result<Vec<(usize, Vec<f64>)>, DataError> {
    let win = (WINDOW_SECONDS * record.fs).round() as usize;
    let hop = (HOP_SECONDS * record.fs).round() as usize;
    if record.samples.len() < win {
        return Err(DataError::RecordTooShort {
            got: record.samples.len(),
            needed: win,
        });
    }
    Ok((0..=(record.samples.len() - win) / hop)
        .map(|w| (w, record.samples[w * hop..w * hop + win].to_vec()))
        .collect())
}

/// Accepted/rejected window counts, with per-reason rejection tallies.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GateSummary {
    pub accepted: usize,
    pub rejected: usize,
    pub reasons: BTreeMap<String, usize>,
}

fn reject_label(reason: &GateReject) -> &'static str {
    match reason {
        GateReject::Detection(_) => "detection_failed",
        GateReject::BpmOutOfRange(_) => "bpm_out_of_range",
        GateReject::IbiOutOfRange(_) => "ibi_out_of_range",
        GateReject::RmssdTooHigh(_) => "rmssd_too_high",
        GateReject::Sd1Sd2TooHigh(_) => "sd1sd2_too_high",
    }
}

/// A prepared dataset: the store plus gate statistics.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub store: SegmentStore,
    pub gate: GateSummary,
}

/// Run the preparation protocol over full records: resample each to
/// 125 Hz, window (6 s / 2 s hop), quality-gate every window, then split
/// the retained segments 8:1:1 (segment-wise by default, subject-wise on
/// request). The noisy channel starts equal to the clean channel.
pub fn prepare_records(
    records: &[Record],
    seed: u64,
    subject_wise: bool,
) -> Result<PreparedDataset, DataError> {
    if records.is_empty() {
        return Err(DataError::Empty("no input records"));
    }
    let mut gate = GateSummary::default();
    let mut clean_windows = Vec::new();
    let mut subjects = Vec::new();
    for record in records {
        let at_target = resample(record, TARGET_FS)?;
        for (_, window) in segment_windows(&at_target)? {
            match quality_gate(&window, TARGET_FS) {
                Ok(stats) => {
                    gate.accepted += 1;
                    clean_windows.push((window, stats.bpm));
                    subjects.push(record.subject_id.clone());
                }
                Err(reason) => {
                    gate.rejected += 1;
                    *gate
                        .reasons
                        .entry(reject_label(&reason).to_string())
                        .or_insert(0) += 1;
                }
            }
        }
    }
    if clean_windows.is_empty() {
        return Err(DataError::Empty("no window passed the quality gate"));
    }
    let splits = if subject_wise {
        split_assignments_by_subject(&subjects, seed)
    } else {
        split_assignments(clean_windows.len(), seed)
    };
    let segments = clean_windows
        .into_iter()
        .zip(splits)
        .map(|((clean, bpm_label), split)| StoredSegment {
            noisy: clean.clone(),
            clean,
            bpm_label,
            split,
        })
        .collect();
    Ok(PreparedDataset {
        store: SegmentStore {
            fs: TARGET_FS,
            segments,
        },
        gate,
    })
}
