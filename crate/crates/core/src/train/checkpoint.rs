//! Versioned binary checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic   b"DPNC"
//! version u32
//! digest  [u8; 32]      sha256 of the model config's canonical JSON
//! epoch   u32
//! val_mse f64
//! val_hr_mae f64
//! n_tensors u32
//! per tensor:
//!   name_len u32, name bytes (UTF-8)
//!   rank u32, dims u32 × rank
//!   data f32 × product(dims), row-major
//! ```
//!
//! Tensor data is stored in single precision. Loading widens f32 → f64
//! exactly, so a loaded checkpoint re-saves to byte-identical bytes.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::TrainError;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DPNC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Sanity cap on tensor-name length while decoding untrusted bytes.
const MAX_NAME_LEN: usize = 4096;

/// SHA-256 of a config's canonical JSON serialization. Two configs
/// collide iff they serialize identically, so any field drift between
/// save and load is caught.
pub fn config_digest<C: serde::Serialize>(config: &C) -> [u8; 32] {
    let json = serde_json::to_string(config).expect("config types serialize infallibly");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    hasher.finalize().into()
}

/// A model snapshot plus the metadata needed to validate and rank it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub epoch: u32,
    /// Validation MSE at save time (BPM² for HRP, waveform MSE for DPNet).
    pub val_mse: f64,
    /// Validation heart-rate MAE in BPM at save time.
    pub val_hr_mae: f64,
    /// Named parameters in the model's visitor order.
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Checks that this checkpoint was written for `config`.
    pub fn verify<C: serde::Serialize>(&self, config: &C) -> Result<(), TrainError> {
        if self.digest != config_digest(config) {
            return Err(TrainError::DigestMismatch);
        }
        Ok(())
    }

    /// Serializes to the binary layout, truncating data to f32.
    pub fn encode(&self) -> Vec<u8> {
        let payload: usize = self
            .tensors
            .iter()
            .map(|(n, t)| 8 + n.len() + 4 * t.shape.len() + 4 * t.numel())
            .sum();
        let mut bytes = Vec::with_capacity(64 + payload);
        bytes.extend_from_slice(&CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&self.digest);
        bytes.extend_from_slice(&self.epoch.to_le_bytes());
        bytes.extend_from_slice(&self.val_mse.to_le_bytes());
        bytes.extend_from_slice(&self.val_hr_mae.to_le_bytes());
        bytes.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
            bytes.extend_from_slice(name.as_bytes());
            bytes.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                bytes.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.data {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        bytes
    }

    /// Parses the binary layout, validating magic, version, and exact
    /// length. Tensor values widen f32 → f64.
    pub fn decode(bytes: &[u8]) -> Result<Self, TrainError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(TrainError::Corrupt("bad magic (not a DPNC checkpoint)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::Version {
                got: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut digest = [0u8; 32];
        digest.copy_from_slice(r.take(32)?);
        let epoch = r.u32()?;
        let val_mse = r.f64()?;
        let val_hr_mae = r.f64()?;
        let n_tensors = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n_tensors.min(1024));
        for _ in 0..n_tensors {
            let name_len = r.u32()? as usize;
            if name_len > MAX_NAME_LEN {
                return Err(TrainError::Corrupt(format!(
                    "tensor name length {name_len} exceeds the {MAX_NAME_LEN}-byte cap"
                )));
            }
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| TrainError::Corrupt("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().try_fold(1usize, |acc, &d| {
                acc.checked_mul(d).filter(|&n| n <= u32::MAX as usize)
            })
            .ok_or_else(|| TrainError::Corrupt(format!("tensor {name:?}: shape overflow")))?;
            let raw = r.take(4 * numel)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let tensor = Tensor::new(data, &shape)
                .expect("decoded length matches shape by construction");
            tensors.push((name, tensor));
        }
        if r.pos != bytes.len() {
            return Err(TrainError::Corrupt(format!(
                "{} trailing bytes after the tensor table",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            digest,
            epoch,
            val_mse,
            val_hr_mae,
            tensors,
        })
    }
}

/// Writes a checkpoint file, creating parent directories as needed.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), TrainError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, ckpt.encode())?;
    Ok(())
}

/// Reads and structurally validates a checkpoint file. Config drift is
/// checked separately via [`Checkpoint::verify`], since only the caller
/// knows which config the parameters should fit.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let bytes = std::fs::read(path)?;
    Checkpoint::decode(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let slice = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(slice)
            }
            None => Err(TrainError::Corrupt("file truncated".into())),
        }
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self) -> Result<f64, TrainError> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::HRPConfig;

    fn sample_checkpoint() -> Checkpoint {
        Checkpoint {
            digest: config_digest(&HRPConfig::desk()),
            epoch: 17,
            val_mse: 4.25,
            val_hr_mae: 1.5,
            tensors: vec![
                (
                    "conv_in.0.w".into(),
                    Tensor::new(vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6], &[1, 2, 3]).unwrap(),
                ),
                ("alpha_raw".into(), Tensor::scalar(0.75)),
            ],
        }
    }

    #[test]
    fn round_trip_widens_exactly_and_resaves_byte_identically() {
        let original = sample_checkpoint();
        let bytes = original.encode();
        let loaded = Checkpoint::decode(&bytes).unwrap();
        // 0.1 is not f32-representable: the first save is lossy…
        assert_eq!(loaded.tensors[0].1.data[0], 0.1f32 as f64);
        assert_eq!(loaded.epoch, 17);
        assert_eq!(loaded.val_mse, 4.25);
        assert_eq!(loaded.val_hr_mae, 1.5);
        assert_eq!(loaded.digest, original.digest);
        // …but re-saving what was loaded is not.
        assert_eq!(loaded.encode(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = std::env::temp_dir().join(format!("dpnc-rt-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let path = dir.join("ckpts").join("best.dpnc");
        let original = sample_checkpoint();
        save_checkpoint(&path, &original).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.encode(), original.encode());
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn truncation_anywhere_is_a_corrupt_file_error() {
        let bytes = sample_checkpoint().encode();
        for cut in [0, 3, 7, 30, 45, 63, bytes.len() - 1] {
            match Checkpoint::decode(&bytes[..cut]) {
                Err(TrainError::Corrupt(_)) => {}
                other => panic!("cut at {cut}: expected Corrupt, got {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_and_unknown_version_are_rejected() {
        let mut bytes = sample_checkpoint().encode();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::decode(&bytes),
            Err(TrainError::Corrupt(_))
        ));

        let mut bytes = sample_checkpoint().encode();
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::decode(&bytes),
            Err(TrainError::Version { got: 9, expected: CHECKPOINT_VERSION })
        ));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = sample_checkpoint().encode();
        bytes.push(0);
        assert!(matches!(
            Checkpoint::decode(&bytes),
            Err(TrainError::Corrupt(_))
        ));
    }

    #[test]
    fn digest_catches_config_drift() {
        let ckpt = sample_checkpoint();
        ckpt.verify(&HRPConfig::desk()).unwrap();
        assert!(matches!(
            ckpt.verify(&HRPConfig::full()),
            Err(TrainError::DigestMismatch)
        ));
    }

    #[test]
    fn digest_is_stable_and_field_sensitive() {
        assert_eq!(
            config_digest(&HRPConfig::desk()),
            config_digest(&HRPConfig::desk())
        );
        let mut tweaked = HRPConfig::desk();
        tweaked.hidden += 1;
        assert_ne!(config_digest(&HRPConfig::desk()), config_digest(&tweaked));
    }
}
