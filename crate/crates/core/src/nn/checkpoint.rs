//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `BIDEXCK1`, a little-endian u64 header length,
//! the UTF-8 JSON header, then every array in header order as little-endian
//! f64. A sidecar `<file>.sha256` holds the hex digest of the whole file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::{Precision, TensorDesc};
use crate::error::{Error, Result};
use crate::math::RngState;

pub const MAGIC: &[u8; 8] = b"BIDEXCK1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub layout: Vec<TensorDesc>,
    pub spec: serde_json::Value,
    pub precision: Precision,
    pub rng_state: Option<RngState>,
    pub iteration: u64,
    pub config_hash: String,
    #[serde(default)]
    pub extra: serde_json::Value,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub arrays: Vec<Vec<f64>>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".sha256");
    PathBuf::from(s)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Option<&[f64]> {
        self.header
            .arrays
            .iter()
            .position(|a| a.name == name)
            .map(|i| self.arrays[i].as_slice())
    }

    pub fn require(&self, name: &str) -> Result<&[f64]> {
        self.array(name)
            .ok_or_else(|| Error::Integrity(format!("checkpoint has no array `{name}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.header.arrays.len() != self.arrays.len()
            || self
                .header
                .arrays
                .iter()
                .zip(&self.arrays)
                .any(|(e, a)| e.len != a.len())
        {
            return Err(Error::Contract("checkpoint array table does not match data".into()));
        }
        let header = serde_json::to_vec(&self.header)?;
        let payload: usize = self.arrays.iter().map(|a| a.len() * 8).sum();
        let mut out = Vec::with_capacity(16 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for a in &self.arrays {
            for v in a {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Integrity("not a checkpoint file (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| Error::Integrity("truncated checkpoint header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        let mut pos = 16 + hlen;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for entry in &header.arrays {
            let end = pos + entry.len * 8;
            let raw = bytes.get(pos..end).ok_or_else(|| {
                Error::Integrity(format!("truncated checkpoint array `{}`", entry.name))
            })?;
            arrays.push(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            );
            pos = end;
        }
        if pos != bytes.len() {
            return Err(Error::Integrity("trailing bytes after checkpoint arrays".into()));
        }
        Ok(Checkpoint { header, arrays })
    }

    /// Writes the file and its digest sidecar, each through a temporary file
    /// and rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        write_atomic(path, &bytes)?;
        write_atomic(&sidecar_path(path), format!("{}\n", sha256_hex(&bytes)).as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let side = sidecar_path(path);
        let expected = fs::read_to_string(&side).map_err(|e| {
            Error::Integrity(format!("missing digest sidecar {}: {e}", side.display()))
        })?;
        let actual = sha256_hex(&bytes);
        if expected.trim() != actual {
            return Err(Error::Integrity(format!(
                "{} digest mismatch: sidecar {}, file {actual}",
                path.display(),
                expected.trim()
            )));
        }
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                kind: "test".into(),
                layout: vec![TensorDesc {
                    name: "a.weight".into(),
                    shape: vec![2, 2],
                    offset: 0,
                }],
                spec: serde_json::json!({"w": 2}),
                precision: Precision::F64,
                rng_state: None,
                iteration: 7,
                config_hash: "abc".into(),
                extra: serde_json::Value::Null,
                arrays: vec![
                    ArrayEntry { name: "params".into(), len: 4 },
                    ArrayEntry { name: "adam.m".into(), len: 1 },
                ],
            },
            arrays: vec![vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5], vec![0.25]],
        }
    }

    #[test]
    fn bytes_round_trip_bit_exactly() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.header, ck.header);
        for (a, b) in back.arrays.iter().zip(&ck.arrays) {
            let ab: Vec<u64> = a.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn tampered_file_fails_the_digest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        sample().save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), sample());
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Integrity(_))));
    }

    #[test]
    fn missing_sidecar_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        sample().save(&path).unwrap();
        fs::remove_file(sidecar_path(&path)).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Integrity(_))));
    }
}
