//! Binary model checkpoints with a JSON sidecar.
//!
//! Layout: `"APIS"`, version `u32`, head count `u32`, feature dim `u32`, then
//! the head weights as little-endian `f64`, row-major. Replicas beyond the
//! first are stored next to the main file as `.replica<r>.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::features::{FeatureVector, FEATURE_DIM};
use super::model::{ModelParams, ModelState};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"APIS";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER: usize = 16;

pub fn encode_params(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + params.heads.len() * FEATURE_DIM * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.heads.len() as u32).to_le_bytes());
    out.extend_from_slice(&(FEATURE_DIM as u32).to_le_bytes());
    for w in params.heads.iter().flatten() {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

pub fn decode_params(path: &Path, bytes: &[u8], lambda: f64) -> Result<ModelParams> {
    let bad = |offset: usize, message: String| Error::FormatViolation {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    if bytes.len() < HEADER {
        return Err(bad(bytes.len(), "truncated header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad(0, "bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != CHECKPOINT_VERSION {
        return Err(bad(4, format!("unsupported version {version}")));
    }
    let heads = word(8) as usize;
    let dim = word(12) as usize;
    if dim != FEATURE_DIM {
        return Err(bad(12, format!("feature dim {dim}, expected {FEATURE_DIM}")));
    }
    let expected = HEADER + heads * dim * 8;
    if bytes.len() != expected {
        return Err(bad(
            bytes.len().min(expected),
            format!("payload is {} bytes, expected {expected}", bytes.len()),
        ));
    }
    let values: Vec<f64> = bytes[HEADER..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let heads = values
        .chunks_exact(FEATURE_DIM)
        .map(|c| {
            let mut w: FeatureVector = [0.0; FEATURE_DIM];
            w.copy_from_slice(c);
            w
        })
        .collect();
    let params = ModelParams { heads, lambda };
    if !params.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(params)
}

/// Sidecar metadata written as `model_step_<s>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u32,
    pub seed: u64,
    pub lambda: f64,
    pub replicas: usize,
    pub scales: Vec<f64>,
    pub iterations: usize,
    pub lr0: f64,
    pub decay_points: Vec<usize>,
    pub batch_size: usize,
    pub train_iters_cum: u64,
}

pub fn checkpoint_path(dir: &Path, step: u32) -> PathBuf {
    dir.join(format!("model_step_{step}.bin"))
}

fn replica_path(dir: &Path, step: u32, r: usize) -> PathBuf {
    dir.join(format!("model_step_{step}.replica{r}.bin"))
}

fn sidecar_path(dir: &Path, step: u32) -> PathBuf {
    dir.join(format!("model_step_{step}.json"))
}

fn write(path: PathBuf, bytes: &[u8]) -> Result<()> {
    fs::write(&path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_checkpoint(dir: &Path, state: &ModelState, meta: &CheckpointMeta) -> Result<()> {
    for (r, member) in state.members.iter().enumerate() {
        let path = if r == 0 {
            checkpoint_path(dir, meta.step)
        } else {
            replica_path(dir, meta.step, r)
        };
        write(path, &encode_params(member))?;
    }
    let text = serde_json::to_string_pretty(meta)? + "\n";
    write(sidecar_path(dir, meta.step), text.as_bytes())
}

pub fn read_checkpoint(dir: &Path, step: u32) -> Result<(ModelState, CheckpointMeta)> {
    let side = sidecar_path(dir, step);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    let members = (0..meta.replicas.max(1))
        .map(|r| {
            let path = if r == 0 {
                checkpoint_path(dir, step)
            } else {
                replica_path(dir, step, r)
            };
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            decode_params(&path, &bytes, meta.lambda)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        ModelState {
            members,
            scales: meta.scales.clone(),
        },
        meta,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmodel::model::ModelConfig;

    fn meta(step: u32, replicas: usize) -> CheckpointMeta {
        CheckpointMeta {
            step,
            seed: 7,
            lambda: 1e-4,
            replicas,
            scales: vec![0.0, 1.0, 2.0],
            iterations: 1000,
            lr0: 0.1,
            decay_points: vec![333, 666],
            batch_size: 256,
            train_iters_cum: 4000,
        }
    }

    #[test]
    fn header_layout() {
        let p = ModelParams::zeros(4, 1e-4);
        let b = encode_params(&p);
        assert_eq!(&b[..4], b"APIS");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 9);
        assert_eq!(b.len(), 16 + 4 * 9 * 8);
    }

    #[test]
    fn roundtrip_with_replicas() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig {
            replicas: 3,
            ..ModelConfig::default()
        };
        let s = ModelState::init(&cfg, 3).unwrap();
        write_checkpoint(dir.path(), &s, &meta(2, 3)).unwrap();
        let (back, m) = read_checkpoint(dir.path(), 2).unwrap();
        assert_eq!(back, s);
        assert_eq!(m, meta(2, 3));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let p = ModelParams::zeros(2, 0.0);
        let mut b = encode_params(&p);
        let path = Path::new("x.bin");
        b[0] = b'X';
        assert!(matches!(decode_params(path, &b, 0.0), Err(Error::FormatViolation { offset: 0, .. })));
        let b = encode_params(&p);
        assert!(matches!(
            decode_params(path, &b[..b.len() - 1], 0.0),
            Err(Error::FormatViolation { .. })
        ));
    }
}
