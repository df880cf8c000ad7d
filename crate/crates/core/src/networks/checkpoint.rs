//! Checkpoint files.
//!
//! Layout:
//!
//! ```text
//! b"PPNT1"                      5 bytes magic
//! header_len: u64 little-endian
//! header: header_len bytes of UTF-8 JSON (CheckpointHeader)
//! payload: little-endian f64 values
//!          parameters in slot order, then (if present) optimizer
//!          first moments and second moments in the same order
//! ```

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, Layer, MlpStack, StackId, SubNetworkSet};
use crate::autodiff::Mat;
use crate::geometry::NormalizeTransform;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"PPNT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("architecture mismatch: file has {found:?}, expected {expected:?}")]
    Architecture {
        found: Architecture,
        expected: Architecture,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackShape {
    pub name: String,
    pub dims: Vec<usize>,
}

/// JSON header preceding the parameter payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub architecture: Architecture,
    pub stacks: Vec<StackShape>,
    pub seed: u64,
    pub step: u64,
    pub transform: NormalizeTransform,
    pub param_count: usize,
    pub optimizer_step: Option<u64>,
    /// Free-form metadata (e.g. the resolved training configuration).
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Adaptive-moment optimizer buffers, flattened in slot order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: SubNetworkSet,
    pub seed: u64,
    pub step: u64,
    pub transform: NormalizeTransform,
    pub optimizer: Option<OptimizerSnapshot>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(net: SubNetworkSet, seed: u64, transform: NormalizeTransform) -> Self {
        Self {
            net,
            seed,
            step: 0,
            transform,
            optimizer: None,
            meta: serde_json::Value::Null,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let net = &self.net;
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            architecture: net.architecture.clone(),
            stacks: StackId::ALL
                .iter()
                .map(|&id| StackShape {
                    name: id.name().to_string(),
                    dims: net.stack(id).dims(),
                })
                .collect(),
            seed: self.seed,
            step: self.step,
            transform: self.transform,
            param_count: net.num_params(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let n = header.param_count;
        let extra = self.optimizer.as_ref().map_or(0, |_| 2 * n);
        let mut out = Vec::with_capacity(13 + json.len() + 8 * (n + extra));
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for m in net.params() {
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(o) = &self.optimizer {
            for v in o.first.iter().chain(&o.second) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint and checks it against `expected`.
    pub fn from_bytes(bytes: &[u8], expected: &Architecture) -> Result<Self, CheckpointError> {
        if bytes.len() < 13 || &bytes[..5] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let hlen = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes")) as usize;
        let body = &bytes[13..];
        if hlen > body.len() {
            return Err(CheckpointError::Corrupt("header length exceeds file".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])
            .map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version {
                found: header.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if &header.architecture != expected {
            return Err(CheckpointError::Architecture {
                found: header.architecture,
                expected: expected.clone(),
            });
        }
        let payload = &body[hlen..];
        if payload.len() % 8 != 0 {
            return Err(CheckpointError::Corrupt("payload is not a whole number of f64".into()));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));

        let mut net = SubNetworkSet::init(&header.architecture, 0);
        if header.stacks.len() != StackId::ALL.len() {
            return Err(CheckpointError::Corrupt("wrong number of stacks".into()));
        }
        for (shape, &id) in header.stacks.iter().zip(StackId::ALL.iter()) {
            if shape.name != id.name() || shape.dims != net.stack(id).dims() {
                return Err(CheckpointError::Corrupt(format!(
                    "stack {} has dims {:?}, expected {} {:?}",
                    shape.name,
                    shape.dims,
                    id.name(),
                    net.stack(id).dims()
                )));
            }
            let layers = shape
                .dims
                .windows(2)
                .map(|d| {
                    let mut take = |len: usize| -> Result<Vec<f64>, CheckpointError> {
                        let v: Vec<f64> = values.by_ref().take(len).collect();
                        if v.len() == len {
                            Ok(v)
                        } else {
                            Err(CheckpointError::Corrupt("payload truncated".into()))
                        }
                    };
                    Ok(Layer {
                        weight: Mat::from_vec(d[0], d[1], take(d[0] * d[1])?),
                        bias: Mat::from_vec(1, d[1], take(d[1])?),
                    })
                })
                .collect::<Result<Vec<_>, CheckpointError>>()?;
            *net.stack_mut(id) = MlpStack { layers };
        }
        let n = net.num_params();
        if n != header.param_count {
            return Err(CheckpointError::Corrupt(format!(
                "header declares {} parameters, architecture has {n}",
                header.param_count
            )));
        }
        let optimizer = match header.optimizer_step {
            Some(step) => {
                let first: Vec<f64> = values.by_ref().take(n).collect();
                let second: Vec<f64> = values.by_ref().take(n).collect();
                if first.len() != n || second.len() != n {
                    return Err(CheckpointError::Corrupt("optimizer state truncated".into()));
                }
                Some(OptimizerSnapshot {
                    step,
                    first,
                    second,
                })
            }
            None => None,
        };
        if values.next().is_some() {
            return Err(CheckpointError::Corrupt("trailing payload".into()));
        }
        Ok(Self {
            net,
            seed: header.seed,
            step: header.step,
            transform: header.transform,
            optimizer,
            meta: header.meta,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(
    path: impl AsRef<Path>,
    expected: &Architecture,
) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::from_bytes(&fs::read(path)?, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PointCloud3;
    use crate::networks::{init_params, unwrap_forward};

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(
            init_params(5),
            5,
            NormalizeTransform {
                center: [0.1, -2.0, 3.5],
                scale: 0.25,
            },
        );
        c.step = 1500;
        c.meta = serde_json::json!({"note": "x"});
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let mut c = sample();
        let n = c.net.num_params();
        c.optimizer = Some(OptimizerSnapshot {
            step: 7,
            first: (0..n).map(|i| i as f64 * 1e-7).collect(),
            second: vec![0.5; n],
        });
        save_checkpoint(&c, &path).unwrap();
        let back = load_checkpoint(&path, &Architecture::default()).unwrap();
        assert_eq!(back, c);
        let p = PointCloud3::new(vec![[0.3, -0.1, 0.8], [0.0, 0.0, 1.0]]);
        assert_eq!(unwrap_forward(&c.net, &p), unwrap_forward(&back.net, &p));
    }

    #[test]
    fn wrong_hidden_dims_rejected() {
        let arch = Architecture {
            hidden: vec![64, 128, 256, 128],
            embed_dim: 64,
        };
        let c = Checkpoint::new(SubNetworkSet::init(&arch, 1), 1, NormalizeTransform::identity());
        let bytes = c.to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, &Architecture::default()),
            Err(CheckpointError::Architecture { .. })
        ));
        assert!(Checkpoint::from_bytes(&bytes, &arch).is_ok());
    }

    #[test]
    fn bad_magic_version_and_truncation() {
        let bytes = sample().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad, &Architecture::default()),
            Err(CheckpointError::BadMagic)
        ));
        let cut = &bytes[..bytes.len() - 8];
        assert!(matches!(
            Checkpoint::from_bytes(cut, &Architecture::default()),
            Err(CheckpointError::Corrupt(_))
        ));
        let text = String::from_utf8_lossy(&bytes[13..200]).to_string();
        assert!(text.starts_with("{\"version\":1"));
        let patched = {
            let mut b = bytes.clone();
            let pos = 13 + text.find("\"version\":1").unwrap() + 10;
            b[pos] = b'9';
            b
        };
        assert!(matches!(
            Checkpoint::from_bytes(&patched, &Architecture::default()),
            Err(CheckpointError::Version { found: 9, .. })
        ));
    }
}
