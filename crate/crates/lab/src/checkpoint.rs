//! Checkpoint files.
//!
//! One line of JSON header, a newline, then the payload: every parameter
//! array in registration order as little-endian `f64`, followed by the Adam
//! moments when present. The header's `arrays` index gives each array's
//! name, shape and byte offset into the payload.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sta_core::policy::{Policy, PolicyConfig};
use sta_core::{AdamState, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("corrupt checkpoint header: {0}")]
    CorruptHeader(String),
    #[error("checkpoint payload truncated in array {array:?}: needs {needed} bytes, {available} available")]
    Truncated {
        array: String,
        needed: usize,
        available: usize,
    },
    #[error("unsupported checkpoint format_version {found} (expected {expected})")]
    Version { found: u64, expected: u32 },
    #[error("checkpoint does not match its configuration: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epoch: usize,
    pub seed: u64,
    pub dataset_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub policy: Policy,
    pub adam: Option<AdamState>,
    pub meta: TrainingMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdamHeader {
    step_count: u64,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: PolicyConfig,
    meta: TrainingMeta,
    adam: Option<AdamHeader>,
    arrays: Vec<ArrayEntry>,
    payload_bytes: usize,
}

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

impl Checkpoint {
    pub fn new(policy: Policy, adam: Option<AdamState>, meta: TrainingMeta) -> Self {
        Checkpoint { policy, adam, meta }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let params = self.policy.params();
        let mut arrays = Vec::new();
        let mut payload = Vec::new();
        let mut push = |name: String, shape: &[usize], data: &[f64]| {
            arrays.push(ArrayEntry {
                name,
                shape: shape.to_vec(),
                offset: payload.len(),
            });
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (name, t) in params.names().iter().zip(params.tensors()) {
            push(name.clone(), t.shape(), t.data());
        }
        if let Some(adam) = &self.adam {
            for (prefix, moments) in [(ADAM_M, &adam.first_moment), (ADAM_V, &adam.second_moment)] {
                for ((name, t), m) in params.names().iter().zip(params.tensors()).zip(moments) {
                    push(format!("{prefix}{name}"), t.shape(), m);
                }
            }
        }
        let header = Header {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.policy.config().clone(),
            meta: self.meta.clone(),
            adam: self.adam.as_ref().map(|a| AdamHeader {
                step_count: a.step_count,
                learning_rate: a.learning_rate,
                beta1: a.beta1,
                beta2: a.beta2,
                epsilon: a.epsilon,
            }),
            arrays,
            payload_bytes: payload.len(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| CheckpointError::CorruptHeader("no header line".into()))?;
        let (head, payload) = (&bytes[..split], &bytes[split + 1..]);
        let value: serde_json::Value =
            serde_json::from_slice(head).map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;
        let found = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| CheckpointError::CorruptHeader("missing format_version".into()))?;
        if found != u64::from(CHECKPOINT_FORMAT_VERSION) {
            return Err(CheckpointError::Version {
                found,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        let header: Header =
            serde_json::from_value(value).map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;
        let read = |e: &ArrayEntry| -> Result<Tensor, CheckpointError> {
            let n: usize = e.shape.iter().product();
            let end = e.offset + 8 * n;
            if end > payload.len() {
                return Err(CheckpointError::Truncated {
                    array: e.name.clone(),
                    needed: end,
                    available: payload.len(),
                });
            }
            let data = payload[e.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            Tensor::new(e.shape.clone(), data).map_err(|err| CheckpointError::CorruptHeader(err.to_string()))
        };

        let mut policy = Policy::new(header.config.clone(), 0)
            .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
        let n_params = policy.params().len();
        let expected_arrays = if header.adam.is_some() { 3 * n_params } else { n_params };
        if header.arrays.len() != expected_arrays {
            return Err(CheckpointError::Mismatch(format!(
                "{} arrays listed, {expected_arrays} expected",
                header.arrays.len()
            )));
        }
        let mut tensors = Vec::with_capacity(header.arrays.len());
        for e in &header.arrays {
            tensors.push(read(e)?);
        }
        if payload.len() > header.payload_bytes {
            return Err(CheckpointError::CorruptHeader(format!(
                "{} payload bytes, header declares {}",
                payload.len(),
                header.payload_bytes
            )));
        }
        if payload.len() < header.payload_bytes {
            return Err(CheckpointError::Truncated {
                array: header.arrays.last().map(|e| e.name.clone()).unwrap_or_default(),
                needed: header.payload_bytes,
                available: payload.len(),
            });
        }
        let mut rest = tensors.split_off(n_params);
        let named = header.arrays[..n_params]
            .iter()
            .map(|e| e.name.clone())
            .zip(tensors)
            .collect();
        policy
            .params_mut()
            .assign(named)
            .map_err(|e| CheckpointError::Mismatch(e.to_string()))?;

        let adam = match header.adam {
            None => None,
            Some(h) => {
                let second = rest.split_off(n_params);
                let names = policy.params().names();
                for (i, e) in header.arrays[n_params..].iter().enumerate() {
                    let prefix = if i < n_params { ADAM_M } else { ADAM_V };
                    if e.name != format!("{prefix}{}", names[i % n_params]) {
                        return Err(CheckpointError::Mismatch(format!("unexpected array {:?}", e.name)));
                    }
                }
                Some(AdamState {
                    step_count: h.step_count,
                    learning_rate: h.learning_rate,
                    beta1: h.beta1,
                    beta2: h.beta2,
                    epsilon: h.epsilon,
                    first_moment: rest.into_iter().map(|t| t.data().to_vec()).collect(),
                    second_moment: second.into_iter().map(|t| t.data().to_vec()).collect(),
                })
            }
        };
        Ok(Checkpoint {
            policy,
            adam,
            meta: header.meta,
        })
    }
}

/// SHA-256 over every parameter name and value.
pub fn parameter_hash(policy: &Policy) -> String {
    let mut h = Sha256::new();
    let params = policy.params();
    for (name, t) in params.names().iter().zip(params.tensors()) {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(&ckpt.to_bytes()).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}
