//! Checkpoint container: a magic tag, a config snapshot, and named f32
//! tensors, in a fixed little-endian layout.
//!
//! Layout:
//! ```text
//! "BVW1"
//! u32 config_len, config text (key = value lines)
//! u32 tensor_count
//! per tensor: u32 name_len, name, u32 ndim, ndim * u32 dims, f32 payload
//! ```
//! Tensors are written in sorted name order, so serializing the same state
//! twice produces byte-identical files.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::config::Config;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BVW1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic {got:?}, expected {MAGIC:?}")]
    BadMagic { path: String, got: [u8; 4] },
    #[error("{path}: truncated while reading {what}")]
    Truncated { path: String, what: String },
    #[error("{path}: duplicate tensor name {name:?}")]
    Duplicate { path: String, name: String },
    #[error("{0}: config: {1}")]
    Config(String, #[source] crate::config::ConfigError),
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
}

/// Named tensors plus the config they were produced under.
#[derive(Clone)]
pub struct Checkpoint {
    pub config: Config,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new(config: Config) -> Self {
        Checkpoint {
            config,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<f32>) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>, CheckpointError> {
        self.tensors
            .get(name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        let cfg = self.config.to_text();
        buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        buf.extend_from_slice(cfg.as_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(&buf).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let p = path.display().to_string();
        let io = |source| CheckpointError::Io {
            path: p.clone(),
            source,
        };
        let trunc = |what: &str| CheckpointError::Truncated {
            path: p.clone(),
            what: what.to_string(),
        };
        let mut f = std::fs::File::open(path).map_err(io)?;
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic).map_err(|_| trunc("magic"))?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic {
                path: p.clone(),
                got: magic,
            });
        }
        let read_u32 = |f: &mut std::fs::File, what: &str| -> Result<u32, CheckpointError> {
            let mut b = [0u8; 4];
            f.read_exact(&mut b).map_err(|_| trunc(what))?;
            Ok(u32::from_le_bytes(b))
        };
        let cfg_len = read_u32(&mut f, "config length")? as usize;
        let mut cfg_bytes = vec![0u8; cfg_len];
        f.read_exact(&mut cfg_bytes).map_err(|_| trunc("config"))?;
        let cfg_text = String::from_utf8_lossy(&cfg_bytes).into_owned();
        let config =
            Config::parse(&cfg_text).map_err(|e| CheckpointError::Config(p.clone(), e))?;
        let count = read_u32(&mut f, "tensor count")? as usize;
        let mut tensors = BTreeMap::new();
        for i in 0..count {
            let name_len = read_u32(&mut f, &format!("tensor {i} name length"))? as usize;
            let mut name = vec![0u8; name_len];
            f.read_exact(&mut name)
                .map_err(|_| trunc(&format!("tensor {i} name")))?;
            let name = String::from_utf8_lossy(&name).into_owned();
            let ndim = read_u32(&mut f, &format!("tensor {name:?} ndim"))? as usize;
            let mut shape = Vec::with_capacity(ndim);
            let mut numel = 1usize;
            for _ in 0..ndim {
                let d = read_u32(&mut f, &format!("tensor {name:?} dims"))? as usize;
                shape.push(d);
                numel *= d;
            }
            let mut payload = vec![0u8; numel * 4];
            f.read_exact(&mut payload)
                .map_err(|_| trunc(&format!("tensor {name:?} payload")))?;
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            if tensors.insert(name.clone(), Tensor::new(&shape, data)).is_some() {
                return Err(CheckpointError::Duplicate {
                    path: p.clone(),
                    name,
                });
            }
        }
        Ok(Checkpoint { config, tensors })
    }
}
