//! Self-describing binary checkpoints.
//!
//! Layout: the magic `HIMODECK`, a little-endian `u32` version, a `u64`
//! header length, a JSON header (run config, optimizer step and tensor
//! table), then every tensor as little-endian `f32` in header order:
//! parameters, Adam first moments, Adam second moments.

use std::path::Path;

use himode_autograd::{AdamConfig, AdamState, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{HimodeError, Result};
use crate::model::HiMode;
use crate::params::ParamStore;

use super::train::Trainer;

const MAGIC: &[u8; 8] = b"HIMODECK";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: RunConfig,
    adam_step: u64,
    adam: [f64; 4],
    tensors: Vec<(String, Vec<usize>)>,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Self {
            config: t.config.clone(),
            params: t.params.clone(),
            adam: t.adam.clone(),
        }
    }

    pub fn into_trainer(self) -> Result<Trainer> {
        let (model, _) = HiMode::build(&self.config.model, self.config.seed)?;
        Ok(Trainer {
            config: self.config,
            model,
            params: self.params,
            adam: self.adam,
        })
    }

    /// The model tree for these parameters.
    pub fn model(&self) -> Result<HiMode> {
        Ok(HiMode::build(&self.config.model, self.config.seed)?.0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = self.adam.config;
        let header = Header {
            version: VERSION,
            config: self.config.clone(),
            adam_step: self.adam.step,
            adam: [c.lr, c.beta1, c.beta2, c.eps],
            tensors: self
                .params
                .names()
                .iter()
                .zip(self.params.values())
                .map(|(n, t)| (n.clone(), t.shape().to_vec()))
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self
            .params
            .values()
            .iter()
            .chain(&self.adam.m)
            .chain(&self.adam.v)
        {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| HimodeError::Version(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(err("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(HimodeError::Version(format!(
                "checkpoint version {version}, this build reads {VERSION}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20 + hlen)
            .ok_or_else(|| err("truncated header"))?;
        let header: Header = serde_json::from_slice(body)
            .map_err(|e| HimodeError::Version(format!("bad header: {e}")))?;
        let (_, built) = HiMode::build(&header.config.model, header.config.seed)?;
        let expected: ParamStore<f32> = built.finish();
        let same_layout = expected.len() == header.tensors.len()
            && expected
                .names()
                .iter()
                .zip(expected.values())
                .zip(&header.tensors)
                .all(|((n, t), (hn, hs))| n == hn && t.shape() == hs.as_slice());
        if !same_layout {
            return Err(err(
                "tensor table does not match the model its config describes",
            ));
        }
        let mut data = &bytes[20 + hlen..];
        let mut take = |shape: &[usize]| -> Result<Tensor<f32>> {
            let n: usize = shape.iter().product();
            if data.len() < n * 4 {
                return Err(err("truncated tensor data"));
            }
            let vals = data[..n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            data = &data[n * 4..];
            Ok(Tensor::new(shape, vals)?)
        };
        let mut params = ParamStore::new();
        for (name, shape) in &header.tensors {
            let t = take(shape)?;
            params.push(name.clone(), t);
        }
        let mut m = Vec::with_capacity(header.tensors.len());
        for (_, shape) in &header.tensors {
            m.push(take(shape)?);
        }
        let mut v = Vec::with_capacity(header.tensors.len());
        for (_, shape) in &header.tensors {
            v.push(take(shape)?);
        }
        let [lr, beta1, beta2, eps] = header.adam;
        Ok(Self {
            config: header.config,
            params,
            adam: AdamState {
                config: AdamConfig {
                    lr,
                    beta1,
                    beta2,
                    eps,
                },
                step: header.adam_step,
                m,
                v,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| HimodeError::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| HimodeError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| HimodeError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
