//! `SPOTCKPT` files: magic, `u32` version, `u32` entry count, then entries of
//! (`u16` name length, name bytes, tensor in the `SPT0` format).

use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::Params;
use crate::tensor::{decode_tensor, encode_tensor, Tensor};

use super::optim::Adam;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SPOTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Model parameters with the configuration that shaped them, the step
/// counter and optimizer moments for resuming.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Params,
    pub step: u64,
    pub adam: Option<Adam>,
}

fn bytes_tensor(b: &[u8]) -> Tensor {
    Tensor::new([b.len()], b.iter().map(|&x| x as f32).collect()).unwrap()
}

fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().map(|&x| x as u8).collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries: Vec<(String, Tensor)> = Vec::new();
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        entries.push(("meta.config".into(), bytes_tensor(&json)));
        entries.push(("meta.step".into(), bytes_tensor(&self.step.to_le_bytes())));
        for (k, v) in self.params.iter() {
            entries.push((format!("param.{k}"), v.clone()));
        }
        if let Some(adam) = &self.adam {
            entries.push(("adam.t".into(), bytes_tensor(&adam.t.to_le_bytes())));
            let hyper = [adam.beta1, adam.beta2, adam.eps];
            let hb: Vec<u8> = hyper.iter().flat_map(|h| h.to_le_bytes()).collect();
            entries.push(("adam.hyper".into(), bytes_tensor(&hb)));
            for (k, v) in adam.m.iter() {
                entries.push((format!("adam.m.{k}"), v.clone()));
            }
            for (k, v) in adam.v.iter() {
                entries.push((format!("adam.v.{k}"), v.clone()));
            }
        }
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, t) in &entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            encode_tensor(t, &mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let perr = |offset: usize, msg: String| Error::Parse { offset, msg };
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(perr(0, "not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(perr(8, format!("unsupported checkpoint version {version}")));
        }
        let count = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        let mut pos = 16;
        let mut config = None;
        let mut step = None;
        let mut params = Params::new();
        let (mut m, mut v) = (Params::new(), Params::new());
        let (mut adam_t, mut hyper) = (None, None);
        for _ in 0..count {
            if bytes.len() < pos + 2 {
                return Err(perr(pos, "truncated entry name length".into()));
            }
            let len = u16::from_le_bytes(bytes[pos..pos + 2].try_into().unwrap()) as usize;
            pos += 2;
            let name = bytes
                .get(pos..pos + len)
                .ok_or_else(|| perr(pos, "truncated entry name".into()))?;
            let name = std::str::from_utf8(name).map_err(|_| perr(pos, "entry name is not UTF-8".into()))?.to_string();
            pos += len;
            let (t, used) = decode_tensor(&bytes[pos..]).map_err(|e| match e {
                Error::Parse { offset, msg } => perr(pos + offset, format!("entry `{name}`: {msg}")),
                other => other,
            })?;
            let t: Tensor = t.into_real();
            pos += used;
            match name.as_str() {
                "meta.config" => {
                    let cfg = serde_json::from_slice(&tensor_bytes(&t))
                        .map_err(|e| perr(pos, format!("bad embedded config: {e}")))?;
                    config = Some(cfg);
                }
                "meta.step" => step = Some(u64::from_le_bytes(tensor_bytes(&t).try_into().map_err(|_| perr(pos, "bad step".into()))?)),
                "adam.t" => adam_t = Some(u64::from_le_bytes(tensor_bytes(&t).try_into().map_err(|_| perr(pos, "bad adam.t".into()))?)),
                "adam.hyper" => {
                    let b = tensor_bytes(&t);
                    if b.len() != 24 {
                        return Err(perr(pos, "bad adam.hyper".into()));
                    }
                    let f = |i: usize| f64::from_le_bytes(b[8 * i..8 * i + 8].try_into().unwrap());
                    hyper = Some([f(0), f(1), f(2)]);
                }
                n => {
                    if let Some(k) = n.strip_prefix("param.") {
                        params.insert(k, t);
                    } else if let Some(k) = n.strip_prefix("adam.m.") {
                        m.insert(k, t);
                    } else if let Some(k) = n.strip_prefix("adam.v.") {
                        v.insert(k, t);
                    } else {
                        return Err(perr(pos, format!("unknown checkpoint entry `{n}`")));
                    }
                }
            }
        }
        if pos != bytes.len() {
            return Err(perr(pos, "trailing bytes after checkpoint entries".into()));
        }
        let config = config.ok_or_else(|| perr(pos, "checkpoint has no config".into()))?;
        let step = step.ok_or_else(|| perr(pos, "checkpoint has no step".into()))?;
        let adam = match (adam_t, hyper) {
            (Some(t), Some([beta1, beta2, eps])) => Some(Adam { beta1, beta2, eps, m, v, t }),
            _ => None,
        };
        Ok(Checkpoint { config, params, step, adam })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
