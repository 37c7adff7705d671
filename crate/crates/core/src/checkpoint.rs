//! Checkpoint files.
//!
//! Layout: the magic line `memprop-matte-v1\n`, a little-endian `u64` length, that many
//! bytes of JSON metadata, then a `u64` count followed by raw little-endian `f64` values
//! (parameters, then optimizer constants, running losses and moments when a training
//! state is present).

use std::collections::VecDeque;
use std::path::Path;

use memprop_autograd::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{parse_json, write_bytes};
use crate::network::{MattingModel, ModelConfig};
use crate::training::{AdamW, TrainConfig, TrainState};

pub const CHECKPOINT_MAGIC: &[u8] = b"memprop-matte-v1\n";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateMeta {
    stage: u8,
    iteration: usize,
    adam_step: u64,
    rng_seed: String,
    rng_stream: u64,
    /// Decimal, since JSON numbers cannot hold a u128.
    rng_word_pos: String,
    recent_totals: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    model: ModelConfig,
    params: Vec<ParamMeta>,
    state: Option<StateMeta>,
    train_config: Option<TrainConfig>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: MattingModel,
    pub state: Option<TrainState>,
    /// Configuration the model was trained with.
    pub train_config: Option<TrainConfig>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex32(s: &str) -> Result<[u8; 32]> {
    if s.len() != 64 || !s.is_ascii() {
        return Err(Error::Checkpoint("rng_seed must be 64 hex digits".into()));
    }
    let mut out = [0u8; 32];
    for (i, b) in out.iter_mut().enumerate() {
        *b = u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
            .map_err(|_| Error::Checkpoint("rng_seed must be 64 hex digits".into()))?;
    }
    Ok(out)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.model.params();
        let mut values: Vec<f64> = Vec::with_capacity(params.scalar_count());
        for t in params.tensors() {
            values.extend_from_slice(t.data());
        }
        let state = self.state.as_ref().map(|s| {
            let o = &s.optimizer;
            values.extend_from_slice(&[o.beta1, o.beta2, o.eps]);
            values.extend(s.recent_totals.iter().copied());
            for t in o.m.iter().chain(&o.v) {
                values.extend_from_slice(t.data());
            }
            StateMeta {
                stage: s.stage,
                iteration: s.iteration,
                adam_step: o.step,
                rng_seed: hex(&s.rng.get_seed()),
                rng_stream: s.rng.get_stream(),
                rng_word_pos: s.rng.get_word_pos().to_string(),
                recent_totals: s.recent_totals.len(),
            }
        });
        let meta = Meta {
            model: self.model.config().clone(),
            params: params
                .names()
                .iter()
                .zip(params.tensors())
                .map(|(n, t)| ParamMeta {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            state,
            train_config: self.train_config.clone(),
        };
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 16 + json.len() + 8 * values.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(format!("{origin}: {m}"));
        let Some(rest) = bytes.strip_prefix(CHECKPOINT_MAGIC) else {
            let line = bytes.split(|&b| b == b'\n').next().unwrap_or_default();
            return Err(bad(&format!(
                "unsupported header {:?}, expected {:?}",
                String::from_utf8_lossy(&line[..line.len().min(40)]),
                "memprop-matte-v1"
            )));
        };
        let mut cursor = rest;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cursor.len() < n {
                return Err(bad("truncated file"));
            }
            let (head, tail) = cursor.split_at(n);
            cursor = tail;
            Ok(head)
        };
        let json_len = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let json = std::str::from_utf8(take(json_len)?).map_err(|_| bad("metadata is not UTF-8"))?;
        let meta: Meta = parse_json(json, origin)?;
        let count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let raw = take(count.checked_mul(8).ok_or_else(|| bad("value count overflows"))?)?;
        if !cursor.is_empty() {
            return Err(bad("trailing bytes after the value section"));
        }
        let mut values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut next_tensor = |shape: &[usize]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            if data.len() != n {
                return Err(bad("value section shorter than the metadata declares"));
            }
            Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))
        };
        let mut names = Vec::with_capacity(meta.params.len());
        let mut tensors = Vec::with_capacity(meta.params.len());
        for p in &meta.params {
            names.push(p.name.clone());
            tensors.push(next_tensor(&p.shape)?);
        }
        let model = MattingModel::from_params(meta.model, &names, tensors)?;
        let state = match meta.state {
            None => None,
            Some(s) => {
                let consts = next_tensor(&[3])?;
                let totals = next_tensor(&[s.recent_totals])?;
                let shapes: Vec<Vec<usize>> = meta.params.iter().map(|p| p.shape.clone()).collect();
                let m = shapes.iter().map(|sh| next_tensor(sh)).collect::<Result<Vec<_>>>()?;
                let v = shapes.iter().map(|sh| next_tensor(sh)).collect::<Result<Vec<_>>>()?;
                let mut rng = ChaCha8Rng::from_seed(unhex32(&s.rng_seed)?);
                rng.set_stream(s.rng_stream);
                rng.set_word_pos(
                    s.rng_word_pos
                        .parse::<u128>()
                        .map_err(|_| bad("rng_word_pos is not an integer"))?,
                );
                let c = consts.data();
                Some(TrainState {
                    stage: s.stage,
                    iteration: s.iteration,
                    optimizer: AdamW {
                        beta1: c[0],
                        beta2: c[1],
                        eps: c[2],
                        step: s.adam_step,
                        m,
                        v,
                    },
                    rng,
                    recent_totals: totals.data().iter().copied().collect::<VecDeque<_>>(),
                })
            }
        };
        if values.next().is_some() {
            return Err(bad("value section longer than the metadata declares"));
        }
        Ok(Self {
            model,
            state,
            train_config: meta.train_config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}
