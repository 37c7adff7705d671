//! Alpha memory bank, affinity read-out and region-adaptive fusion.
//!
//! Token matrices are token-major: `N×C` with one row per memory token.
//! The `*_var` functions build the same computations on a [`Graph`] so the
//! network can train through them; the plain functions evaluate them once.

use memprop_autograd::{Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{area_downsample, frame_hw, DataKind, TOKEN_STRIDE};

/// Row-stochastic attention of query tokens over memory tokens (`HW×N`).
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix(pub Tensor);

impl AffinityMatrix {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Per-token probability that alpha changed since the previous frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ChangeProbabilityMap {
    /// Post-sigmoid probabilities, `1×H'×W'`.
    pub probability: Tensor,
    /// Raw logits for the binary loss, when the map came from the prediction head.
    pub logits: Option<Tensor>,
}

impl ChangeProbabilityMap {
    pub fn from_logits(logits: Tensor) -> Self {
        let probability = logits.map(|x| 1.0 / (1.0 + (-x).exp()));
        Self {
            probability,
            logits: Some(logits),
        }
    }

    pub fn constant(shape: &[usize], value: f64) -> Self {
        Self {
            probability: Tensor::full(shape, value),
            logits: None,
        }
    }
}

/// Similarity scale applied to the negative squared distance; `None` means `1/√C_k`.
pub fn default_affinity_scale(key_dim: usize) -> f64 {
    1.0 / (key_dim as f64).sqrt()
}

/// `C×H×W` feature map as an `HW×C` token matrix.
pub fn tokens_var(g: &mut Graph, map: Var) -> Var {
    let s = g.shape(map).to_vec();
    let flat = g.reshape(map, &[s[0], s[1] * s[2]]);
    g.transpose(flat)
}

/// `HW×C` tokens back to a `C×H×W` map.
pub fn untokens_var(g: &mut Graph, tokens: Var, h: usize, w: usize) -> Var {
    let c = g.shape(tokens)[1];
    let t = g.transpose(tokens);
    g.reshape(t, &[c, h, w])
}

/// `A = softmax_rows(scale · −‖q_i − k_j‖²)`.
pub fn affinity_var(g: &mut Graph, query: Var, keys: Var, scale: f64) -> Var {
    let kt = g.transpose(keys);
    let qk = g.matmul(query, kt);
    let qk2 = g.scale(qk, 2.0);
    let q2 = g.square(query);
    let qq = g.sum_axis(q2, 1);
    let k2 = g.square(keys);
    let kk = g.sum_axis(k2, 1);
    let kk_row = g.transpose(kk);
    let a = g.sub(qk2, qq);
    let neg_dist = g.sub(a, kk_row);
    let logits = g.scale(neg_dist, scale);
    g.softmax_rows(logits)
}

/// `P = V_m ⊙ U + V_last ⊙ (1 − U)` with `U` an `N×1` column broadcast over channels.
pub fn fuse_var(g: &mut Graph, queried: Var, last: Var, change: Var) -> Var {
    let a = g.mul(queried, change);
    let keep = g.rsub_scalar(1.0, change);
    let b = g.mul(last, keep);
    g.add(a, b)
}

fn check_matrix(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::InvalidInput(format!("{what} must be a token matrix, got {s:?}"))),
    }
}

pub fn compute_affinity(query: &Tensor, memory_keys: &Tensor, scale: Option<f64>) -> Result<AffinityMatrix> {
    let (_, cq) = check_matrix(query, "query")?;
    let (n, ck) = check_matrix(memory_keys, "memory keys")?;
    if n == 0 {
        return Err(Error::EmptyMemory);
    }
    if cq != ck {
        return Err(Error::shape("compute_affinity", query.shape(), memory_keys.shape()));
    }
    if !query.all_finite() || !memory_keys.all_finite() {
        return Err(Error::InvalidInput("non-finite query or key".into()));
    }
    let scale = scale.unwrap_or_else(|| default_affinity_scale(ck));
    let mut g = Graph::new();
    let q = g.constant(query.clone());
    let k = g.constant(memory_keys.clone());
    let a = affinity_var(&mut g, q, k, scale);
    Ok(AffinityMatrix(g.value(a).clone()))
}

pub fn read_memory(affinity: &AffinityMatrix, memory_values: &Tensor) -> Result<Tensor> {
    let (_, n) = check_matrix(&affinity.0, "affinity")?;
    let (nv, _) = check_matrix(memory_values, "memory values")?;
    if n != nv {
        return Err(Error::shape("read_memory", affinity.0.shape(), memory_values.shape()));
    }
    let mut g = Graph::new();
    let a = g.constant(affinity.0.clone());
    let v = g.constant(memory_values.clone());
    let out = g.matmul(a, v);
    Ok(g.value(out).clone())
}

/// Region-adaptive merge of freshly queried values and last-frame values.
///
/// `queried` and `last` are `N×C_v` token matrices; `change.probability` holds
/// one probability per token (any shape with `N` elements).
pub fn fuse_memory(queried: &Tensor, last: &Tensor, change: &ChangeProbabilityMap) -> Result<Tensor> {
    let (n, _) = check_matrix(queried, "queried values")?;
    if queried.shape() != last.shape() {
        return Err(Error::shape("fuse_memory", queried.shape(), last.shape()));
    }
    let u = &change.probability;
    if u.numel() != n {
        return Err(Error::shape("fuse_memory change map", u.shape(), &[n, 1]));
    }
    if u.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::InvalidInput("change probability outside [0, 1]".into()));
    }
    let mut g = Graph::new();
    let vm = g.constant(queried.clone());
    let vl = g.constant(last.clone());
    let uc = g.constant(u.reshape(&[n, 1]).expect("numel checked"));
    let p = fuse_var(&mut g, vm, vl, uc);
    Ok(g.value(p).clone())
}

/// Binary `1×H'×W'` map of tokens whose alpha changed between two frames.
///
/// Matting data fires at `|Δα| ≥ δ`; segmentation data at `|Δα| > δ` so that
/// `δ = 0` marks exactly the flipped pixels. The full-resolution map is
/// area-downsampled by the token stride and any nonzero block fires.
pub fn ground_truth_change_mask(
    previous: &Tensor,
    current: &Tensor,
    delta: f64,
    kind: DataKind,
) -> Result<Tensor> {
    if previous.shape() != current.shape() {
        return Err(Error::shape("ground_truth_change_mask", previous.shape(), current.shape()));
    }
    if !(delta >= 0.0) {
        return Err(Error::config("delta", format!("delta must be ≥ 0, got {delta}")));
    }
    frame_hw(previous)?;
    let changed = previous
        .zip_map(current, |a, b| {
            let d = (a - b).abs();
            let fires = match kind {
                DataKind::Matting => d >= delta,
                DataKind::Segmentation => d > delta,
            };
            f64::from(u8::from(fires))
        })
        .expect("shape checked");
    let down = area_downsample(&changed, TOKEN_STRIDE)?;
    Ok(down.map(|v| f64::from(u8::from(v > 0.0))))
}

/// Default change thresholds per data kind.
pub fn default_change_delta(kind: DataKind) -> f64 {
    match kind {
        DataKind::Matting => 0.001,
        DataKind::Segmentation => 0.0,
    }
}

pub trait TokenCount {
    fn token_count(&self) -> usize;
}

impl TokenCount for Tensor {
    fn token_count(&self) -> usize {
        self.shape().first().copied().unwrap_or(0)
    }
}

/// A tape variable tagged with its token count, for banks that live on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenVar {
    pub var: Var,
    pub tokens: usize,
}

impl TokenCount for TokenVar {
    fn token_count(&self) -> usize {
        self.tokens
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryBankConfig {
    /// Store a frame every `interval` frames.
    pub interval: usize,
    /// Maximum number of stored frames, including the pinned first frame.
    pub capacity: usize,
}

impl Default for MemoryBankConfig {
    fn default() -> Self {
        Self {
            interval: 5,
            capacity: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryFrame<E> {
    pub frame_index: usize,
    pub key: E,
    pub value: E,
}

/// Time-ordered key/value store with a pinned first entry.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank<E> {
    config: MemoryBankConfig,
    frames: Vec<MemoryFrame<E>>,
}

impl<E: TokenCount + Clone> MemoryBank<E> {
    pub fn new(config: MemoryBankConfig) -> Result<Self> {
        if config.interval == 0 {
            return Err(Error::config("memory.interval", "must be ≥ 1"));
        }
        if config.capacity == 0 {
            return Err(Error::config("memory.capacity", "must be ≥ 1"));
        }
        Ok(Self {
            config,
            frames: Vec::new(),
        })
    }

    pub fn config(&self) -> MemoryBankConfig {
        self.config
    }

    pub fn frames(&self) -> &[MemoryFrame<E>] {
        &self.frames
    }

    pub fn frame_indices(&self) -> Vec<usize> {
        self.frames.iter().map(|f| f.frame_index).collect()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn keys(&self) -> Vec<E> {
        self.frames.iter().map(|f| f.key.clone()).collect()
    }

    pub fn values(&self) -> Vec<E> {
        self.frames.iter().map(|f| f.value.clone()).collect()
    }

    pub fn token_count(&self) -> usize {
        self.frames.iter().map(|f| f.key.token_count()).sum()
    }

    /// Stores the frame if it falls on the update cadence; returns whether it was stored.
    pub fn update(&mut self, key: E, value: E, frame_index: usize) -> Result<bool> {
        if key.token_count() != value.token_count() {
            return Err(Error::InvalidInput(format!(
                "key has {} tokens but value has {}",
                key.token_count(),
                value.token_count()
            )));
        }
        if frame_index % self.config.interval != 0 {
            return Ok(false);
        }
        self.push(key, value, frame_index);
        Ok(true)
    }

    /// Stores unconditionally, evicting the oldest non-first frame beyond capacity.
    pub fn push(&mut self, key: E, value: E, frame_index: usize) {
        self.frames.push(MemoryFrame {
            frame_index,
            key,
            value,
        });
        while self.frames.len() > self.config.capacity {
            if self.frames.len() < 2 {
                break;
            }
            self.frames.remove(1);
        }
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }
}

impl MemoryBank<Tensor> {
    /// All keys stacked as a `(T_m·H'W')×C_k` matrix.
    pub fn stacked_keys(&self) -> Result<Tensor> {
        stack_rows(self.frames.iter().map(|f| &f.key))
    }

    pub fn stacked_values(&self) -> Result<Tensor> {
        stack_rows(self.frames.iter().map(|f| &f.value))
    }
}

fn stack_rows<'a>(items: impl Iterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut rows = 0;
    let mut cols = None;
    let mut data = Vec::new();
    for t in items {
        let (r, c) = check_matrix(t, "memory entry")?;
        if *cols.get_or_insert(c) != c {
            return Err(Error::shape("memory bank", &[r, c], &[r, cols.unwrap_or(0)]));
        }
        rows += r;
        data.extend_from_slice(t.data());
    }
    let cols = cols.ok_or(Error::EmptyMemory)?;
    Ok(Tensor::new(&[rows, cols], data).expect("sized"))
}

/// Standalone cadence update, mirroring [`MemoryBank::update`].
pub fn update_bank<E: TokenCount + Clone>(
    mut bank: MemoryBank<E>,
    key: E,
    value: E,
    frame_index: usize,
) -> Result<MemoryBank<E>> {
    bank.update(key, value, frame_index)?;
    Ok(bank)
}
