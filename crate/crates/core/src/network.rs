//! Desk-scale network blocks.
//!
//! * frame encoder: five 3×3 conv stages producing skips at ×1..×8 and the ×16 feature `F_t`
//! * key projection: 1×1 conv on `F_t`, shared for query and memory key
//! * change head: 1×1 conv + two 3×3 convs over `[K_t, K_{t-1}, ↓16 M_{t-1}]`
//! * object fusion: token self-attention + feed-forward blocks, conditioned on a
//!   mask-pooled first-frame object token (a small stand-in, not an object transformer)
//! * decoder: four ×2 upsampling stages with skips, ending in parallel 3×3 alpha
//!   and segmentation projections
//! * value encoder: strided convs over the alpha matte fused with `F_t`

use std::rc::Rc;

use memprop_autograd::{Conv2dSpec, Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{default_affinity_scale, tokens_var, untokens_var, ChangeProbabilityMap};
use crate::types::TOKEN_STRIDE;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Channel widths of the encoder at ×1, ×2, ×4, ×8 and ×16.
    pub encoder_widths: [usize; 5],
    pub key_dim: usize,
    pub value_dim: usize,
    /// Widths of the alpha branch of the value encoder at ×2, ×4, ×8, ×16.
    pub value_alpha_widths: [usize; 4],
    pub change_hidden: usize,
    pub fusion_blocks: usize,
    pub fusion_hidden: usize,
    /// Decoder widths at ×16, ×8, ×4, ×2, ×1.
    pub decoder_widths: [usize; 5],
    /// Multiplier on the negative squared key distance; defaults to `1/√key_dim`.
    pub affinity_scale: Option<f64>,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_widths: [16, 32, 64, 96, 128],
            key_dim: 32,
            value_dim: 64,
            value_alpha_widths: [8, 16, 32, 32],
            change_hidden: 16,
            fusion_blocks: 1,
            fusion_hidden: 128,
            decoder_widths: [64, 48, 32, 24, 16],
            affinity_scale: None,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// A very small model for fast tests and gradient checks.
    pub fn tiny() -> Self {
        Self {
            encoder_widths: [2, 3, 3, 4, 4],
            key_dim: 3,
            value_dim: 4,
            value_alpha_widths: [2, 2, 2, 2],
            change_hidden: 2,
            fusion_blocks: 1,
            fusion_hidden: 4,
            decoder_widths: [4, 3, 3, 2, 2],
            affinity_scale: None,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = self
            .encoder_widths
            .iter()
            .chain(&self.value_alpha_widths)
            .chain(&self.decoder_widths)
            .chain([&self.key_dim, &self.value_dim, &self.change_hidden, &self.fusion_hidden]);
        if widths.into_iter().any(|&w| w == 0) {
            return Err(Error::config("model", "all widths must be ≥ 1"));
        }
        if let Some(s) = self.affinity_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::config("model.affinity_scale", "must be positive"));
            }
        }
        Ok(())
    }

    pub fn affinity_scale(&self) -> f64 {
        self.affinity_scale
            .unwrap_or_else(|| default_affinity_scale(self.key_dim))
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    fn add(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    w: usize,
    b: usize,
    spec: Conv2dSpec,
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct FusionBlock {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    encoder: [ConvLayer; 5],
    key_proj: ConvLayer,
    change: [ConvLayer; 3],
    fusion: Vec<FusionBlock>,
    decoder: [ConvLayer; 5],
    alpha_head: ConvLayer,
    seg_head: ConvLayer,
    value_alpha: [ConvLayer; 4],
    value_out: ConvLayer,
}

struct Initializer {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl Initializer {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape, |_| dist.sample(&mut self.rng))
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, gain: f64) -> ConvLayer {
        let fan_in = (cin * k * k) as f64;
        let w = self.normal(&[cout, cin, k, k], gain * (2.0 / fan_in).sqrt());
        let w = self.store.add(format!("{name}.weight"), w);
        let b = self.store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        ConvLayer {
            w,
            b,
            spec: Conv2dSpec { stride, pad: k / 2 },
        }
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize, gain: f64) -> Linear {
        let w = self.normal(&[din, dout], gain * (2.0 / din as f64).sqrt());
        let w = self.store.add(format!("{name}.weight"), w);
        let b = self.store.add(format!("{name}.bias"), Tensor::zeros(&[1, dout]));
        Linear { w, b }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, ParamStore) {
    let mut init = Initializer {
        store: ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        },
        rng: ChaCha8Rng::seed_from_u64(cfg.init_seed),
    };
    let e = cfg.encoder_widths;
    let encoder = [
        init.conv("encoder.s1", 3, e[0], 3, 1, 1.0),
        init.conv("encoder.s2", e[0], e[1], 3, 2, 1.0),
        init.conv("encoder.s4", e[1], e[2], 3, 2, 1.0),
        init.conv("encoder.s8", e[2], e[3], 3, 2, 1.0),
        init.conv("encoder.s16", e[3], e[4], 3, 2, 1.0),
    ];
    let key_proj = init.conv("key_proj", e[4], cfg.key_dim, 1, 1, 0.5);
    let h = cfg.change_hidden;
    let change = [
        init.conv("change.c1", 2 * cfg.key_dim + 1, h, 1, 1, 1.0),
        init.conv("change.c2", h, h, 3, 1, 1.0),
        init.conv("change.c3", h, 1, 3, 1, 0.5),
    ];
    let cv = cfg.value_dim;
    let fusion = (0..cfg.fusion_blocks)
        .map(|i| FusionBlock {
            q: init.linear(&format!("fusion.{i}.q"), cv, cv, 0.5),
            k: init.linear(&format!("fusion.{i}.k"), cv, cv, 0.5),
            v: init.linear(&format!("fusion.{i}.v"), cv, cv, 1.0),
            o: init.linear(&format!("fusion.{i}.o"), cv, cv, 0.1),
            ff1: init.linear(&format!("fusion.{i}.ff1"), cv, cfg.fusion_hidden, 1.0),
            ff2: init.linear(&format!("fusion.{i}.ff2"), cfg.fusion_hidden, cv, 0.1),
        })
        .collect();
    let d = cfg.decoder_widths;
    let decoder = [
        init.conv("decoder.s16", cv + e[4], d[0], 3, 1, 1.0),
        init.conv("decoder.s8", d[0] + e[3], d[1], 3, 1, 1.0),
        init.conv("decoder.s4", d[1] + e[2], d[2], 3, 1, 1.0),
        init.conv("decoder.s2", d[2] + e[1], d[3], 3, 1, 1.0),
        init.conv("decoder.s1", d[3] + e[0], d[4], 3, 1, 1.0),
    ];
    let alpha_head = init.conv("alpha_head", d[4], 1, 3, 1, 0.5);
    let seg_head = init.conv("seg_head", d[4], 1, 3, 1, 0.5);
    let a = cfg.value_alpha_widths;
    let value_alpha = [
        init.conv("value.a2", 1, a[0], 3, 2, 1.0),
        init.conv("value.a4", a[0], a[1], 3, 2, 1.0),
        init.conv("value.a8", a[1], a[2], 3, 2, 1.0),
        init.conv("value.a16", a[2], a[3], 3, 2, 1.0),
    ];
    let value_out = init.conv("value.out", e[4] + a[3] + 1, cv, 3, 1, 1.0);
    let layout = Layout {
        encoder,
        key_proj,
        change,
        fusion,
        decoder,
        alpha_head,
        seg_head,
        value_alpha,
        value_out,
    };
    (layout, init.store)
}

/// Encoder features at every scale for one frame (tape variables).
#[derive(Clone, Copy, Debug)]
pub struct PyramidVars {
    pub f1: Var,
    pub f2: Var,
    pub f4: Var,
    pub f8: Var,
    pub f16: Var,
}

/// Encoder output for one frame.
#[derive(Clone, Copy, Debug)]
pub struct EncodedFrame {
    pub pyramid: PyramidVars,
    /// `C_k×H'×W'` key map, used both as query and as memory key.
    pub key: Var,
}

/// Decoder outputs for one frame.
#[derive(Clone, Copy, Debug)]
pub struct DecodedFrame {
    pub alpha: Var,
    pub alpha_logits: Var,
    pub seg_logits: Var,
}

/// Parameters placed on a particular [`Graph`].
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Feature pyramid as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub f1: Tensor,
    pub f2: Tensor,
    pub f4: Tensor,
    pub f8: Tensor,
    pub f16: Tensor,
}

#[derive(Clone, Debug)]
pub struct MattingModel {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl PartialEq for MattingModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

fn nearest_up2_indices(c: usize, h: usize, w: usize) -> Rc<Vec<u32>> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut idx = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                idx.push(((ch * h + y / 2) * w + x / 2) as u32);
            }
        }
    }
    Rc::new(idx)
}

/// `1×H×W` → `1×H/16×W/16` block means, on the tape.
pub fn area_down16_var(g: &mut Graph, alpha: Var) -> Var {
    let s = TOKEN_STRIDE;
    let w = g.constant(Tensor::full(&[1, 1, s, s], 1.0 / (s * s) as f64));
    g.conv2d(alpha, w, None, Conv2dSpec { stride: s, pad: 0 })
}

impl MattingModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, params) = build_layout(&config);
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, names: &[String], tensors: Vec<Tensor>) -> Result<Self> {
        let mut model = Self::new(config)?;
        if names.len() != model.params.len() || tensors.len() != names.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                model.params.len(),
                names.len()
            )));
        }
        for (i, (name, t)) in names.iter().zip(tensors).enumerate() {
            if name != &model.params.names[i] {
                return Err(Error::Checkpoint(format!(
                    "parameter {i} is `{name}`, expected `{}`",
                    model.params.names[i]
                )));
            }
            if t.shape() != model.params.tensors[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    model.params.tensors[i].shape()
                )));
            }
            model.params.tensors[i] = t;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Names of the parameters of the final alpha projection.
    pub fn alpha_head_param_names(&self) -> [&str; 2] {
        let l = self.layout.alpha_head;
        [&self.params.names[l.w], &self.params.names[l.b]]
    }

    /// Places every parameter on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        BoundParams { vars }
    }

    fn conv(&self, g: &mut Graph, b: &BoundParams, layer: ConvLayer, x: Var) -> Var {
        g.conv2d(x, b.vars[layer.w], Some(b.vars[layer.b]), layer.spec)
    }

    fn conv_relu(&self, g: &mut Graph, b: &BoundParams, layer: ConvLayer, x: Var) -> Var {
        let y = self.conv(g, b, layer, x);
        g.relu(y)
    }

    fn linear(&self, g: &mut Graph, b: &BoundParams, layer: Linear, x: Var) -> Var {
        let y = g.matmul(x, b.vars[layer.w]);
        g.add(y, b.vars[layer.b])
    }

    fn check_frame_shape(shape: &[usize], channels: usize) -> Result<()> {
        match shape {
            [c, h, w] if *c == channels && h % TOKEN_STRIDE == 0 && w % TOKEN_STRIDE == 0 && *h > 0 && *w > 0 => Ok(()),
            _ => Err(Error::InvalidInput(format!(
                "expected {channels}×H×W with H, W divisible by {TOKEN_STRIDE}, got {shape:?}"
            ))),
        }
    }

    pub fn encode_frame_var(&self, g: &mut Graph, b: &BoundParams, frame: Var) -> Result<EncodedFrame> {
        Self::check_frame_shape(g.shape(frame), 3)?;
        let l = &self.layout;
        let f1 = self.conv_relu(g, b, l.encoder[0], frame);
        let f2 = self.conv_relu(g, b, l.encoder[1], f1);
        let f4 = self.conv_relu(g, b, l.encoder[2], f2);
        let f8 = self.conv_relu(g, b, l.encoder[3], f4);
        let f16 = self.conv_relu(g, b, l.encoder[4], f8);
        let key = self.conv(g, b, l.key_proj, f16);
        Ok(EncodedFrame {
            pyramid: PyramidVars { f1, f2, f4, f8, f16 },
            key,
        })
    }

    /// Change logits `1×H'×W'` from current key, previous key and previous matte.
    pub fn change_logits_var(
        &self,
        g: &mut Graph,
        b: &BoundParams,
        key: Var,
        prev_key: Var,
        prev_alpha: Var,
    ) -> Result<Var> {
        if g.shape(key) != g.shape(prev_key) {
            return Err(Error::shape("change head keys", g.shape(key), g.shape(prev_key)));
        }
        let down = area_down16_var(g, prev_alpha);
        if g.shape(down)[1..] != g.shape(key)[1..] {
            return Err(Error::shape("change head alpha", g.shape(down), g.shape(key)));
        }
        let x = g.concat(&[key, prev_key, down]);
        let l = &self.layout;
        let h = self.conv_relu(g, b, l.change[0], x);
        let h = self.conv_relu(g, b, l.change[1], h);
        Ok(self.conv(g, b, l.change[2], h))
    }

    /// Mask-weighted mean of value tokens, `1×C_v`.
    pub fn object_token_var(&self, g: &mut Graph, value_tokens: Var, mask: &Tensor) -> Result<Var> {
        let down = crate::types::area_downsample(mask, TOKEN_STRIDE)?;
        let n = down.numel();
        if g.shape(value_tokens)[0] != n {
            return Err(Error::shape("object token", g.shape(value_tokens), down.shape()));
        }
        let total: f64 = down.sum();
        let weights = down
            .reshape(&[1, n])
            .expect("numel")
            .map(|v| v / (total + 1e-6));
        let w = g.constant(weights);
        Ok(g.matmul(w, value_tokens))
    }

    /// Self-attention + feed-forward blocks over `N×C_v` tokens, with the object
    /// token appended to the attended set. Returns the refined tokens and each
    /// block's `N×(N+1)` attention matrix.
    pub fn object_fusion_var(
        &self,
        g: &mut Graph,
        b: &BoundParams,
        readout: Var,
        object: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let cv = self.config.value_dim;
        if g.shape(readout).len() != 2 || g.shape(readout)[1] != cv {
            return Err(Error::shape("object fusion readout", g.shape(readout), &[0, cv]));
        }
        if g.shape(object) != [1, cv] {
            return Err(Error::shape("object fusion token", g.shape(object), &[1, cv]));
        }
        let scale = 1.0 / (cv as f64).sqrt();
        let mut x = readout;
        let mut attentions = Vec::with_capacity(self.layout.fusion.len());
        for block in &self.layout.fusion {
            let context = g.concat(&[x, object]);
            let q = self.linear(g, b, block.q, x);
            let k = self.linear(g, b, block.k, context);
            let v = self.linear(g, b, block.v, context);
            let kt = g.transpose(k);
            let logits = g.matmul(q, kt);
            let logits = g.scale(logits, scale);
            let att = g.softmax_rows(logits);
            attentions.push(att);
            let mixed = g.matmul(att, v);
            let out = self.linear(g, b, block.o, mixed);
            x = g.add(x, out);
            let h = self.linear(g, b, block.ff1, x);
            let h = g.relu(h);
            let h = self.linear(g, b, block.ff2, h);
            x = g.add(x, h);
        }
        Ok((x, attentions))
    }

    fn up2(g: &mut Graph, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let idx = nearest_up2_indices(s[0], s[1], s[2]);
        g.gather(x, idx, &[s[0], 2 * s[1], 2 * s[2]])
    }

    /// Decodes `N×C_v` fused tokens to full-resolution alpha and segmentation logits.
    pub fn decode_var(
        &self,
        g: &mut Graph,
        b: &BoundParams,
        fused: Var,
        pyramid: &PyramidVars,
    ) -> Result<DecodedFrame> {
        let s16 = g.shape(pyramid.f16).to_vec();
        let (h, w) = (s16[1], s16[2]);
        if g.shape(fused) != [h * w, self.config.value_dim] {
            return Err(Error::shape("decoder tokens", g.shape(fused), &[h * w, self.config.value_dim]));
        }
        for (skip, scale) in [(pyramid.f8, 2), (pyramid.f4, 4), (pyramid.f2, 8), (pyramid.f1, 16)] {
            let s = g.shape(skip);
            if s[1] != h * scale || s[2] != w * scale {
                return Err(Error::InvalidInput(format!(
                    "missing or misshaped skip level ×{}: {s:?}",
                    16 / scale
                )));
            }
        }
        let l = &self.layout;
        let grid = untokens_var(g, fused, h, w);
        let x = g.concat(&[grid, pyramid.f16]);
        let mut x = self.conv_relu(g, b, l.decoder[0], x);
        for (stage, skip) in [pyramid.f8, pyramid.f4, pyramid.f2, pyramid.f1].into_iter().enumerate() {
            let up = Self::up2(g, x);
            let cat = g.concat(&[up, skip]);
            x = self.conv_relu(g, b, l.decoder[stage + 1], cat);
        }
        let alpha_logits = self.conv(g, b, l.alpha_head, x);
        let alpha = g.sigmoid(alpha_logits);
        let seg_logits = self.conv(g, b, l.seg_head, x);
        Ok(DecodedFrame {
            alpha,
            alpha_logits,
            seg_logits,
        })
    }

    /// Value map `C_v×H'×W'` from the ×16 frame feature and a `1×H×W` matte.
    pub fn encode_value_var(&self, g: &mut Graph, b: &BoundParams, f16: Var, alpha: Var) -> Result<Var> {
        let s = g.shape(f16).to_vec();
        let a = g.shape(alpha).to_vec();
        if a.len() != 3 || a[0] != 1 || a[1] != s[1] * TOKEN_STRIDE || a[2] != s[2] * TOKEN_STRIDE {
            return Err(Error::shape("value encoder", &a, &s));
        }
        let l = &self.layout;
        let mut x = alpha;
        for layer in l.value_alpha {
            x = self.conv_relu(g, b, layer, x);
        }
        let down = area_down16_var(g, alpha);
        let cat = g.concat(&[f16, x, down]);
        Ok(self.conv(g, b, l.value_out, cat))
    }

    fn run<T>(&self, f: impl FnOnce(&mut Graph, &BoundParams) -> Result<T>) -> Result<T> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        f(&mut g, &b)
    }

    /// Encodes one `3×H×W` frame; returns the pyramid and the `C_k×H'×W'` key.
    pub fn encode_frame(&self, frame: &Tensor) -> Result<(FeaturePyramid, Tensor)> {
        self.run(|g, b| {
            let x = g.constant(frame.clone());
            let e = self.encode_frame_var(g, b, x)?;
            let p = e.pyramid;
            Ok((
                FeaturePyramid {
                    f1: g.value(p.f1).clone(),
                    f2: g.value(p.f2).clone(),
                    f4: g.value(p.f4).clone(),
                    f8: g.value(p.f8).clone(),
                    f16: g.value(p.f16).clone(),
                },
                g.value(e.key).clone(),
            ))
        })
    }

    /// Change probability for the current frame; `None` for the previous state
    /// means there is no predecessor and the map is all ones.
    pub fn predict_change_probability(
        &self,
        key: &Tensor,
        previous: Option<(&Tensor, &Tensor)>,
    ) -> Result<ChangeProbabilityMap> {
        let Some((prev_key, prev_alpha)) = previous else {
            let s = key.shape();
            return Ok(ChangeProbabilityMap::constant(&[1, s[1], s[2]], 1.0));
        };
        self.run(|g, b| {
            let k = g.constant(key.clone());
            let pk = g.constant(prev_key.clone());
            let pa = g.constant(prev_alpha.clone());
            let logits = self.change_logits_var(g, b, k, pk, pa)?;
            Ok(ChangeProbabilityMap::from_logits(g.value(logits).clone()))
        })
    }

    /// Object fusion on an `N×C_v` readout; returns output tokens and attention matrices.
    pub fn object_fusion(&self, readout: &Tensor, object: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        self.run(|g, b| {
            let r = g.constant(readout.clone());
            let o = g.constant(object.clone());
            let (out, atts) = self.object_fusion_var(g, b, r, o)?;
            Ok((
                g.value(out).clone(),
                atts.into_iter().map(|a| g.value(a).clone()).collect(),
            ))
        })
    }

    /// Decodes fused tokens; returns `(alpha, segmentation logits)` at full resolution.
    pub fn decode_alpha(&self, fused: &Tensor, pyramid: &FeaturePyramid) -> Result<(Tensor, Tensor)> {
        self.run(|g, b| {
            let f = g.constant(fused.clone());
            let p = PyramidVars {
                f1: g.constant(pyramid.f1.clone()),
                f2: g.constant(pyramid.f2.clone()),
                f4: g.constant(pyramid.f4.clone()),
                f8: g.constant(pyramid.f8.clone()),
                f16: g.constant(pyramid.f16.clone()),
            };
            let d = self.decode_var(g, b, f, &p)?;
            Ok((g.value(d.alpha).clone(), g.value(d.seg_logits).clone()))
        })
    }

    /// Value tokens `N×C_v` for a frame feature and matte.
    pub fn encode_value(&self, f16: &Tensor, alpha: &Tensor) -> Result<Tensor> {
        if alpha.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("alpha outside [0, 1]".into()));
        }
        self.run(|g, b| {
            let f = g.constant(f16.clone());
            let a = g.constant(alpha.clone());
            let v = self.encode_value_var(g, b, f, a)?;
            let t = tokens_var(g, v);
            Ok(g.value(t).clone())
        })
    }
}
