//! Procedural matting and segmentation clips with analytic ground truth,
//! and the training-time augmentations.

use std::path::Path;

use memprop_autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{write_alpha, write_frames, write_masks, ClipManifest, DatasetManifest, Streams};
use crate::types::{
    binarize_alpha, check_binary, dilate, erode, AlphaSequence, DataKind, SegMaskSequence, Split, VideoClip,
    TOKEN_STRIDE,
};

/// Threshold turning rendered alpha into segmentation ground truth.
pub const SEG_THRESHOLD_255: u32 = 128;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Disk { radius: f64 },
    RoundedRect { half_width: f64, half_height: f64, corner: f64 },
}

/// A shape with per-frame affine motion: at frame `t` it is centered at
/// `center + t·velocity`, scaled by `1 + t·scale_rate` and rotated by `t·rotation_rate`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Primitive {
    pub shape: Shape,
    pub color: [f64; 3],
    pub center: [f64; 2],
    #[serde(default)]
    pub velocity: [f64; 2],
    #[serde(default)]
    pub scale_rate: f64,
    #[serde(default)]
    pub rotation_rate: f64,
}

impl Primitive {
    fn at(&self, t: usize) -> ([f64; 2], f64, f64) {
        let tf = t as f64;
        (
            [self.center[0] + tf * self.velocity[0], self.center[1] + tf * self.velocity[1]],
            1.0 + tf * self.scale_rate,
            tf * self.rotation_rate,
        )
    }

    /// Signed distance from `(x, y)` to the boundary at frame `t`, negative inside.
    pub fn signed_distance(&self, t: usize, x: f64, y: f64) -> f64 {
        let (c, s, theta) = self.at(t);
        let (dx, dy) = (x - c[0], y - c[1]);
        match self.shape {
            Shape::Disk { radius } => (dx * dx + dy * dy).sqrt() - radius * s,
            Shape::RoundedRect {
                half_width,
                half_height,
                corner,
            } => {
                let (sin, cos) = theta.sin_cos();
                let (lx, ly) = (cos * dx + sin * dy, -sin * dx + cos * dy);
                let r = corner * s;
                let qx = lx.abs() - (half_width * s - r);
                let qy = ly.abs() - (half_height * s - r);
                let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
                outside + qx.max(qy).min(0.0) - r
            }
        }
    }

    fn bounding_radius(&self, t: usize) -> f64 {
        let (_, s, _) = self.at(t);
        match self.shape {
            Shape::Disk { radius } => radius * s,
            Shape::RoundedRect {
                half_width,
                half_height,
                ..
            } => (half_width * half_width + half_height * half_height).sqrt() * s,
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        let ok = match self.shape {
            Shape::Disk { radius } => radius > 0.0,
            Shape::RoundedRect {
                half_width,
                half_height,
                corner,
            } => half_width > 0.0 && half_height > 0.0 && corner >= 0.0 && corner <= half_width.min(half_height),
        };
        if !ok {
            return Err(Error::config(format!("{what}.shape"), "invalid dimensions"));
        }
        if self.color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::config(format!("{what}.color"), "components must be in [0, 1]"));
        }
        Ok(())
    }
}

/// Two-color sinusoidal texture, optionally panning.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundSpec {
    pub color_a: [f64; 3],
    pub color_b: [f64; 3],
    /// Spatial frequencies in radians per pixel along x and y.
    pub frequency: [f64; 2],
    pub phase: f64,
    #[serde(default)]
    pub pan_velocity: [f64; 2],
}

impl BackgroundSpec {
    fn color(&self, t: usize, x: f64, y: f64) -> [f64; 3] {
        let (px, py) = (x - t as f64 * self.pan_velocity[0], y - t as f64 * self.pan_velocity[1]);
        let m = 0.5 + 0.5 * (self.frequency[0] * px + self.frequency[1] * py + self.phase).sin();
        std::array::from_fn(|c| self.color_a[c] * (1.0 - m) + self.color_b[c] * m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Width of the linear alpha ramp across each target edge, in pixels.
    pub soft_edge: f64,
    pub targets: Vec<Primitive>,
    #[serde(default)]
    pub distractors: Vec<Primitive>,
    pub background: BackgroundSpec,
}

/// A rendered clip with its compositing layers.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedClip {
    pub clip: VideoClip,
    pub alpha: AlphaSequence,
    pub mask: SegMaskSequence,
    /// Target color layer `T×3×H×W`.
    pub foreground: Tensor,
    /// Background including distractors, `T×3×H×W`.
    pub background: Tensor,
}

fn edge_alpha(d: f64, soft_edge: f64) -> f64 {
    if soft_edge <= 0.0 {
        if d <= 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        (0.5 - d / soft_edge).clamp(0.0, 1.0)
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % TOKEN_STRIDE != 0 || self.width % TOKEN_STRIDE != 0 {
            return Err(Error::config(
                "scene.height/width",
                format!("must be positive multiples of {TOKEN_STRIDE}"),
            ));
        }
        if !(self.soft_edge >= 0.0 && self.soft_edge.is_finite()) {
            return Err(Error::config("scene.soft_edge", "must be ≥ 0"));
        }
        if self.targets.is_empty() {
            return Err(Error::config("scene.targets", "at least one target is required"));
        }
        for (i, p) in self.targets.iter().enumerate() {
            p.validate(&format!("scene.targets[{i}]"))?;
        }
        for (i, p) in self.distractors.iter().enumerate() {
            p.validate(&format!("scene.distractors[{i}]"))?;
        }
        for c in self.background.color_a.iter().chain(&self.background.color_b) {
            if !(0.0..=1.0).contains(c) {
                return Err(Error::config("scene.background", "colors must be in [0, 1]"));
            }
        }
        Ok(())
    }

    fn check_on_canvas(&self, frames: usize) -> Result<()> {
        let (w, h) = (self.width as f64, self.height as f64);
        for t in 0..frames {
            for (i, p) in self.targets.iter().chain(&self.distractors).enumerate() {
                let (c, _, _) = p.at(t);
                let r = p.bounding_radius(t);
                if c[0] + r < 0.0 || c[0] - r > w || c[1] + r < 0.0 || c[1] - r > h || r <= 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "primitive {i} leaves the canvas entirely at frame {t}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// A randomly drawn scene: one or two moving targets, an optional distractor,
    /// soft edges of 1–3 pixels and a textured background.
    pub fn random(seed: u64, height: usize, width: usize, frames: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (width as f64, height as f64);
        let span = frames.saturating_sub(1).max(1) as f64;
        let min_side = w.min(h);
        let primitive = |rng: &mut ChaCha8Rng, big: bool| {
            let size = if big {
                rng.random_range(0.16..0.26) * min_side
            } else {
                rng.random_range(0.08..0.14) * min_side
            };
            let shape = if rng.random_bool(0.5) {
                Shape::Disk { radius: size }
            } else {
                let aspect = rng.random_range(0.6..1.0);
                Shape::RoundedRect {
                    half_width: size,
                    half_height: size * aspect,
                    corner: size * aspect * rng.random_range(0.1..0.5),
                }
            };
            let margin = size + 2.0;
            let start = [rng.random_range(margin..w - margin), rng.random_range(margin..h - margin)];
            let end = [rng.random_range(margin..w - margin), rng.random_range(margin..h - margin)];
            let travel = rng.random_range(0.1..0.4);
            Primitive {
                shape,
                color: std::array::from_fn(|_| rng.random_range(0.05..0.95)),
                center: start,
                velocity: [
                    (end[0] - start[0]) * travel / span,
                    (end[1] - start[1]) * travel / span,
                ],
                scale_rate: rng.random_range(-0.1..0.1) / span,
                rotation_rate: rng.random_range(-0.5..0.5) / span,
            }
        };
        let n_targets = rng.random_range(1..=2);
        let targets = (0..n_targets).map(|_| primitive(&mut rng, true)).collect();
        let distractors = if rng.random_bool(0.5) {
            vec![primitive(&mut rng, false)]
        } else {
            Vec::new()
        };
        let background = BackgroundSpec {
            color_a: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
            color_b: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
            frequency: [rng.random_range(0.05..0.3), rng.random_range(0.05..0.3)],
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            pan_velocity: [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)],
        };
        Self {
            seed,
            height,
            width,
            soft_edge: rng.random_range(1.0..3.0),
            targets,
            distractors,
            background,
        }
    }

    /// The same scene with all motion removed.
    pub fn frozen(&self) -> Self {
        let mut s = self.clone();
        for p in s.targets.iter_mut().chain(s.distractors.iter_mut()) {
            p.velocity = [0.0, 0.0];
            p.scale_rate = 0.0;
            p.rotation_rate = 0.0;
        }
        s.background.pan_velocity = [0.0, 0.0];
        s
    }
}

/// Renders `frames` frames of a scene.
pub fn render_clip(spec: &SceneSpec, frames: usize) -> Result<RenderedClip> {
    if frames == 0 {
        return Err(Error::InvalidInput("clip length must be ≥ 1".into()));
    }
    spec.validate()?;
    spec.check_on_canvas(frames)?;
    let (h, w) = (spec.height, spec.width);
    let n = h * w;
    let mut fg = vec![0.0; frames * 3 * n];
    let mut bg = vec![0.0; frames * 3 * n];
    let mut alpha = vec![0.0; frames * n];
    for t in 0..frames {
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let p = y * w + x;
                let mut b = spec.background.color(t, px, py);
                for d in &spec.distractors {
                    let a = edge_alpha(d.signed_distance(t, px, py), spec.soft_edge);
                    for c in 0..3 {
                        b[c] = a * d.color[c] + (1.0 - a) * b[c];
                    }
                }
                let mut premult = [0.0; 3];
                let mut acc = 0.0;
                for tg in &spec.targets {
                    let a = edge_alpha(tg.signed_distance(t, px, py), spec.soft_edge);
                    for c in 0..3 {
                        premult[c] = a * tg.color[c] + (1.0 - a) * premult[c];
                    }
                    acc = a + (1.0 - a) * acc;
                }
                alpha[t * n + p] = acc;
                for c in 0..3 {
                    let f = if acc > 0.0 { (premult[c] / acc).clamp(0.0, 1.0) } else { 0.0 };
                    fg[(t * 3 + c) * n + p] = f;
                    bg[(t * 3 + c) * n + p] = b[c];
                }
            }
        }
    }
    let foreground = Tensor::new(&[frames, 3, h, w], fg).expect("sized");
    let background = Tensor::new(&[frames, 3, h, w], bg).expect("sized");
    let alpha = Tensor::new(&[frames, 1, h, w], alpha).expect("sized");
    let composite = composite_layers(&alpha, &foreground, &background);
    let masks = (0..frames)
        .map(|t| binarize_alpha(&alpha.index_axis0(t), SEG_THRESHOLD_255))
        .collect::<Result<Vec<_>>>()?;
    Ok(RenderedClip {
        clip: VideoClip::new(composite, 0.0)?,
        alpha: AlphaSequence::new(alpha)?,
        mask: SegMaskSequence::from_frames(&masks)?,
        foreground,
        background,
    })
}

/// `I = α·F + (1 − α)·B` for `T×1×H×W` alpha and `T×3×H×W` layers.
pub fn composite_layers(alpha: &Tensor, fg: &Tensor, bg: &Tensor) -> Tensor {
    let s = fg.shape();
    let n = s[2] * s[3];
    Tensor::from_fn(s, |i| {
        let t = i / (3 * n);
        let a = alpha.data()[t * n + i % n];
        a * fg.data()[i] + (1.0 - a) * bg.data()[i]
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MorphologySpec {
    pub erode_prob: f64,
    pub dilate_prob: f64,
    /// Odd kernel sizes drawn uniformly.
    pub kernels: Vec<usize>,
}

impl Default for MorphologySpec {
    fn default() -> Self {
        Self {
            erode_prob: 0.4,
            dilate_prob: 0.4,
            kernels: vec![1, 3, 5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionSpec {
    /// Maximum translation per frame, in pixels.
    pub max_translate: f64,
    /// Maximum relative scale change per frame.
    pub max_scale: f64,
    /// Maximum rotation per frame, in radians.
    pub max_rotate: f64,
}

impl Default for MotionSpec {
    fn default() -> Self {
        Self {
            max_translate: 2.0,
            max_scale: 0.02,
            max_rotate: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemporalSpec {
    pub reverse_prob: f64,
}

impl Default for TemporalSpec {
    fn default() -> Self {
        Self { reverse_prob: 0.5 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSpec {
    pub motion: MotionSpec,
    pub temporal: TemporalSpec,
    pub morphology: MorphologySpec,
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        let m = &self.morphology;
        for (name, p) in [
            ("morphology.erode_prob", m.erode_prob),
            ("morphology.dilate_prob", m.dilate_prob),
            ("temporal.reverse_prob", self.temporal.reverse_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("augmentation.{name}"), "must be in [0, 1]"));
            }
        }
        if m.erode_prob + m.dilate_prob > 1.0 {
            return Err(Error::config("augmentation.morphology", "erode + dilate probability exceeds 1"));
        }
        if m.kernels.is_empty() || m.kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::config("augmentation.morphology.kernels", "must be a non-empty list of odd sizes"));
        }
        let mo = &self.motion;
        if [mo.max_translate, mo.max_scale, mo.max_rotate].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::config("augmentation.motion", "ranges must be ≥ 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MorphOp {
    Identity,
    Erode(usize),
    Dilate(usize),
}

/// Randomly erodes or dilates a guidance mask.
pub fn augment_given_mask(mask: &Tensor, spec: &MorphologySpec, rng: &mut impl Rng) -> Result<(Tensor, MorphOp)> {
    check_binary(mask, "guidance mask")?;
    let u: f64 = rng.random();
    let k = spec.kernels[rng.random_range(0..spec.kernels.len())];
    let op = if u < spec.erode_prob {
        MorphOp::Erode(k)
    } else if u < spec.erode_prob + spec.dilate_prob {
        MorphOp::Dilate(k)
    } else {
        MorphOp::Identity
    };
    let out = match op {
        MorphOp::Identity => mask.clone(),
        MorphOp::Erode(k) => erode(mask, k)?,
        MorphOp::Dilate(k) => dilate(mask, k)?,
    };
    Ok((out, op))
}

/// Picks a uniformly random nonempty subset of instances as the target.
/// Returns the target union and the union of the remaining instances.
pub fn select_instances(instances: &[Tensor], rng: &mut impl Rng) -> Result<(Tensor, Tensor, Vec<usize>)> {
    let first = instances
        .first()
        .ok_or_else(|| Error::InvalidInput("no instances to select from".into()))?;
    if instances.len() > 30 {
        return Err(Error::InvalidInput("at most 30 instances are supported".into()));
    }
    for m in instances {
        check_binary(m, "instance mask")?;
        if m.shape() != first.shape() {
            return Err(Error::shape("instance masks", m.shape(), first.shape()));
        }
    }
    let subset: u32 = rng.random_range(1..(1u32 << instances.len()));
    let chosen: Vec<usize> = (0..instances.len()).filter(|i| subset >> i & 1 == 1).collect();
    let mut target = Tensor::zeros(first.shape());
    let mut rest = Tensor::zeros(first.shape());
    for (i, m) in instances.iter().enumerate() {
        let dst = if chosen.contains(&i) { &mut target } else { &mut rest };
        for (d, &v) in dst.data_mut().iter_mut().zip(m.data()) {
            *d = d.max(v);
        }
    }
    for (r, &t) in rest.data_mut().iter_mut().zip(target.data()) {
        if t > 0.0 {
            *r = 0.0;
        }
    }
    Ok((target, rest, chosen))
}

/// Strictly increasing frame indices with gaps in `1..=max_interval`.
pub fn sample_training_sequence(
    frame_count: usize,
    length: usize,
    max_interval: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if length == 0 || max_interval == 0 {
        return Err(Error::InvalidInput("length and max_interval must be ≥ 1".into()));
    }
    if frame_count < length {
        return Err(Error::InvalidInput(format!(
            "clip of {frame_count} frames is shorter than the {length}-frame window"
        )));
    }
    let cap = if length > 1 {
        max_interval.min((frame_count - 1) / (length - 1))
    } else {
        1
    };
    let gaps: Vec<usize> = (1..length).map(|_| rng.random_range(1..=cap)).collect();
    let span: usize = gaps.iter().sum();
    let start = rng.random_range(0..=frame_count - 1 - span);
    let mut idx = Vec::with_capacity(length);
    idx.push(start);
    for g in gaps {
        idx.push(idx.last().unwrap() + g);
    }
    Ok(idx)
}

/// Bilinear sample of a `C×H×W` image at `(x, y)` with edge clamping.
fn sample_bilinear(img: &Tensor, c: usize, x: f64, y: f64) -> f64 {
    let s = img.shape();
    let (h, w) = (s[1], s[2]);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let d = img.data();
    let at = |yy: usize, xx: usize| d[(c * h + yy) * w + xx];
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

/// Turns one image and its matte into a `length`-frame sequence by applying an
/// accumulating random affine motion about the image center.
pub fn motion_sequence(
    frame: &Tensor,
    alpha: &Tensor,
    length: usize,
    spec: &MotionSpec,
    rng: &mut impl Rng,
) -> Result<(VideoClip, AlphaSequence)> {
    if length == 0 {
        return Err(Error::InvalidInput("sequence length must be ≥ 1".into()));
    }
    let s = frame.shape().to_vec();
    if alpha.shape() != [1, s[1], s[2]] {
        return Err(Error::shape("motion sequence", alpha.shape(), &[1, s[1], s[2]]));
    }
    let (h, w) = (s[1], s[2]);
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut sym = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    let step = [sym(spec.max_translate), sym(spec.max_translate)];
    let scale = sym(spec.max_scale);
    let rot = sym(spec.max_rotate);
    let mut frames = Vec::with_capacity(length);
    let mut alphas = Vec::with_capacity(length);
    for t in 0..length {
        let tf = t as f64;
        let (sin, cos) = (tf * rot).sin_cos();
        let k = 1.0 + tf * scale;
        let warp = |img: &Tensor, ch: usize| {
            Tensor::from_fn(&[ch, h, w], |i| {
                let c = i / (h * w);
                let (y, x) = ((i / w) % h, i % w);
                // inverse map: output pixel → source location
                let (dx, dy) = (x as f64 - cx - tf * step[0], y as f64 - cy - tf * step[1]);
                let sx = (cos * dx + sin * dy) / k + cx;
                let sy = (-sin * dx + cos * dy) / k + cy;
                sample_bilinear(img, c, sx, sy)
            })
        };
        frames.push(warp(frame, 3));
        alphas.push(warp(alpha, 1));
    }
    Ok((VideoClip::from_frames(&frames, 0.0)?, AlphaSequence::from_frames(&alphas)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub train_matting: usize,
    pub train_segmentation: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 64,
            width: 64,
            frames: 24,
            train_matting: 4,
            train_segmentation: 4,
            val: 2,
            test: 2,
        }
    }
}

/// Seed of the `index`-th clip of a corpus.
pub fn clip_seed(corpus_seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(corpus_seed);
    rng.set_stream(index as u64 + 1);
    rng.random()
}

/// Renders a corpus under `root` and writes its manifest.
pub fn generate_corpus(cfg: &CorpusConfig, root: &Path) -> Result<DatasetManifest> {
    if cfg.frames == 0 {
        return Err(Error::config("corpus.frames", "must be ≥ 1"));
    }
    let mut plan = Vec::new();
    for _ in 0..cfg.train_matting {
        plan.push((Split::Train, DataKind::Matting));
    }
    for _ in 0..cfg.train_segmentation {
        plan.push((Split::Train, DataKind::Segmentation));
    }
    for _ in 0..cfg.val {
        plan.push((Split::Val, DataKind::Matting));
    }
    for _ in 0..cfg.test {
        plan.push((Split::Test, DataKind::Matting));
    }
    let clips = plan
        .par_iter()
        .enumerate()
        .map(|(i, &(split, kind))| {
            let seed = clip_seed(cfg.seed, i);
            let scene = SceneSpec::random(seed, cfg.height, cfg.width, cfg.frames);
            let r = render_clip(&scene, cfg.frames)?;
            let id = format!("{}_{:03}", split_name(split), i);
            let frames = format!("{id}/frames");
            write_frames(&root.join(&frames), &r.clip)?;
            let alpha = match kind {
                DataKind::Matting => {
                    let rel = format!("{id}/alpha");
                    write_alpha(&root.join(&rel), &r.alpha)?;
                    Some(rel)
                }
                DataKind::Segmentation => None,
            };
            let mask = format!("{id}/mask");
            write_masks(&root.join(&mask), &r.mask)?;
            Ok(ClipManifest {
                clip_id: id,
                split,
                data_kind: kind,
                frame_count: cfg.frames,
                height: cfg.height,
                width: cfg.width,
                streams: Streams {
                    frames,
                    alpha,
                    mask: Some(mask),
                },
                seed: Some(seed),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest::new(cfg.seed, clips);
    manifest.save(&crate::io::manifest_path(root))?;
    Ok(manifest)
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{make_region_partition, RegionThresholds};

    fn disk_scene(radius: f64, soft: f64, velocity: [f64; 2]) -> SceneSpec {
        SceneSpec {
            seed: 0,
            height: 64,
            width: 64,
            soft_edge: soft,
            targets: vec![Primitive {
                shape: Shape::Disk { radius },
                color: [0.9, 0.2, 0.1],
                center: [32.0, 32.0],
                velocity,
                scale_rate: 0.0,
                rotation_rate: 0.0,
            }],
            distractors: vec![],
            background: BackgroundSpec {
                color_a: [0.1, 0.3, 0.8],
                color_b: [0.7, 0.7, 0.2],
                frequency: [0.2, 0.1],
                phase: 0.3,
                pan_velocity: [0.0, 0.0],
            },
        }
    }

    #[test]
    fn hard_edges_are_binary() {
        let r = render_clip(&disk_scene(10.0, 0.0, [1.0, 0.0]), 3).unwrap();
        assert!(r.alpha.tensor().data().iter().all(|&a| a == 0.0 || a == 1.0));
        let p = make_region_partition(&r.alpha.frame(0), RegionThresholds::default()).unwrap();
        assert_eq!(p.boundary_count(), 0);
    }

    #[test]
    fn static_disk_repeats() {
        let r = render_clip(&disk_scene(10.0, 2.0, [0.0, 0.0]), 10).unwrap();
        for t in 1..10 {
            assert_eq!(r.alpha.frame(t), r.alpha.frame(0));
            assert_eq!(r.clip.frame(t), r.clip.frame(0));
        }
    }

    #[test]
    fn soft_annulus_area() {
        let r = render_clip(&disk_scene(8.0, 2.0, [0.0, 0.0]), 1).unwrap();
        let p = make_region_partition(&r.alpha.frame(0), RegionThresholds::default()).unwrap();
        let expected = 2.0 * std::f64::consts::PI * 8.0 * 2.0;
        let got = p.boundary_count() as f64;
        assert!((got - expected).abs() <= 0.3 * expected, "{got} vs {expected}");
    }

    #[test]
    fn composite_reconstructs_exactly() {
        for seed in 0..4 {
            let r = render_clip(&SceneSpec::random(seed, 32, 48, 5), 5).unwrap();
            let again = composite_layers(r.alpha.tensor(), &r.foreground, &r.background);
            assert_eq!(again.max_abs_diff(r.clip.tensor()), 0.0);
        }
    }

    #[test]
    fn rendering_is_reproducible() {
        let s = SceneSpec::random(11, 64, 64, 8);
        assert_eq!(s, SceneSpec::random(11, 64, 64, 8));
        assert_eq!(render_clip(&s, 8).unwrap(), render_clip(&s, 8).unwrap());
    }

    #[test]
    fn off_canvas_primitive_rejected() {
        let s = disk_scene(4.0, 1.0, [20.0, 0.0]);
        assert!(render_clip(&s, 5).is_err());
    }

    #[test]
    fn dilate_single_pixel_gives_block() {
        let mut m = Tensor::zeros(&[1, 9, 9]);
        m.data_mut()[40] = 1.0;
        let spec = MorphologySpec {
            erode_prob: 0.0,
            dilate_prob: 1.0,
            kernels: vec![5],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, op) = augment_given_mask(&m, &spec, &mut rng).unwrap();
        assert_eq!(op, MorphOp::Dilate(5));
        for y in 0..9 {
            for x in 0..9 {
                let inside = (2..=6).contains(&y) && (2..=6).contains(&x);
                assert_eq!(out.data()[y * 9 + x], if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn morphology_frequencies() {
        let m = Tensor::ones(&[1, 3, 3]);
        let spec = MorphologySpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 3];
        let n = 10_000;
        for _ in 0..n {
            let (_, op) = augment_given_mask(&m, &spec, &mut rng).unwrap();
            counts[match op {
                MorphOp::Erode(_) => 0,
                MorphOp::Dilate(_) => 1,
                MorphOp::Identity => 2,
            }] += 1;
        }
        for (c, p) in counts.iter().zip([0.4, 0.4, 0.2]) {
            assert!((*c as f64 / n as f64 - p).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn instance_selection() {
        let mut a = Tensor::zeros(&[1, 4, 4]);
        a.data_mut()[0] = 1.0;
        let mut b = Tensor::zeros(&[1, 4, 4]);
        b.data_mut()[15] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (t, rest, chosen) = select_instances(std::slice::from_ref(&a), &mut rng).unwrap();
        assert_eq!((t, rest.sum(), chosen), (a.clone(), 0.0, vec![0]));
        let mut seen = std::collections::HashSet::new();
        for _ in 0..1000 {
            let (t, rest, chosen) = select_instances(&[a.clone(), b.clone()], &mut rng).unwrap();
            assert!(t.data().iter().zip(rest.data()).all(|(x, y)| x * y == 0.0));
            seen.insert(chosen);
        }
        assert_eq!(seen.len(), 3);
        assert!(select_instances(&[], &mut rng).is_err());
    }

    #[test]
    fn sequence_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let idx = sample_training_sequence(24, 3, 1, &mut rng).unwrap();
        assert_eq!(idx[1] - idx[0], 1);
        assert_eq!(idx[2] - idx[1], 1);
        for _ in 0..1000 {
            let idx = sample_training_sequence(24, 8, 4, &mut rng).unwrap();
            assert!(idx.windows(2).all(|p| (1..=4).contains(&(p[1] - p[0]))));
            assert!(*idx.last().unwrap() < 24);
        }
        assert!(sample_training_sequence(5, 8, 2, &mut rng).is_err());
    }

    #[test]
    fn motion_sequence_starts_at_the_source() {
        let r = render_clip(&SceneSpec::random(3, 32, 32, 1), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (clip, alpha) =
            motion_sequence(&r.clip.frame(0), &r.alpha.frame(0), 4, &MotionSpec::default(), &mut rng).unwrap();
        assert_eq!(clip.len(), 4);
        assert!(clip.frame(0).max_abs_diff(&r.clip.frame(0)) < 1e-12);
        assert!(alpha.frame(0).max_abs_diff(&r.alpha.frame(0)) < 1e-12);
    }
}
