//! Training objectives, built on the autograd tape.
//!
//! Each loss has a `*_var` form taking the prediction as a tape variable (used
//! by training and by gradient checks) and a plain form returning an `f64`.

use std::rc::Rc;

use log::warn;
use memprop_autograd::{Conv2dSpec, Graph, Tensor, Var, GATHER_ZERO};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{check_binary, frame_hw, RegionPartition};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_lap: f64,
    pub w_tc: f64,
    pub w_boundary: f64,
    pub w_core: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_lap: 5.0,
            w_tc: 1.0,
            w_boundary: 1.5,
            w_core: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("w_lap", self.w_lap),
            ("w_tc", self.w_tc),
            ("w_boundary", self.w_boundary),
            ("w_core", self.w_core),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("loss_weights.{name}"), "must be ≥ 0"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DdcConfig {
    /// Odd side length of the square neighbor window.
    pub window: usize,
    /// Color-nearest neighbors per band pixel.
    pub neighbors: usize,
    /// Pixels averaged for the foreground / background estimates.
    pub fb_topk: usize,
    /// RGB weights reducing color to a single intensity.
    pub luminance: [f64; 3],
    /// Lower bound on the estimated `|F − B|`.
    pub fb_floor: f64,
}

impl Default for DdcConfig {
    fn default() -> Self {
        Self {
            window: 11,
            neighbors: 5,
            fb_topk: 5,
            luminance: [0.299, 0.587, 0.114],
            fb_floor: 1e-3,
        }
    }
}

impl DdcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window % 2 == 0 || self.window < 3 {
            return Err(Error::config("ddc.window", "must be odd and ≥ 3"));
        }
        let area = self.window * self.window;
        if self.neighbors == 0 || self.neighbors >= area - 1 {
            return Err(Error::config("ddc.neighbors", format!("must be in 1..{}", area - 1)));
        }
        if self.fb_topk == 0 || self.fb_topk > area {
            return Err(Error::config("ddc.fb_topk", format!("must be in 1..={area}")));
        }
        if self.luminance.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::config("ddc.luminance", "weights must be ≥ 0"));
        }
        if !(self.fb_floor > 0.0 && self.fb_floor.is_finite()) {
            return Err(Error::config("ddc.fb_floor", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DdcVariant {
    /// Alpha differences compared directly to color differences.
    Original,
    /// Alpha differences multiplied by the local `|F − B|` estimate.
    Scaled,
}

fn check_same(context: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(context, a, b));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1_var(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    check_same("l1 loss", g.shape(pred), target.shape())?;
    let t = g.constant(target.clone());
    let d = g.sub(pred, t);
    let a = g.abs(d);
    Ok(g.mean(a))
}

pub const LAPLACIAN_LEVELS: usize = 5;

/// Per-level weights `2^{s−1}/5`.
pub fn laplacian_level_weights() -> [f64; LAPLACIAN_LEVELS] {
    std::array::from_fn(|s| (1u32 << s) as f64 / LAPLACIAN_LEVELS as f64)
}

/// Normalized 5×5 binomial kernel, `[1,4,6,4,1]ᵀ[1,4,6,4,1]/256`.
pub fn gaussian_kernel_5() -> [[f64; 5]; 5] {
    const K: [f64; 5] = [1.0, 4.0, 6.0, 4.0, 1.0];
    std::array::from_fn(|y| std::array::from_fn(|x| K[y] * K[x] / 256.0))
}

fn replicate_pad_indices(h: usize, w: usize, pad: usize) -> Rc<Vec<u32>> {
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut idx = Vec::with_capacity(hp * wp);
    for y in 0..hp {
        let sy = (y as isize - pad as isize).clamp(0, h as isize - 1) as usize;
        for x in 0..wp {
            let sx = (x as isize - pad as isize).clamp(0, w as isize - 1) as usize;
            idx.push((sy * w + sx) as u32);
        }
    }
    Rc::new(idx)
}

fn blur_var(g: &mut Graph, x: Var, gain: f64) -> Var {
    let s = g.shape(x).to_vec();
    let (h, w) = (s[1], s[2]);
    let padded = g.gather(x, replicate_pad_indices(h, w, 2), &[1, h + 4, w + 4]);
    let k = gaussian_kernel_5();
    let kernel = Tensor::from_fn(&[1, 1, 5, 5], |i| gain * k[i / 5][i % 5]);
    let kv = g.constant(kernel);
    g.conv2d(padded, kv, None, Conv2dSpec { stride: 1, pad: 0 })
}

fn downsample2_var(g: &mut Graph, x: Var) -> Var {
    let s = g.shape(x).to_vec();
    let (h, w) = (s[1], s[2]);
    let idx: Vec<u32> = (0..h / 2)
        .flat_map(|y| (0..w / 2).map(move |x| (2 * y * w + 2 * x) as u32))
        .collect();
    g.gather(x, Rc::new(idx), &[1, h / 2, w / 2])
}

fn zero_insert_up2_var(g: &mut Graph, x: Var) -> Var {
    let s = g.shape(x).to_vec();
    let (h, w) = (s[1], s[2]);
    let mut idx = Vec::with_capacity(4 * h * w);
    for y in 0..2 * h {
        for x in 0..2 * w {
            idx.push(if y % 2 == 0 && x % 2 == 0 {
                ((y / 2) * w + x / 2) as u32
            } else {
                GATHER_ZERO
            });
        }
    }
    g.gather(x, Rc::new(idx), &[1, 2 * h, 2 * w])
}

/// Laplacian pyramid levels of a `1×H×W` map, finest first.
pub fn laplacian_pyramid_var(g: &mut Graph, x: Var) -> Result<Vec<Var>> {
    let s = g.shape(x).to_vec();
    let step = 1 << LAPLACIAN_LEVELS;
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::InvalidInput(format!("laplacian pyramid expects 1×H×W, got {s:?}")));
    }
    if s[1] == 0 || s[2] == 0 || s[1] % step != 0 || s[2] % step != 0 {
        return Err(Error::InvalidInput(format!(
            "laplacian pyramid needs H and W to be positive multiples of {step}, got {}×{}",
            s[1], s[2]
        )));
    }
    let mut levels = Vec::with_capacity(LAPLACIAN_LEVELS);
    let mut current = x;
    for _ in 0..LAPLACIAN_LEVELS {
        let blurred = blur_var(g, current, 1.0);
        let down = downsample2_var(g, blurred);
        let up = zero_insert_up2_var(g, down);
        let up = blur_var(g, up, 4.0);
        levels.push(g.sub(current, up));
        current = down;
    }
    Ok(levels)
}

/// `Σ_s 2^{s−1}/5 · mean|L^s(pred) − L^s(target)|`, averaged over leading channels.
pub fn laplacian_var(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    check_same("laplacian loss", g.shape(pred), target.shape())?;
    let channels = g.shape(pred)[0];
    let t = g.constant(target.clone());
    let diff = g.sub(pred, t);
    let weights = laplacian_level_weights();
    let mut terms = Vec::new();
    for c in 0..channels {
        let ch = g.slice(diff, c, 1);
        for (level, wgt) in laplacian_pyramid_var(g, ch)?.into_iter().zip(weights) {
            let a = g.abs(level);
            let m = g.mean(a);
            terms.push(g.scale(m, wgt / channels as f64));
        }
    }
    Ok(sum_vars(g, &terms))
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Var {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v);
    }
    acc
}

/// Mean over frame pairs and pixels of `(ΔM_t − ΔM^GT_t)²`.
pub fn temporal_coherence_var(g: &mut Graph, pred: &[Var], target: &[Tensor]) -> Result<Var> {
    if pred.len() < 2 {
        return Err(Error::InvalidInput("temporal coherence needs at least 2 frames".into()));
    }
    if pred.len() != target.len() {
        return Err(Error::InvalidInput(format!(
            "{} predicted frames vs {} target frames",
            pred.len(),
            target.len()
        )));
    }
    let mut terms = Vec::with_capacity(pred.len() - 1);
    for t in 1..pred.len() {
        check_same("temporal coherence", g.shape(pred[t]), target[t].shape())?;
        let dp = g.sub(pred[t], pred[t - 1]);
        let dg = target[t].zip_map(&target[t - 1], |a, b| a - b).map_err(|_| {
            Error::shape("temporal coherence", target[t].shape(), target[t - 1].shape())
        })?;
        let dgv = g.constant(dg);
        let e = g.sub(dp, dgv);
        let sq = g.square(e);
        terms.push(g.mean(sq));
    }
    let total = sum_vars(g, &terms);
    Ok(g.scale(total, 1.0 / terms.len() as f64))
}

/// Mean binary cross-entropy on logits.
pub fn bce_var(g: &mut Graph, logits: Var, target: &Tensor) -> Result<Var> {
    check_same("binary cross-entropy", g.shape(logits), target.shape())?;
    let b = g.bce_with_logits(logits, target);
    Ok(g.mean(b))
}

/// `1 − (2Σ p·s + 1) / (Σ p + Σ s + 1)` with `p = σ(logits)`.
pub fn dice_var(g: &mut Graph, logits: Var, target: &Tensor) -> Result<Var> {
    check_same("dice loss", g.shape(logits), target.shape())?;
    let p = g.sigmoid(logits);
    let s = g.constant(target.clone());
    let inter = g.mul(p, s);
    let inter = g.sum(inter);
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, 1.0);
    let ps = g.sum(p);
    let den = g.add_scalar(ps, target.sum() + 1.0);
    let ratio = g.div(num, den);
    Ok(g.rsub_scalar(1.0, ratio))
}

/// Cross-entropy plus Dice against a binary mask.
pub fn segmentation_var(g: &mut Graph, logits: Var, target: &Tensor) -> Result<Var> {
    check_binary(target, "segmentation target")?;
    let ce = bce_var(g, logits, target)?;
    let dice = dice_var(g, logits, target)?;
    Ok(g.add(ce, dice))
}

/// Binary cross-entropy of change logits against the ground-truth change map.
pub fn change_mask_var(g: &mut Graph, logits: Var, target: &Tensor) -> Result<Var> {
    check_binary(target, "change mask target")?;
    bce_var(g, logits, target)
}

/// Precomputed neighbor pairs and constants for a DDC loss on one frame.
///
/// Everything here depends only on the image, so the loss is a function of
/// alpha alone.
#[derive(Clone, Debug, PartialEq)]
pub struct DdcPlan {
    shape: [usize; 3],
    band_pixels: usize,
    left: Rc<Vec<u32>>,
    right: Rc<Vec<u32>>,
    scale: Tensor,
    distance: Tensor,
}

/// Value of a DDC loss, with a flag for an empty boundary band.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DdcValue {
    pub value: f64,
    pub empty_band: bool,
}

impl DdcPlan {
    /// `image` is `3×H×W`, `band` a binary `1×H×W` mask.
    pub fn new(image: &Tensor, band: &Tensor, cfg: &DdcConfig, variant: DdcVariant) -> Result<Self> {
        cfg.validate()?;
        let [h, w] = frame_hw(band)?;
        if band.shape()[0] != 1 {
            return Err(Error::shape("ddc band", band.shape(), &[1, h, w]));
        }
        check_binary(band, "ddc band")?;
        if image.shape() != [3, h, w] {
            return Err(Error::shape("ddc image", image.shape(), &[3, h, w]));
        }
        if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("ddc image outside [0, 1]".into()));
        }
        let n = h * w;
        let rgb = image.data();
        let [wr, wg, wb] = cfg.luminance;
        let lum: Vec<f64> = (0..n)
            .map(|p| wr * rgb[p] + wg * rgb[n + p] + wb * rgb[2 * n + p])
            .collect();
        let color_dist2 = |a: usize, b: usize| {
            (0..3)
                .map(|c| {
                    let d = rgb[c * n + a] - rgb[c * n + b];
                    d * d
                })
                .sum::<f64>()
        };
        let r = (cfg.window / 2) as isize;
        let mut left = Vec::new();
        let mut right = Vec::new();
        let mut scale = Vec::new();
        let mut distance = Vec::new();
        let mut band_pixels = 0;
        let mut window = Vec::with_capacity(cfg.window * cfg.window);
        for y in 0..h as isize {
            for x in 0..w as isize {
                let i = (y as usize) * w + x as usize;
                if band.data()[i] < 0.5 {
                    continue;
                }
                band_pixels += 1;
                window.clear();
                for yy in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                    for xx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                        window.push((yy as usize) * w + xx as usize);
                    }
                }
                let s = match variant {
                    DdcVariant::Original => 1.0,
                    DdcVariant::Scaled => {
                        let mut lums: Vec<f64> = window.iter().map(|&p| lum[p]).collect();
                        lums.sort_by(f64::total_cmp);
                        let k = cfg.fb_topk.min(lums.len());
                        let bg: f64 = lums[..k].iter().sum::<f64>() / k as f64;
                        let fg: f64 = lums[lums.len() - k..].iter().sum::<f64>() / k as f64;
                        (fg - bg).abs().max(cfg.fb_floor)
                    }
                };
                let mut cands: Vec<(f64, usize)> = window
                    .iter()
                    .filter(|&&p| p != i)
                    .map(|&p| (color_dist2(i, p), p))
                    .collect();
                cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                for &(_, j) in cands.iter().take(cfg.neighbors) {
                    left.push(i as u32);
                    right.push(j as u32);
                    scale.push(s);
                    distance.push((lum[i] - lum[j]).abs());
                }
            }
        }
        let m = left.len();
        Ok(Self {
            shape: [1, h, w],
            band_pixels,
            left: Rc::new(left),
            right: Rc::new(right),
            scale: Tensor::new(&[m], scale).expect("length matches"),
            distance: Tensor::new(&[m], distance).expect("length matches"),
        })
    }

    pub fn band_pixels(&self) -> usize {
        self.band_pixels
    }

    pub fn is_empty(&self) -> bool {
        self.band_pixels == 0
    }

    /// Neighbor pairs `(i, j)` as flat pixel indices.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.left
            .iter()
            .zip(self.right.iter())
            .map(|(&i, &j)| (i as usize, j as usize))
    }

    /// Per-pair `|F − B|` factor (1 for the original loss).
    pub fn scales(&self) -> &[f64] {
        self.scale.data()
    }

    /// Per-pair intensity distance.
    pub fn distances(&self) -> &[f64] {
        self.distance.data()
    }

    /// `1/N Σ_i Σ_j | |α_i − α_j|·s_i − d_ij |`; a constant 0 for an empty band.
    pub fn loss_var(&self, g: &mut Graph, alpha: Var) -> Result<Var> {
        check_same("ddc alpha", g.shape(alpha), &self.shape)?;
        if self.is_empty() {
            return Ok(g.constant(Tensor::scalar(0.0)));
        }
        let m = self.left.len();
        let ai = g.gather(alpha, self.left.clone(), &[m]);
        let aj = g.gather(alpha, self.right.clone(), &[m]);
        let da = g.sub(ai, aj);
        let da = g.abs(da);
        let s = g.constant(self.scale.clone());
        let scaled = g.mul(da, s);
        let d = g.constant(self.distance.clone());
        let e = g.sub(scaled, d);
        let e = g.abs(e);
        let total = g.sum(e);
        Ok(g.scale(total, 1.0 / self.band_pixels as f64))
    }
}

/// Core-supervision terms for one frame.
#[derive(Clone, Copy, Debug)]
pub struct CoreSupervisionVars {
    pub core: Var,
    pub boundary: Var,
    pub total: Var,
}

/// `w_core · L1(core) + w_boundary · scaled DDC(boundary)` for a matte against a segmentation mask.
pub fn core_supervision_var(
    g: &mut Graph,
    alpha: Var,
    seg: &Tensor,
    image: &Tensor,
    partition: &RegionPartition,
    ddc: &DdcConfig,
    weights: &LossWeights,
) -> Result<CoreSupervisionVars> {
    check_binary(seg, "core supervision mask")?;
    check_same("core supervision", g.shape(alpha), seg.shape())?;
    check_same("core supervision partition", partition.boundary.shape(), seg.shape())?;
    if !partition.is_valid() {
        return Err(Error::InvalidInput("region partition is not a partition".into()));
    }
    let count = partition.core_count();
    if count == 0 {
        return Err(Error::DegenerateRegion("no core pixels".into()));
    }
    let t = g.constant(seg.clone());
    let d = g.sub(alpha, t);
    let a = g.abs(d);
    let mask = g.constant(partition.core());
    let masked = g.mul(a, mask);
    let s = g.sum(masked);
    let core = g.scale(s, 1.0 / count as f64);
    let plan = DdcPlan::new(image, &partition.boundary, ddc, DdcVariant::Scaled)?;
    let boundary = plan.loss_var(g, alpha)?;
    let wc = g.scale(core, weights.w_core);
    let wb = g.scale(boundary, weights.w_boundary);
    let total = g.add(wc, wb);
    Ok(CoreSupervisionVars {
        core,
        boundary,
        total,
    })
}

fn eval_scalar(pred: &Tensor, f: impl FnOnce(&mut Graph, Var) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let out = f(&mut g, p)?;
    Ok(g.value(out).item())
}

pub fn loss_l1(pred: &Tensor, target: &Tensor) -> Result<f64> {
    eval_scalar(pred, |g, p| l1_var(g, p, target))
}

pub fn loss_laplacian_pyramid(pred: &Tensor, target: &Tensor) -> Result<f64> {
    eval_scalar(pred, |g, p| laplacian_var(g, p, target))
}

/// Sequences are `T×1×H×W` (or any `T×…`) tensors.
pub fn loss_temporal_coherence(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_same("temporal coherence", pred.shape(), target.shape())?;
    let t = pred.shape().first().copied().unwrap_or(0);
    let mut g = Graph::new();
    let frames: Vec<Var> = (0..t).map(|i| g.constant(pred.index_axis0(i))).collect();
    let targets: Vec<Tensor> = (0..t).map(|i| target.index_axis0(i)).collect();
    let out = temporal_coherence_var(&mut g, &frames, &targets)?;
    Ok(g.value(out).item())
}

pub fn loss_segmentation(logits: &Tensor, target: &Tensor) -> Result<f64> {
    eval_scalar(logits, |g, p| segmentation_var(g, p, target))
}

pub fn loss_change_mask(logits: &Tensor, target: &Tensor) -> Result<f64> {
    eval_scalar(logits, |g, p| change_mask_var(g, p, target))
}

fn ddc_value(alpha: &Tensor, image: &Tensor, band: &Tensor, cfg: &DdcConfig, variant: DdcVariant) -> Result<DdcValue> {
    let plan = DdcPlan::new(image, band, cfg, variant)?;
    if plan.is_empty() {
        warn!("ddc loss evaluated on an empty boundary band");
    }
    let value = eval_scalar(alpha, |g, a| plan.loss_var(g, a))?;
    Ok(DdcValue {
        value,
        empty_band: plan.is_empty(),
    })
}

pub fn loss_ddc_original(alpha: &Tensor, image: &Tensor, band: &Tensor, cfg: &DdcConfig) -> Result<DdcValue> {
    ddc_value(alpha, image, band, cfg, DdcVariant::Original)
}

pub fn loss_ddc_scaled(alpha: &Tensor, image: &Tensor, band: &Tensor, cfg: &DdcConfig) -> Result<DdcValue> {
    ddc_value(alpha, image, band, cfg, DdcVariant::Scaled)
}

/// Returns `(total, core, boundary)`.
pub fn loss_core_supervision(
    alpha: &Tensor,
    seg: &Tensor,
    image: &Tensor,
    partition: &RegionPartition,
    ddc: &DdcConfig,
    weights: &LossWeights,
) -> Result<(f64, f64, f64)> {
    let mut g = Graph::new();
    let a = g.constant(alpha.clone());
    let cs = core_supervision_var(&mut g, a, seg, image, partition, ddc, weights)?;
    Ok((
        g.value(cs.total).item(),
        g.value(cs.core).item(),
        g.value(cs.boundary).item(),
    ))
}
