//! Clips, mattes, masks and region partitions shared by every other module.
//!
//! Single frames are `1×H×W` (or `3×H×W` for RGB) tensors; sequences stack
//! frames along a leading time axis.

use memprop_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spatial stride between full-resolution frames and memory tokens.
pub const TOKEN_STRIDE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Matting,
    Segmentation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// RGB frames in `[0, 1]`, shape `T×3×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: Tensor,
    pub frame_rate: f64,
}

impl VideoClip {
    pub fn new(frames: Tensor, frame_rate: f64) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::InvalidInput(format!(
                "video clip must be T×3×H×W, got {s:?}"
            )));
        }
        if s[0] == 0 {
            return Err(Error::InvalidInput("video clip has no frames".into()));
        }
        if s[2] % TOKEN_STRIDE != 0 || s[3] % TOKEN_STRIDE != 0 {
            return Err(Error::InvalidInput(format!(
                "frame size {}×{} not divisible by {TOKEN_STRIDE}",
                s[2], s[3]
            )));
        }
        check_unit_range(&frames, "video clip")?;
        Ok(Self { frames, frame_rate })
    }

    pub fn from_frames(frames: &[Tensor], frame_rate: f64) -> Result<Self> {
        let stacked = Tensor::stack(frames)
            .map_err(|e| Error::InvalidInput(format!("cannot stack frames: {e}")))?;
        Self::new(stacked, frame_rate)
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    pub fn frame(&self, t: usize) -> Tensor {
        self.frames.index_axis0(t)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.frames
    }

    /// First `t` frames.
    pub fn truncated(&self, t: usize) -> Result<Self> {
        let frames: Vec<Tensor> = (0..t.min(self.len())).map(|i| self.frame(i)).collect();
        Self::from_frames(&frames, self.frame_rate)
    }
}

/// Alpha mattes in `[0, 1]`, shape `T×1×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaSequence {
    alpha: Tensor,
}

impl AlphaSequence {
    /// Builds a sequence, clamping values into `[0, 1]`. Non-finite values are rejected.
    pub fn new(alpha: Tensor) -> Result<Self> {
        let s = alpha.shape();
        if s.len() != 4 || s[1] != 1 || s[0] == 0 {
            return Err(Error::InvalidInput(format!(
                "alpha sequence must be T×1×H×W with T ≥ 1, got {s:?}"
            )));
        }
        if !alpha.all_finite() {
            return Err(Error::InvalidInput("alpha contains non-finite values".into()));
        }
        Ok(Self {
            alpha: alpha.map(|v| v.clamp(0.0, 1.0)),
        })
    }

    pub fn from_frames(frames: &[Tensor]) -> Result<Self> {
        let stacked = Tensor::stack(frames)
            .map_err(|e| Error::InvalidInput(format!("cannot stack mattes: {e}")))?;
        Self::new(stacked)
    }

    pub fn len(&self) -> usize {
        self.alpha.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame_shape(&self) -> [usize; 2] {
        [self.alpha.shape()[2], self.alpha.shape()[3]]
    }

    pub fn frame(&self, t: usize) -> Tensor {
        self.alpha.index_axis0(t)
    }

    pub fn frames(&self) -> Vec<Tensor> {
        (0..self.len()).map(|t| self.frame(t)).collect()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.alpha
    }

    pub fn matches_clip(&self, clip: &VideoClip) -> bool {
        self.len() == clip.len() && self.frame_shape() == [clip.height(), clip.width()]
    }
}

/// Binary masks, shape `T×1×H×W`, values exactly 0 or 1.
#[derive(Clone, Debug, PartialEq)]
pub struct SegMaskSequence {
    mask: Tensor,
}

impl SegMaskSequence {
    pub fn new(mask: Tensor) -> Result<Self> {
        let s = mask.shape();
        if s.len() != 4 || s[1] != 1 || s[0] == 0 {
            return Err(Error::InvalidInput(format!(
                "mask sequence must be T×1×H×W with T ≥ 1, got {s:?}"
            )));
        }
        check_binary(&mask, "segmentation mask")?;
        Ok(Self { mask })
    }

    pub fn from_frames(frames: &[Tensor]) -> Result<Self> {
        let stacked = Tensor::stack(frames)
            .map_err(|e| Error::InvalidInput(format!("cannot stack masks: {e}")))?;
        Self::new(stacked)
    }

    pub fn len(&self) -> usize {
        self.mask.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame(&self, t: usize) -> Tensor {
        self.mask.index_axis0(t)
    }

    pub fn frames(&self) -> Vec<Tensor> {
        (0..self.len()).map(|t| self.frame(t)).collect()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.mask
    }
}

/// Per-pixel split into core foreground, core background and boundary (each `1×H×W`).
#[derive(Clone, Debug, PartialEq)]
pub struct RegionPartition {
    pub core_fg: Tensor,
    pub core_bg: Tensor,
    pub boundary: Tensor,
}

impl RegionPartition {
    /// `core_fg ∪ core_bg` as a 0/1 mask.
    pub fn core(&self) -> Tensor {
        self.core_fg
            .zip_map(&self.core_bg, |a, b| a + b)
            .expect("partition masks share a shape")
    }

    pub fn core_count(&self) -> usize {
        self.core().data().iter().filter(|&&v| v > 0.5).count()
    }

    pub fn boundary_count(&self) -> usize {
        self.boundary.data().iter().filter(|&&v| v > 0.5).count()
    }

    /// Pairwise disjoint and jointly covering.
    pub fn is_valid(&self) -> bool {
        let (f, b, u) = (
            self.core_fg.data(),
            self.core_bg.data(),
            self.boundary.data(),
        );
        f.len() == b.len()
            && b.len() == u.len()
            && f.iter().zip(b).zip(u).all(|((&f, &b), &u)| {
                [f, b, u].iter().all(|&v| v == 0.0 || v == 1.0)
                    && f + b + u == 1.0
            })
    }
}

/// Alpha thresholds separating core from boundary pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionThresholds {
    pub fg: f64,
    pub bg: f64,
}

impl Default for RegionThresholds {
    fn default() -> Self {
        Self { fg: 0.99, bg: 0.01 }
    }
}

fn check_unit_range(t: &Tensor, what: &str) -> Result<()> {
    if let Some(v) = t
        .data()
        .iter()
        .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
    {
        return Err(Error::InvalidInput(format!("{what} value {v} outside [0, 1]")));
    }
    Ok(())
}

pub(crate) fn check_binary(t: &Tensor, what: &str) -> Result<()> {
    if let Some(v) = t.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidInput(format!("{what} is not binary (found {v})")));
    }
    Ok(())
}

/// `[H, W]` of a `1×H×W` (or `C×H×W`) frame.
pub(crate) fn frame_hw(t: &Tensor) -> Result<[usize; 2]> {
    match t.shape() {
        [_, h, w] => Ok([*h, *w]),
        s => Err(Error::InvalidInput(format!("expected C×H×W frame, got {s:?}"))),
    }
}

pub fn make_region_partition(alpha: &Tensor, thresholds: RegionThresholds) -> Result<RegionPartition> {
    let RegionThresholds { fg, bg } = thresholds;
    if !(0.0 <= bg && bg < fg && fg <= 1.0) {
        return Err(Error::config(
            "region_thresholds",
            format!("need 0 ≤ bg < fg ≤ 1, got bg={bg} fg={fg}"),
        ));
    }
    if !alpha.all_finite() {
        return Err(Error::InvalidInput("alpha contains non-finite values".into()));
    }
    let core_fg = alpha.map(|a| f64::from(u8::from(a >= fg)));
    let core_bg = alpha.map(|a| f64::from(u8::from(a <= bg)));
    let boundary = alpha.map(|a| f64::from(u8::from(a < fg && a > bg)));
    Ok(RegionPartition {
        core_fg,
        core_bg,
        boundary,
    })
}

#[derive(Clone, Copy)]
enum Morph {
    Erode,
    Dilate,
}

/// Square-window morphology on a `1×H×W` 0/1 mask; pixels outside the image are ignored.
fn morphology(mask: &Tensor, kernel: usize, op: Morph) -> Result<Tensor> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::config("kernel", format!("kernel must be odd and ≥ 1, got {kernel}")));
    }
    let [h, w] = frame_hw(mask)?;
    let r = kernel / 2;
    let src = mask.data();
    let reduce = |a: bool, b: bool| match op {
        Morph::Erode => a && b,
        Morph::Dilate => a || b,
    };
    let init = matches!(op, Morph::Erode);
    // separable: rows then columns
    let mut rows = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            rows[y * w + x] = (lo..=hi).fold(init, |acc, xx| reduce(acc, src[y * w + xx] > 0.5));
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            let v = (lo..=hi).fold(init, |acc, yy| reduce(acc, rows[yy * w + x]));
            out[y * w + x] = f64::from(u8::from(v));
        }
    }
    Ok(Tensor::new(&[1, h, w], out).expect("sized"))
}

pub fn erode(mask: &Tensor, kernel: usize) -> Result<Tensor> {
    morphology(mask, kernel, Morph::Erode)
}

pub fn dilate(mask: &Tensor, kernel: usize) -> Result<Tensor> {
    morphology(mask, kernel, Morph::Dilate)
}

/// Trimap from a binary mask: eroded mask is core foreground, outside the dilated
/// mask is core background, the band in between is boundary.
pub fn trimap_from_segmask(mask: &Tensor, kernel: usize) -> Result<RegionPartition> {
    check_binary(mask, "trimap source mask")?;
    let eroded = erode(mask, kernel)?;
    let dilated = dilate(mask, kernel)?;
    let core_bg = dilated.map(|v| 1.0 - v);
    let boundary = dilated.zip_map(&eroded, |d, e| d - e).expect("same shape");
    Ok(RegionPartition {
        core_fg: eroded,
        core_bg,
        boundary,
    })
}

/// `alpha·255 ≥ threshold` as a 0/1 mask. Equality counts as foreground.
pub fn binarize_alpha(alpha: &Tensor, threshold_255: u32) -> Result<Tensor> {
    if threshold_255 > 255 {
        return Err(Error::config(
            "threshold",
            format!("threshold must be in [0, 255], got {threshold_255}"),
        ));
    }
    if !alpha.all_finite() {
        return Err(Error::InvalidInput("alpha contains non-finite values".into()));
    }
    let t = f64::from(threshold_255);
    Ok(alpha.map(|a| f64::from(u8::from(a * 255.0 >= t))))
}

/// Mean over non-overlapping `factor×factor` blocks of a `C×H×W` tensor.
pub fn area_downsample(t: &Tensor, factor: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 3 || s[1] % factor != 0 || s[2] % factor != 0 {
        return Err(Error::InvalidInput(format!(
            "cannot area-downsample {s:?} by {factor}"
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (ho, wo) = (h / factor, w / factor);
    let mut out = vec![0.0; c * ho * wo];
    let d = t.data();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * ho + y / factor) * wo + x / factor] += d[(ch * h + y) * w + x];
            }
        }
    }
    let norm = (factor * factor) as f64;
    out.iter_mut().for_each(|v| *v /= norm);
    Ok(Tensor::new(&[c, ho, wo], out).expect("sized"))
}
