//! Matting metrics and benchmark reports.
//!
//! Reported scales: MAD, MSE, Grad and Conn ×10³; dtSSD ×10².

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use memprop_autograd::Tensor;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::io::{read_alpha, sequence_length, DatasetManifest};
use crate::types::{binarize_alpha, trimap_from_segmask, AlphaSequence, SegMaskSequence};

pub const GRAD_SIGMA: f64 = 1.4;
pub const CONN_STEP: f64 = 0.1;
const CONN_MIN_DIFF: f64 = 0.15;

fn check_pair(context: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(context, a.shape(), b.shape()));
    }
    if !a.all_finite() || !b.all_finite() {
        return Err(Error::InvalidInput(format!("{context}: non-finite values")));
    }
    Ok(())
}

/// Pairwise (cascade) summation; exact for power-of-two runs of a repeated value.
fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}

/// Mean absolute difference ×10³.
pub fn mad(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair("mad", pred, gt)?;
    let d: Vec<f64> = pred.data().iter().zip(gt.data()).map(|(a, b)| (a - b).abs()).collect();
    Ok(1e3 * (pairwise_sum(&d) / d.len() as f64))
}

/// Mean squared error ×10³.
pub fn mse(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair("mse", pred, gt)?;
    let d: Vec<f64> = pred.data().iter().zip(gt.data()).map(|(a, b)| (a - b).powi(2)).collect();
    Ok(1e3 * (pairwise_sum(&d) / d.len() as f64))
}

fn plane(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [h, w] | [1, h, w] => Ok((*h, *w)),
        s => Err(Error::InvalidInput(format!("expected a single H×W frame, got {s:?}"))),
    }
}

/// Derivative-of-Gaussian kernel along x, L2-normalized, `size×size` row-major.
pub fn gaussian_derivative_kernel(sigma: f64) -> (usize, Vec<f64>) {
    let eps: f64 = 1e-2;
    let half = (sigma * (-2.0 * ((2.0 * std::f64::consts::PI).sqrt() * sigma * eps).ln()).sqrt()).ceil() as usize;
    let size = 2 * half + 1;
    let gauss = |x: f64| (-x * x / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    let dgauss = |x: f64| -x * gauss(x) / (sigma * sigma);
    let mut k: Vec<f64> = (0..size * size)
        .map(|i| {
            let (r, c) = ((i / size) as f64 - half as f64, (i % size) as f64 - half as f64);
            gauss(r) * dgauss(c)
        })
        .collect();
    let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
    k.iter_mut().for_each(|v| *v /= norm);
    (size, k)
}

/// Gradient magnitude of a frame with replicate borders.
fn gradient_magnitude(d: &[f64], h: usize, w: usize, size: usize, k: &[f64]) -> Vec<f64> {
    let half = (size / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (mut gx, mut gy) = (0.0, 0.0);
            for r in 0..size as isize {
                for c in 0..size as isize {
                    let v = d[((y + r - half).clamp(0, h as isize - 1) as usize) * w
                        + (x + c - half).clamp(0, w as isize - 1) as usize];
                    gx += k[(r as usize) * size + c as usize] * v;
                    gy += k[(c as usize) * size + r as usize] * v;
                }
            }
            out[(y as usize) * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

fn masked_grad_sum(pred: &Tensor, gt: &Tensor, mask: Option<&Tensor>) -> Result<(f64, usize)> {
    check_pair("grad", pred, gt)?;
    let (h, w) = plane(pred)?;
    let (size, k) = gaussian_derivative_kernel(GRAD_SIGMA);
    let gp = gradient_magnitude(pred.data(), h, w, size, &k);
    let gg = gradient_magnitude(gt.data(), h, w, size, &k);
    let mut s = 0.0;
    let mut n = 0;
    for i in 0..h * w {
        if mask.is_none_or(|m| m.data()[i] > 0.5) {
            s += (gp[i] - gg[i]).powi(2);
            n += 1;
        }
    }
    Ok((s, n))
}

/// `Σ (‖∇G(M)‖ − ‖∇G(M^GT)‖)²` per pixel ×10³ on one frame.
pub fn grad_metric(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (s, n) = masked_grad_sum(pred, gt, None)?;
    Ok(1e3 * s / n as f64)
}

/// Largest 4-connected component of a binary map.
fn largest_component(on: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut label = vec![0usize; h * w];
    let mut best = (0usize, 0usize);
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !on[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(p) = queue.pop_front() {
            size += 1;
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if on[q] && label[q] == 0 {
                    label[q] = next;
                    queue.push_back(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    label.iter().map(|&l| best.0 != 0 && l == best.0).collect()
}

/// Per-pixel `|φ(M) − φ(M^GT)|` connectivity error map.
fn conn_error_map(pred: &Tensor, gt: &Tensor) -> Result<Vec<f64>> {
    check_pair("conn", pred, gt)?;
    let (h, w) = plane(pred)?;
    let (p, g) = (pred.data(), gt.data());
    let n = h * w;
    let mut level = vec![-1.0f64; n];
    let steps = (1.0 / CONN_STEP).round() as usize;
    for i in 1..steps {
        let theta = i as f64 * CONN_STEP;
        let on: Vec<bool> = (0..n).map(|q| p[q] >= theta && g[q] >= theta).collect();
        let omega = largest_component(&on, h, w);
        for q in 0..n {
            if level[q] == -1.0 && !omega[q] {
                level[q] = (i - 1) as f64 * CONN_STEP;
            }
        }
    }
    for l in &mut level {
        if *l == -1.0 {
            *l = 1.0;
        }
    }
    let phi = |a: f64, l: f64| {
        let d = a - l;
        if d >= CONN_MIN_DIFF {
            1.0 - d
        } else {
            1.0
        }
    };
    Ok((0..n).map(|q| (phi(p[q], level[q]) - phi(g[q], level[q])).abs()).collect())
}

/// Connectivity error per pixel ×10³ on one frame.
pub fn conn_metric(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let e = conn_error_map(pred, gt)?;
    Ok(1e3 * e.iter().sum::<f64>() / e.len() as f64)
}

fn frames_of(t: &Tensor) -> Result<Vec<Tensor>> {
    if t.rank() != 4 || t.shape()[1] != 1 {
        return Err(Error::InvalidInput(format!("expected T×1×H×W sequence, got {:?}", t.shape())));
    }
    Ok((0..t.shape()[0]).map(|i| t.index_axis0(i)).collect())
}

fn masked_dtssd(pred: &[Tensor], gt: &[Tensor], masks: Option<&[Tensor]>) -> Result<Option<f64>> {
    if pred.len() < 2 {
        return Err(Error::InvalidInput("dtSSD needs at least 2 frames".into()));
    }
    let mut total = 0.0;
    let mut pairs = 0;
    for t in 1..pred.len() {
        let (mut s, mut n) = (0.0, 0usize);
        for i in 0..pred[t].numel() {
            if let Some(m) = masks {
                if m[t].data()[i] < 0.5 || m[t - 1].data()[i] < 0.5 {
                    continue;
                }
            }
            let dp = pred[t].data()[i] - pred[t - 1].data()[i];
            let dg = gt[t].data()[i] - gt[t - 1].data()[i];
            s += (dp - dg).powi(2);
            n += 1;
        }
        if n > 0 {
            total += (s / n as f64).sqrt();
            pairs += 1;
        }
    }
    Ok((pairs > 0).then(|| 1e2 * total / pairs as f64))
}

/// Mean over frame pairs of the RMS derivative difference, ×10².
pub fn dtssd(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair("dtssd", pred, gt)?;
    let (p, g) = (frames_of(pred)?, frames_of(gt)?);
    Ok(masked_dtssd(&p, &g, None)?.expect("unmasked pairs are never empty"))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoreMetrics {
    pub mad: f64,
    pub mse: f64,
    /// `None` for single-frame sequences.
    pub dtssd: Option<f64>,
}

/// MAD, MSE and dtSSD restricted to the core of each frame's trimap.
///
/// dtSSD on a frame pair uses pixels that are core in both frames.
pub fn core_region_metrics(pred: &Tensor, seg: &Tensor, kernel: usize) -> Result<CoreMetrics> {
    check_pair("core metrics", pred, seg)?;
    let p = frames_of(pred)?;
    let s = frames_of(seg)?;
    let masks = s
        .iter()
        .map(|m| trimap_from_segmask(m, kernel).map(|part| part.core()))
        .collect::<Result<Vec<_>>>()?;
    let (mut abs, mut sq, mut n) = (0.0, 0.0, 0usize);
    for ((pf, sf), m) in p.iter().zip(&s).zip(&masks) {
        for i in 0..pf.numel() {
            if m.data()[i] > 0.5 {
                let d = pf.data()[i] - sf.data()[i];
                abs += d.abs();
                sq += d * d;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::DegenerateRegion(format!("kernel {kernel} leaves no core pixels")));
    }
    let dtssd = if p.len() >= 2 {
        masked_dtssd(&p, &s, Some(&masks))?
    } else {
        None
    };
    Ok(CoreMetrics {
        mad: 1e3 * abs / n as f64,
        mse: 1e3 * sq / n as f64,
        dtssd,
    })
}

/// Per-clip metric row.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipMetrics {
    pub mad: f64,
    pub mse: f64,
    pub grad: f64,
    pub conn: f64,
    pub dtssd: Option<f64>,
    pub core: CoreMetrics,
}

impl ClipMetrics {
    fn values(&self) -> [Option<f64>; 8] {
        [
            Some(self.mad),
            Some(self.mse),
            Some(self.grad),
            Some(self.conn),
            self.dtssd,
            Some(self.core.mad),
            Some(self.core.mse),
            self.core.dtssd,
        ]
    }
}

pub const REPORT_COLUMNS: [&str; 8] = [
    "mad", "mse", "grad", "conn", "dtssd", "core_mad", "core_mse", "core_dtssd",
];

/// Every metric for one predicted sequence against GT alpha and a segmentation mask.
pub fn clip_metrics(pred: &AlphaSequence, gt: &AlphaSequence, seg: &SegMaskSequence, kernel: usize) -> Result<ClipMetrics> {
    let (p, g) = (pred.tensor(), gt.tensor());
    check_pair("clip metrics", p, g)?;
    let t = pred.len();
    let pf = pred.frames();
    let gf = gt.frames();
    let mut grad = 0.0;
    let mut conn = 0.0;
    for (a, b) in pf.iter().zip(&gf) {
        grad += grad_metric(a, b)?;
        conn += conn_metric(a, b)?;
    }
    Ok(ClipMetrics {
        mad: mad(p, g)?,
        mse: mse(p, g)?,
        grad: grad / t as f64,
        conn: conn / t as f64,
        dtssd: if t >= 2 { Some(dtssd(p, g)?) } else { None },
        core: core_region_metrics(p, seg.tensor(), kernel)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub clip_id: String,
    pub result: std::result::Result<ClipMetrics, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkReport {
    pub rows: Vec<ReportRow>,
}

impl BenchmarkReport {
    pub fn all_ok(&self) -> bool {
        self.rows.iter().all(|r| r.result.is_ok())
    }

    /// Unweighted mean of each column over the successful rows that define it.
    pub fn aggregate(&self) -> [Option<f64>; 8] {
        std::array::from_fn(|c| {
            let vals: Vec<f64> = self
                .rows
                .iter()
                .filter_map(|r| r.result.as_ref().ok())
                .filter_map(|m| m.values()[c])
                .collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
    }

    /// CSV with one row per clip and a final `ALL` row; failing clips carry an `error` entry.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.9}")).unwrap_or_default();
        let mut out = String::from("clip_id,");
        out.push_str(&REPORT_COLUMNS.join(","));
        out.push_str(",error\n");
        for row in &self.rows {
            match &row.result {
                Ok(m) => {
                    let cells: Vec<String> = m.values().into_iter().map(fmt).collect();
                    let _ = writeln!(out, "{},{},", row.clip_id, cells.join(","));
                }
                Err(e) => {
                    let msg = e.replace(['\n', ','], " ");
                    let _ = writeln!(out, "{}{},{msg}", row.clip_id, ",".repeat(REPORT_COLUMNS.len()));
                }
            }
        }
        let agg: Vec<String> = self.aggregate().into_iter().map(fmt).collect();
        let _ = writeln!(out, "ALL,{},", agg.join(","));
        out
    }
}

/// Ground-truth alpha for a clip: the alpha stream, or the mask for segmentation clips.
fn clip_ground_truth(loaded: &crate::io::LoadedClip) -> Result<(AlphaSequence, SegMaskSequence)> {
    let alpha = match (&loaded.alpha, &loaded.mask) {
        (Some(a), _) => a.clone(),
        (None, Some(m)) => AlphaSequence::new(m.tensor().clone())?,
        (None, None) => return Err(Error::InvalidInput("clip has no ground truth".into())),
    };
    let seg = match &loaded.mask {
        Some(m) => m.clone(),
        None => {
            let frames = alpha
                .frames()
                .iter()
                .map(|f| binarize_alpha(f, 128))
                .collect::<Result<Vec<_>>>()?;
            SegMaskSequence::from_frames(&frames)?
        }
    };
    Ok((alpha, seg))
}

/// Directory holding predicted alpha for `clip_id` under a predictions root.
pub fn prediction_dir(root: &Path, clip_id: &str) -> std::path::PathBuf {
    root.join(clip_id).join("alpha")
}

fn evaluate_clip(
    data_root: &Path,
    clip: &crate::io::ClipManifest,
    predictions: &Path,
    kernel: usize,
) -> Result<ClipMetrics> {
    let loaded = clip.load(data_root)?;
    let (gt, seg) = clip_ground_truth(&loaded)?;
    let dir = prediction_dir(predictions, &clip.clip_id);
    let found = sequence_length(&dir)?;
    if found != clip.frame_count {
        return Err(Error::InvalidInput(format!(
            "{} predicted frames, expected {}",
            found, clip.frame_count
        )));
    }
    let pred = read_alpha(&dir, clip.frame_count)?;
    clip_metrics(&pred, &gt, &seg, kernel)
}

/// Evaluates every clip in the manifest (in manifest order).
pub fn benchmark_report(
    manifest: &DatasetManifest,
    data_root: &Path,
    predictions: &Path,
    core_kernel: usize,
) -> BenchmarkReport {
    let rows = manifest
        .clips
        .par_iter()
        .map(|clip| ReportRow {
            clip_id: clip.clip_id.clone(),
            result: evaluate_clip(data_root, clip, predictions, core_kernel).map_err(|e| e.to_string()),
        })
        .collect();
    BenchmarkReport { rows }
}
