//! Brute-force reference implementations used by several test targets.
#![allow(dead_code)]

use memprop_autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random::<f64>())
}

pub fn random_binary(shape: &[usize], seed: u64, p: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| if rng.random_bool(p) { 1.0 } else { 0.0 })
}

/// Filled rectangle `[y0, y1) × [x0, x1)` on a `1×h×w` canvas.
pub fn rect_mask(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Tensor {
    Tensor::from_fn(&[1, h, w], |i| {
        let (y, x) = (i / w, i % w);
        if (y0..y1).contains(&y) && (x0..x1).contains(&x) {
            1.0
        } else {
            0.0
        }
    })
}

pub fn mad_oracle(p: &[f64], g: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        s += (p[i] - g[i]).abs();
    }
    s / p.len() as f64 * 1000.0
}

pub fn mse_oracle(p: &[f64], g: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        s += (p[i] - g[i]) * (p[i] - g[i]);
    }
    s / p.len() as f64 * 1000.0
}

/// Gradient magnitudes with an explicitly padded image and a separable 9×9 kernel.
fn grad_magnitude_oracle(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let sigma = 1.4f64;
    let half = 4usize;
    let n = 2 * half + 1;
    let mut g1 = vec![0.0; n];
    let mut d1 = vec![0.0; n];
    for i in 0..n {
        let x = i as f64 - half as f64;
        g1[i] = (-(x * x) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
        d1[i] = -x * g1[i] / (sigma * sigma);
    }
    let norm = g1.iter().map(|v| v * v).sum::<f64>().sqrt() * d1.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (hp, wp) = (h + 2 * half, w + 2 * half);
    let mut padded = vec![0.0; hp * wp];
    for y in 0..hp {
        for x in 0..wp {
            let sy = (y as i64 - half as i64).clamp(0, h as i64 - 1) as usize;
            let sx = (x as i64 - half as i64).clamp(0, w as i64 - 1) as usize;
            padded[y * wp + x] = img[sy * w + sx];
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut gx = 0.0;
            let mut gy = 0.0;
            for r in 0..n {
                for c in 0..n {
                    let v = padded[(y + r) * wp + (x + c)];
                    gx += g1[r] * d1[c] * v;
                    gy += d1[r] * g1[c] * v;
                }
            }
            gx /= norm;
            gy /= norm;
            out[y * w + x] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

pub fn grad_oracle(p: &[f64], g: &[f64], h: usize, w: usize) -> f64 {
    let a = grad_magnitude_oracle(p, h, w);
    let b = grad_magnitude_oracle(g, h, w);
    let mut s = 0.0;
    for i in 0..h * w {
        s += (a[i] - b[i]).powi(2);
    }
    s / (h * w) as f64 * 1000.0
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Largest 4-connected component via union-find.
fn largest_component_oracle(on: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut parent: Vec<usize> = (0..h * w).collect();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !on[i] {
                continue;
            }
            for j in [if x + 1 < w { Some(i + 1) } else { None }, if y + 1 < h { Some(i + w) } else { None }]
                .into_iter()
                .flatten()
            {
                if on[j] {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
    }
    let mut size = vec![0usize; h * w];
    for i in 0..h * w {
        if on[i] {
            let r = find(&mut parent, i);
            size[r] += 1;
        }
    }
    // first root in scan order among the largest wins, like a scan-order flood fill
    let mut best_root = None;
    let mut best = 0;
    for i in 0..h * w {
        if on[i] {
            let r = find(&mut parent, i);
            if size[r] > best {
                best = size[r];
                best_root = Some(r);
            }
        }
    }
    (0..h * w)
        .map(|i| on[i] && Some(find(&mut parent, i)) == best_root)
        .collect()
}

pub fn conn_oracle(p: &[f64], g: &[f64], h: usize, w: usize) -> f64 {
    let n = h * w;
    let mut level = vec![None; n];
    for i in 1..=9 {
        let theta = i as f64 * 0.1;
        let on: Vec<bool> = (0..n).map(|q| p[q] >= theta && g[q] >= theta).collect();
        let omega = largest_component_oracle(&on, h, w);
        for q in 0..n {
            if level[q].is_none() && !omega[q] {
                level[q] = Some((i - 1) as f64 * 0.1);
            }
        }
    }
    let mut s = 0.0;
    for q in 0..n {
        let l = level[q].unwrap_or(1.0);
        let phi = |a: f64| if a - l >= 0.15 { 1.0 - (a - l) } else { 1.0 };
        s += (phi(p[q]) - phi(g[q])).abs();
    }
    s / n as f64 * 1000.0
}

/// `frames` are flattened H×W planes.
pub fn dtssd_oracle(p: &[Vec<f64>], g: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for t in 1..p.len() {
        let mut s = 0.0;
        for i in 0..p[t].len() {
            let d = (p[t][i] - p[t - 1][i]) - (g[t][i] - g[t - 1][i]);
            s += d * d;
        }
        total += (s / p[t].len() as f64).sqrt();
    }
    total / (p.len() - 1) as f64 * 100.0
}

/// Core pixels: every in-bounds pixel of the `k×k` window carries the same mask value.
pub fn core_oracle(mask: &[f64], h: usize, w: usize, k: usize) -> Vec<bool> {
    let r = (k / 2) as i64;
    let mut out = vec![false; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let v = mask[(y as usize) * w + x as usize];
            let mut uniform = true;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy >= 0 && xx >= 0 && yy < h as i64 && xx < w as i64 && mask[(yy as usize) * w + xx as usize] != v {
                        uniform = false;
                    }
                }
            }
            out[(y as usize) * w + x as usize] = uniform;
        }
    }
    out
}

/// (MAD, MSE, dtSSD) over core pixels, pooled across frames; dtSSD pairs use pixels core in both frames.
pub fn core_metrics_oracle(p: &[Vec<f64>], seg: &[Vec<f64>], h: usize, w: usize, k: usize) -> (f64, f64, f64) {
    let cores: Vec<Vec<bool>> = seg.iter().map(|s| core_oracle(s, h, w, k)).collect();
    let (mut a, mut q, mut n) = (0.0, 0.0, 0usize);
    for t in 0..p.len() {
        for i in 0..h * w {
            if cores[t][i] {
                a += (p[t][i] - seg[t][i]).abs();
                q += (p[t][i] - seg[t][i]).powi(2);
                n += 1;
            }
        }
    }
    let mut total = 0.0;
    let mut pairs = 0;
    for t in 1..p.len() {
        let (mut s, mut m) = (0.0, 0usize);
        for i in 0..h * w {
            if cores[t][i] && cores[t - 1][i] {
                let d = (p[t][i] - p[t - 1][i]) - (seg[t][i] - seg[t - 1][i]);
                s += d * d;
                m += 1;
            }
        }
        if m > 0 {
            total += (s / m as f64).sqrt();
            pairs += 1;
        }
    }
    (a / n as f64 * 1000.0, q / n as f64 * 1000.0, total / pairs as f64 * 100.0)
}

/// Change map by exhaustive scan: a token fires when any pixel of its 16×16 block changed.
pub fn change_mask_oracle(prev: &[f64], cur: &[f64], h: usize, w: usize, delta: f64, strict: bool) -> Vec<f64> {
    let (th, tw) = (h / 16, w / 16);
    let mut out = vec![0.0; th * tw];
    for ty in 0..th {
        for tx in 0..tw {
            let mut fired = false;
            for y in ty * 16..ty * 16 + 16 {
                for x in tx * 16..tx * 16 + 16 {
                    let d = (prev[y * w + x] - cur[y * w + x]).abs();
                    fired |= if strict { d > delta } else { d >= delta };
                }
            }
            out[ty * tw + tx] = if fired { 1.0 } else { 0.0 };
        }
    }
    out
}
