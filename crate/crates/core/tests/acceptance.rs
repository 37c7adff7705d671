//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the report lines are never captured.
//! Set `MEMPROP_ACCEPTANCE_QUICK=1` to skip the training-based criteria (7, 8, 9, 11).

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::*;
use memprop_autograd::gradcheck::{max_relative_error, numerical_grad};
use memprop_autograd::{Graph, Tensor, Var};
use memprop_matte::evaluation::{clip_metrics, conn_metric, core_region_metrics, dtssd, grad_metric, mad, mse};
use memprop_matte::inference::{propagate, warmup_trajectory, InferenceConfig, PropagateOptions};
use memprop_matte::losses::{
    bce_var, change_mask_var, core_supervision_var, dice_var, l1_var, laplacian_var, loss_ddc_original,
    loss_ddc_scaled, temporal_coherence_var, DdcConfig, DdcPlan, DdcVariant, LossWeights,
};
use memprop_matte::memory::{compute_affinity, fuse_memory, ground_truth_change_mask, ChangeProbabilityMap};
use memprop_matte::network::{MattingModel, ModelConfig};
use memprop_matte::synthdata::{clip_seed, generate_corpus, render_clip, CorpusConfig, SceneSpec};
use memprop_matte::training::{
    route_batch, run_stage, sequence_loss, LossSet, Sample, StageConfig, TrainConfig, TrainState, TrainingData,
};
use memprop_matte::types::{trimap_from_segmask, DataKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- 1

fn fusion_endpoints() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for trial in 0..200 {
        let n = rng.random_range(1..40);
        let c = rng.random_range(1..24);
        let scale = 10f64.powi(rng.random_range(-3..4));
        let vm = random(&[n, c], 2 * trial).map(|v| (v - 0.5) * scale);
        let vl = random(&[n, c], 2 * trial + 1).map(|v| (v - 0.5) * scale);
        let one = fuse_memory(&vm, &vl, &ChangeProbabilityMap::constant(&[n, 1], 1.0)).unwrap();
        let zero = fuse_memory(&vm, &vl, &ChangeProbabilityMap::constant(&[n, 1], 0.0)).unwrap();
        worst = worst.max(one.max_abs_diff(&vm)).max(zero.max_abs_diff(&vl));
    }
    outcome(worst == 0.0, format!("max |P(U=1)−V^m| and |P(U=0)−V_last| = {worst:e} (tolerance 0)"))
}

// ---------------------------------------------------------------- 2

fn affinity_rows() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_sum, mut min_entry) = (0.0f64, f64::INFINITY);
    for draw in 0..1000u64 {
        let nq = rng.random_range(1..24);
        let nk = rng.random_range(1..48);
        let c = rng.random_range(1..17);
        let spread = rng.random_range(0.1..8.0);
        let q = random(&[nq, c], 3 * draw).map(|v| (v - 0.5) * spread);
        let k = random(&[nk, c], 3 * draw + 1).map(|v| (v - 0.5) * spread);
        let a = compute_affinity(&q, &k, None).unwrap();
        for r in 0..nq {
            let row = &a.tensor().data()[r * nk..(r + 1) * nk];
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
            min_entry = row.iter().copied().fold(min_entry, f64::min);
        }
    }
    outcome(
        worst_sum <= 1e-5 && min_entry >= 0.0,
        format!("max |row sum − 1| = {worst_sum:.3e} (≤ 1e-5), min entry = {min_entry:.3e} (≥ 0), 1000 draws"),
    )
}

// ---------------------------------------------------------------- 3

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Straight edge with per-pixel random alpha inside a thin band, composited
/// over constant colors. Returns (alpha, image, band).
fn edge_composite(rng: &mut ChaCha8Rng, f: [f64; 3], b: [f64; 3]) -> (Tensor, Tensor, Tensor) {
    let (h, w) = (32usize, 32usize);
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let (ct, st) = (theta.cos(), theta.sin());
    let offset = rng.random_range(-4.0..4.0);
    let half_width = rng.random_range(1.0..2.5);
    let mut alpha = Tensor::zeros(&[1, h, w]);
    for y in 0..h {
        for x in 0..w {
            let d = (x as f64 - 15.5) * ct + (y as f64 - 15.5) * st - offset;
            // fractional alpha only where the whole 11×11 window fits on the canvas
            let interior = (5..h - 5).contains(&y) && (5..w - 5).contains(&x);
            alpha.data_mut()[y * w + x] = if d > half_width || (!interior && d > 0.0) {
                1.0
            } else if d < -half_width || !interior {
                0.0
            } else {
                rng.random_range(0.02..0.98)
            };
        }
    }
    let image = Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        let a = alpha.data()[p];
        a * f[c] + (1.0 - a) * b[c]
    });
    let band = alpha.map(|a| if a > 0.0 && a < 1.0 { 1.0 } else { 0.0 });
    (alpha, image, band)
}

fn scaled_ddc_zero() -> Outcome {
    let cfg = DdcConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_scaled, mut min_original, mut worst_agree) = (0.0f64, f64::INFINITY, 0.0f64);
    let tint = {
        let v = [LUMA[1], -LUMA[0], 0.0];
        let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
        [v[0] / n, v[1] / n, 0.0]
    };
    for i in 0..50 {
        let contrast = 0.05 + 0.85 * i as f64 / 49.0;
        let room = 1.0 - contrast - 0.04;
        let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.02..room.max(0.021)));
        let t = rng.random_range(-0.02..0.02);
        let f: [f64; 3] = std::array::from_fn(|c| base[c] + contrast + t * tint[c]);
        let (alpha, image, band) = edge_composite(&mut rng, f, base);
        let s = loss_ddc_scaled(&alpha, &image, &band, &cfg).unwrap();
        let o = loss_ddc_original(&alpha, &image, &band, &cfg).unwrap();
        assert!(!s.empty_band);
        worst_scaled = worst_scaled.max(s.value);
        let fb: f64 = (0..3).map(|c| LUMA[c] * (f[c] - base[c])).sum::<f64>().abs();
        if fb <= 0.7 {
            min_original = min_original.min(o.value);
        }
    }
    for _ in 0..5 {
        let (alpha, image, band) = edge_composite(&mut rng, [1.0; 3], [0.0; 3]);
        let s = loss_ddc_scaled(&alpha, &image, &band, &cfg).unwrap();
        let o = loss_ddc_original(&alpha, &image, &band, &cfg).unwrap();
        worst_agree = worst_agree.max((s.value - o.value).abs());
    }
    outcome(
        worst_scaled <= 1e-6 && min_original >= 1e-3 && worst_agree <= 1e-12,
        format!(
            "max scaled = {worst_scaled:.3e} (≤ 1e-6), min original at |F−B| ≤ 0.7 = {min_original:.3e} (≥ 1e-3), \
             max |scaled − original| at F=1,B=0 = {worst_agree:.3e} (≤ 1e-12)"
        ),
    )
}

// ---------------------------------------------------------------- 4

fn grad_error(x0: &Tensor, build: impl Fn(&mut Graph, Var) -> Var) -> f64 {
    let mut g = Graph::new();
    let v = g.param(x0.clone());
    let out = build(&mut g, v);
    let analytic = g.backward(out).get(v).cloned().unwrap_or_else(|| Tensor::zeros(x0.shape()));
    let numeric = numerical_grad(x0, 1e-6, |x| {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let out = build(&mut g, v);
        g.value(out).item()
    });
    max_relative_error(&analytic, &numeric, 1e-6)
}

fn gradient_checks() -> Outcome {
    let hw = [1, 16, 16];
    let pred = random(&hw, 40);
    let target = random(&hw, 41);
    let logits = random(&hw, 42).map(|v| 4.0 * v - 2.0);
    let binary = random_binary(&hw, 43, 0.4);
    let image = random(&[3, 16, 16], 44);
    let seg = rect_mask(16, 16, 4, 12, 3, 11);
    let partition = trimap_from_segmask(&seg, 3).unwrap();
    let ddc = DdcConfig::default();
    let weights = LossWeights::default();
    let seq_target: Vec<Tensor> = (0..3).map(|t| random(&hw, 50 + t)).collect();
    let lap_pred = random(&[1, 32, 32], 45);
    let lap_target = random(&[1, 32, 32], 46);
    let original = DdcPlan::new(&image, &partition.boundary, &ddc, DdcVariant::Original).unwrap();
    let scaled = DdcPlan::new(&image, &partition.boundary, &ddc, DdcVariant::Scaled).unwrap();

    let checks: Vec<(&str, f64)> = vec![
        ("L1", grad_error(&pred, |g, v| l1_var(g, v, &target).unwrap())),
        ("Laplacian (32×32)", grad_error(&lap_pred, |g, v| laplacian_var(g, v, &lap_target).unwrap())),
        (
            "temporal coherence",
            grad_error(&random(&[3, 1, 16, 16], 47), |g, v| {
                let frames: Vec<Var> = (0..3)
                    .map(|t| {
                        let s = g.slice(v, t, 1);
                        g.reshape(s, &[1, 16, 16])
                    })
                    .collect();
                temporal_coherence_var(g, &frames, &seq_target).unwrap()
            }),
        ),
        ("CE", grad_error(&logits, |g, v| bce_var(g, v, &binary).unwrap())),
        ("Dice", grad_error(&logits, |g, v| dice_var(g, v, &binary).unwrap())),
        ("change-mask BCE", grad_error(&logits, |g, v| change_mask_var(g, v, &binary).unwrap())),
        ("original DDC", grad_error(&pred, |g, v| original.loss_var(g, v).unwrap())),
        ("scaled DDC", grad_error(&pred, |g, v| scaled.loss_var(g, v).unwrap())),
        (
            "core supervision",
            grad_error(&pred, |g, v| {
                core_supervision_var(g, v, &seg, &image, &partition, &ddc, &weights)
                    .unwrap()
                    .total
            }),
        ),
    ];
    let worst = checks.iter().map(|c| c.1).fold(0.0, f64::max);
    let detail = checks
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(worst <= 1e-3, format!("max relative error {worst:.2e} (≤ 1e-3): {detail}"))
}

// ---------------------------------------------------------------- 5

fn metric_oracles() -> Outcome {
    let (h, w) = (16, 16);
    let mut worst = 0.0f64;
    let mut fixtures: Vec<(Tensor, Tensor)> = (0..6).map(|i| (random(&[1, h, w], 60 + 2 * i), random(&[1, h, w], 61 + 2 * i))).collect();
    // step edge against a blurred edge
    let step = Tensor::from_fn(&[1, h, w], |i| if i % w >= 8 { 1.0 } else { 0.0 });
    let blurred = Tensor::from_fn(&[1, h, w], |i| 1.0 / (1.0 + (-((i % w) as f64 - 7.5)).exp()));
    fixtures.push((blurred, step.clone()));
    // solid matte vs the same with a detached half-transparent island
    let solid = rect_mask(h, w, 2, 9, 2, 9);
    let mut island = solid.clone();
    island.data_mut()[13 * w + 13] = 0.5;
    fixtures.push((island.clone(), solid.clone()));
    for (p, g) in &fixtures {
        let (pd, gd) = (p.data(), g.data());
        worst = worst
            .max((mad(p, g).unwrap() - mad_oracle(pd, gd)).abs())
            .max((mse(p, g).unwrap() - mse_oracle(pd, gd)).abs())
            .max((grad_metric(p, g).unwrap() - grad_oracle(pd, gd, h, w)).abs())
            .max((conn_metric(p, g).unwrap() - conn_oracle(pd, gd, h, w)).abs());
    }
    let island_conn = conn_metric(&island, &solid).unwrap();

    let t = 4;
    let seqs: Vec<(Vec<Tensor>, Vec<Tensor>, Vec<Tensor>)> = (0..3)
        .map(|s| {
            let p: Vec<Tensor> = (0..t).map(|i| random(&[1, h, w], 100 + 10 * s + i as u64)).collect();
            let g: Vec<Tensor> = (0..t).map(|i| random(&[1, h, w], 200 + 10 * s + i as u64)).collect();
            let m: Vec<Tensor> = (0..t).map(|i| rect_mask(h, w, 3 + i, 11 + i, 2 + s as usize, 12)).collect();
            (p, g, m)
        })
        .collect();
    for (p, g, m) in &seqs {
        let stack = |v: &Vec<Tensor>| Tensor::stack(v).unwrap();
        let flat = |v: &Vec<Tensor>| v.iter().map(|x| x.data().to_vec()).collect::<Vec<_>>();
        worst = worst.max((dtssd(&stack(p), &stack(g)).unwrap() - dtssd_oracle(&flat(p), &flat(g))).abs());
        for k in [3, 5] {
            let c = core_region_metrics(&stack(p), &stack(m), k).unwrap();
            let (om, os, od) = core_metrics_oracle(&flat(p), &flat(m), h, w, k);
            worst = worst
                .max((c.mad - om).abs())
                .max((c.mse - os).abs())
                .max((c.dtssd.unwrap() - od).abs());
        }
    }
    let offset = mad(&Tensor::full(&[1, h, w], 0.1), &Tensor::zeros(&[1, h, w])).unwrap();
    outcome(
        worst <= 1e-9 && offset == 100.0 && island_conn > 0.0,
        format!(
            "max |metric − oracle| = {worst:.2e} (≤ 1e-9), offset-0.1 MAD = {offset} (== 100.0), \
             island Conn = {island_conn:.3} (> 0)"
        ),
    )
}

// ---------------------------------------------------------------- 6

fn change_mask_derivation() -> Outcome {
    let (h, w) = (32, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0usize;
    let mut toys = 0usize;
    let steps = [0.0, 0.0005, 0.000999, 0.001, 0.0011, 0.01, 0.3];
    for _ in 0..200 {
        let prev = random(&[1, h, w], rng.random());
        let mut cur = prev.clone();
        for _ in 0..rng.random_range(0..6) {
            let i = rng.random_range(0..h * w);
            cur.data_mut()[i] = prev.data()[i] + steps[rng.random_range(0..steps.len())];
        }
        let got = ground_truth_change_mask(&prev, &cur, 0.001, DataKind::Matting).unwrap();
        let want = change_mask_oracle(prev.data(), cur.data(), h, w, 0.001, false);
        mismatches += usize::from(got.data() != want.as_slice());
        toys += 1;

        let pm = random_binary(&[1, h, w], rng.random(), 0.5);
        let mut cm = pm.clone();
        for _ in 0..rng.random_range(0..4) {
            let i = rng.random_range(0..h * w);
            cm.data_mut()[i] = 1.0 - cm.data()[i];
        }
        let got = ground_truth_change_mask(&pm, &cm, 0.0, DataKind::Segmentation).unwrap();
        let want = change_mask_oracle(pm.data(), cm.data(), h, w, 0.0, true);
        mismatches += usize::from(got.data() != want.as_slice());
        toys += 1;
    }
    // hand-placed boundary cases: exactly δ fires for matting, not for strict segmentation
    let z = Tensor::zeros(&[1, h, w]);
    let mut at = z.clone();
    at.data_mut()[5 * w + 20] = 0.001;
    let matting = ground_truth_change_mask(&z, &at, 0.001, DataKind::Matting).unwrap();
    let strict = ground_truth_change_mask(&z, &at, 0.001, DataKind::Segmentation).unwrap();
    let identical = ground_truth_change_mask(&z, &z, 0.0, DataKind::Segmentation).unwrap();
    let boundary_ok = matting.data() == [0.0, 1.0, 0.0, 0.0] && strict.data() == [0.0; 4] && identical.sum() == 0.0;
    outcome(
        mismatches == 0 && boundary_ok,
        format!("{mismatches} mismatching token maps over {toys} 32×32 toys (== 0), threshold-edge cases ok = {boundary_ok}"),
    )
}

// ---------------------------------------------------------------- 10

fn routing_table() -> Outcome {
    let on = |m, s, c| LossSet {
        matting: m,
        segmentation: s,
        core_supervision: c,
        change_mask: true,
    };
    let expected = [
        (1, DataKind::Matting, on(true, false, false)),
        (1, DataKind::Segmentation, on(false, true, false)),
        (2, DataKind::Matting, on(true, false, false)),
        (2, DataKind::Segmentation, on(false, true, true)),
        (3, DataKind::Matting, on(true, false, false)),
        (3, DataKind::Segmentation, on(false, true, true)),
    ];
    let table_ok = expected
        .iter()
        .all(|(s, k, want)| route_batch(*k, &StageConfig::desk(*s).unwrap()) == *want);

    let cfg = TrainConfig {
        model: ModelConfig::tiny(),
        core_kernel: 5,
        ..TrainConfig::default()
    };
    let model = MattingModel::new(cfg.model.clone()).unwrap();
    let masks: Vec<Tensor> = (0..3).map(|t| rect_mask(32, 32, 8 + t, 22 + t, 6, 24)).collect();
    let sample = Sample {
        kind: DataKind::Segmentation,
        frames: (0..3).map(|t| random(&[3, 32, 32], 70 + t)).collect(),
        alpha: None,
        masks: Some(masks.clone()),
        guidance: masks[0].clone(),
    };
    let head: Vec<usize> = model
        .alpha_head_param_names()
        .iter()
        .map(|n| model.params().names().iter().position(|m| m == n).unwrap())
        .collect();
    let head_norm = |stage: u8| {
        let losses = route_batch(DataKind::Segmentation, &StageConfig::desk(stage).unwrap());
        let (_, grads) = sequence_loss(&model, &sample, losses, &cfg).unwrap();
        head.iter().map(|&i| grads[i].data().iter().map(|v| v.abs()).sum::<f64>()).sum::<f64>()
    };
    let (g1, g2, g3) = (head_norm(1), head_norm(2), head_norm(3));
    outcome(
        table_ok && g1 == 0.0 && g2 > 0.0 && g3 > 0.0,
        format!(
            "stage × kind table matches = {table_ok}; matting-head |grad| from segmentation batches: \
             stage 1 = {g1:e} (== 0), stage 2 = {g2:.3e}, stage 3 = {g3:.3e} (> 0)"
        ),
    )
}

// ---------------------------------------------------------------- 7, 8, 9

struct Overfit {
    model: MattingModel,
    data: TrainingData,
    seconds: f64,
    _dir: tempfile::TempDir,
}

fn train_overfit() -> Overfit {
    let dir = tempfile::tempdir().unwrap();
    let corpus = CorpusConfig::default();
    let manifest = generate_corpus(&corpus, dir.path()).unwrap();
    let data = TrainingData::load(&manifest, dir.path()).unwrap();
    let cfg = TrainConfig::default();
    let mut model = MattingModel::new(cfg.model.clone()).unwrap();
    let start = Instant::now();
    for stage in [1u8, 2] {
        let stage_cfg = cfg.stage(stage).unwrap().clone();
        let mut state = TrainState::new(stage, &model, cfg.seed);
        run_stage(&mut model, &mut state, &data, &cfg, &stage_cfg, None, |_| Ok(())).unwrap();
        eprintln!(
            "  stage {stage} done after {:.0}s, running loss {:.4}",
            start.elapsed().as_secs_f64(),
            state.running_mean().unwrap()
        );
    }
    Overfit {
        model,
        data,
        seconds: start.elapsed().as_secs_f64(),
        _dir: dir,
    }
}

fn overfit_metrics(o: &Overfit) -> Outcome {
    let cfg = InferenceConfig::default();
    let mut rows = Vec::new();
    for c in &o.data.matting {
        let mask = c.mask.as_ref().unwrap();
        let p = propagate(&o.model, &c.clip, &mask.frame(0), &cfg, &PropagateOptions::default()).unwrap();
        let m = clip_metrics(&p.alpha, c.alpha.as_ref().unwrap(), mask, 7).unwrap();
        rows.push((c.manifest.clip_id.clone(), m.mad, m.dtssd.unwrap(), m.core.mad));
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&(String, f64, f64, f64)) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let (m, d, c) = (mean(|r| r.1), mean(|r| r.2), mean(|r| r.3));
    let per_clip = rows
        .iter()
        .map(|r| format!("{} {:.2}/{:.2}/{:.2}", r.0, r.1, r.2, r.3))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(
        m < 20.0 && d < 5.0 && c < 5.0,
        format!(
            "mean over {} clips: MAD {m:.2} (< 20), dtSSD {d:.3} (< 5), core MAD {c:.3} (< 5, kernel 7); \
             training took {:.0}s (budget 1800s); per clip MAD/dtSSD/core: {per_clip}",
            rows.len(),
            o.seconds
        ),
    )
}

fn memory_stability(o: &Overfit) -> Outcome {
    let corpus = CorpusConfig::default();
    let scene = SceneSpec::random(clip_seed(corpus.seed, 0), corpus.height, corpus.width, corpus.frames).frozen();
    let r = render_clip(&scene, 24).unwrap();
    let p = propagate(
        &o.model,
        &r.clip,
        &r.mask.frame(0),
        &InferenceConfig::default(),
        &PropagateOptions::default(),
    )
    .unwrap();
    let first = p.alpha.frame(0);
    let worst = (1..24)
        .map(|t| mad(&p.alpha.frame(t), &first).unwrap())
        .fold(0.0, f64::max);
    outcome(worst < 1.0, format!("max per-frame MAD to frame 0 over 24 static frames = {worst:.4} (< 1)"))
}

fn warmup_contraction(o: &Overfit) -> Outcome {
    let c = &o.data.matting[0];
    let mask = c.mask.as_ref().unwrap().frame(0);
    let alphas = warmup_trajectory(&o.model, &c.clip.frame(0), &mask, 10).unwrap();
    let band = trimap_from_segmask(&mask, 7).unwrap().boundary;
    let band_count = band.sum();
    // changes[k] is the band L1 change from iteration k+1 to k+2 (1-based)
    let changes: Vec<f64> = alphas
        .windows(2)
        .map(|p| {
            p[0].data()
                .iter()
                .zip(p[1].data())
                .zip(band.data())
                .map(|((a, b), m)| m * (a - b).abs())
                .sum::<f64>()
                / band_count
        })
        .collect();
    let non_increasing = changes[2..].windows(2).all(|p| p[1] <= p[0] + 1e-12);
    let last = alphas[9]
        .data()
        .iter()
        .zip(alphas[8].data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / alphas[9].numel() as f64;
    let listed = changes.iter().map(|c| format!("{c:.2e}")).collect::<Vec<_>>().join(" ");
    outcome(
        non_increasing && last < 1e-3,
        format!(
            "band change after iteration 3 non-increasing = {non_increasing} (slack 1e-12); \
             mean |α10 − α9| = {last:.2e} (< 1e-3); changes: {listed}"
        ),
    )
}

// ---------------------------------------------------------------- 11

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_memprop-matte"))
        .args(args)
        .env_remove("MEMPROP_MATTE_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn pipeline(root: &Path) -> Result<(Vec<u8>, Vec<u8>), String> {
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    run_cli(&["--seed", "5", "datagen", "--out", &p("data")])?;
    run_cli(&[
        "--seed", "5", "--deterministic", "train", "--manifest", &p("data"), "--stage", "1", "--out",
        &p("stage1.ckpt"), "--max-iterations", "200",
    ])?;
    run_cli(&[
        "--deterministic", "infer", "--checkpoint", &p("stage1.ckpt"), "--manifest", &p("data"), "--split",
        "test", "--out", &p("pred"),
    ])?;
    run_cli(&[
        "eval", "--manifest", &p("data"), "--predictions", &p("pred"), "--split", "test", "--out",
        &p("metrics.csv"),
    ])?;
    let read = |f: &str| std::fs::read(root.join(f)).map_err(|e| e.to_string());
    Ok((read("stage1.losses.csv")?, read("metrics.csv")?))
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let start = Instant::now();
    match (pipeline(a.path()), pipeline(b.path())) {
        (Ok((la, ma)), Ok((lb, mb))) => {
            let rows = la.iter().filter(|&&c| c == b'\n').count();
            outcome(
                la == lb && ma == mb && rows == 201,
                format!(
                    "loss CSVs identical = {} ({} rows), metric CSVs identical = {}; {:.0}s for both runs",
                    la == lb,
                    rows - 1,
                    ma == mb,
                    start.elapsed().as_secs_f64()
                ),
            )
        }
        (ra, rb) => outcome(false, format!("pipeline failed: {:?} / {:?}", ra.err(), rb.err())),
    }
}

// ----------------------------------------------------------------

fn report(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let res = catch_unwind(AssertUnwindSafe(f));
    let secs = start.elapsed().as_secs_f64();
    let (pass, detail) = match res {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (
            false,
            format!(
                "panicked: {}",
                e.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default()
            ),
        ),
    };
    println!(
        "criterion {id:>2} {:<26} {} [{secs:.1}s] {detail}",
        name,
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

fn skip(id: usize, name: &str) {
    println!("criterion {id:>2} {name:<26} SKIP (MEMPROP_ACCEPTANCE_QUICK set)");
}

fn main() {
    let quick = std::env::var_os("MEMPROP_ACCEPTANCE_QUICK").is_some();
    let mut ok = true;
    ok &= report(1, "fusion endpoints", fusion_endpoints);
    ok &= report(2, "affinity stochasticity", affinity_rows);
    ok &= report(3, "scaled-DDC algebraic zero", scaled_ddc_zero);
    ok &= report(4, "loss gradient checks", gradient_checks);
    ok &= report(5, "metric oracles", metric_oracles);
    ok &= report(6, "change-mask derivation", change_mask_derivation);
    ok &= report(10, "routing table", routing_table);
    if quick {
        for (id, name) in [
            (7, "overfit experiment"),
            (8, "memory stability"),
            (9, "warm-up contraction"),
            (11, "end-to-end determinism"),
        ] {
            skip(id, name);
        }
    } else {
        eprintln!("training the overfit model (stages 1–2, desk budgets)...");
        let trained = catch_unwind(train_overfit);
        match &trained {
            Ok(o) => {
                ok &= report(7, "overfit experiment", || overfit_metrics(o));
                ok &= report(8, "memory stability", || memory_stability(o));
                ok &= report(9, "warm-up contraction", || warmup_contraction(o));
            }
            Err(_) => {
                for (id, name) in [(7, "overfit experiment"), (8, "memory stability"), (9, "warm-up contraction")] {
                    ok &= report(id, name, || outcome(false, "overfit training panicked"));
                }
            }
        }
        ok &= report(11, "end-to-end determinism", determinism);
    }
    println!("acceptance: {}", if ok { "all criteria passed" } else { "FAILURES" });
    if !ok {
        std::process::exit(1);
    }
}
