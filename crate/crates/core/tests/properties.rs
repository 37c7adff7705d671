mod common;

use common::*;
use memprop_autograd::Tensor;
use memprop_matte::evaluation::{conn_metric, core_region_metrics, dtssd, grad_metric, mad, mse};
use memprop_matte::losses::{
    loss_change_mask, loss_l1, loss_laplacian_pyramid, loss_segmentation, loss_temporal_coherence,
};
use memprop_matte::memory::{compute_affinity, fuse_memory, read_memory, ChangeProbabilityMap};
use memprop_matte::types::{make_region_partition, trimap_from_segmask, RegionThresholds};
use proptest::prelude::*;

fn transpose(t: &Tensor) -> Tensor {
    let [_, h, w] = [t.shape()[0], t.shape()[1], t.shape()[2]];
    Tensor::from_fn(&[1, w, h], |i| t.data()[(i % h) * w + i / h])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn metrics_nonnegative_and_zero_at_identity(seed in 0u64..10_000, h in 4usize..20, w in 4usize..20) {
        let p = random(&[1, h, w], seed);
        let g = random(&[1, h, w], seed + 1);
        for m in [mad(&p, &g), mse(&p, &g), grad_metric(&p, &g), conn_metric(&p, &g)] {
            prop_assert!(m.unwrap() >= 0.0);
        }
        for m in [mad(&g, &g), mse(&g, &g), grad_metric(&g, &g), conn_metric(&g, &g)] {
            prop_assert_eq!(m.unwrap(), 0.0);
        }
    }

    #[test]
    fn metrics_match_oracles(seed in 0u64..10_000, h in 4usize..16, w in 4usize..16) {
        let p = random(&[1, h, w], seed);
        let g = random(&[1, h, w], seed ^ 0xabcd);
        prop_assert!((mad(&p, &g).unwrap() - mad_oracle(p.data(), g.data())).abs() < 1e-9);
        prop_assert!((mse(&p, &g).unwrap() - mse_oracle(p.data(), g.data())).abs() < 1e-9);
        prop_assert!((grad_metric(&p, &g).unwrap() - grad_oracle(p.data(), g.data(), h, w)).abs() < 1e-9);
        prop_assert!((conn_metric(&p, &g).unwrap() - conn_oracle(p.data(), g.data(), h, w)).abs() < 1e-9);
    }

    #[test]
    fn pixelwise_metrics_ignore_transposition(seed in 0u64..10_000, h in 4usize..16, w in 4usize..16) {
        let p = random(&[1, h, w], seed);
        let g = random(&[1, h, w], seed + 7);
        let (pt, gt) = (transpose(&p), transpose(&g));
        prop_assert!((mad(&p, &g).unwrap() - mad(&pt, &gt).unwrap()).abs() < 1e-9);
        prop_assert!((mse(&p, &g).unwrap() - mse(&pt, &gt).unwrap()).abs() < 1e-9);
        prop_assert!((grad_metric(&p, &g).unwrap() - grad_metric(&pt, &gt).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn unit_kernel_core_is_the_whole_canvas(seed in 0u64..10_000, t in 2usize..5, h in 4usize..12, w in 4usize..12) {
        let p = random(&[t, 1, h, w], seed);
        let seg = random_binary(&[t, 1, h, w], seed + 3, 0.5);
        let c = core_region_metrics(&p, &seg, 1).unwrap();
        let flat = |x: &Tensor| x.reshape(&[1, t * h, w]).unwrap();
        prop_assert!((c.mad - mad(&flat(&p), &flat(&seg)).unwrap()).abs() < 1e-9);
        prop_assert!((c.mse - mse(&flat(&p), &flat(&seg)).unwrap()).abs() < 1e-9);
        prop_assert!((c.dtssd.unwrap() - dtssd(&p, &seg).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn dtssd_zero_for_shared_motion(seed in 0u64..10_000, t in 2usize..6, offset in -0.5f64..0.5) {
        // adding a constant to every frame leaves frame differences unchanged
        let g = random(&[t, 1, 8, 8], seed);
        let p = g.map(|v| v + offset);
        prop_assert!(dtssd(&p, &g).unwrap() < 1e-9);
    }

    #[test]
    fn partitions_are_valid(seed in 0u64..10_000, k in 0usize..5, fg in 0.5f64..1.0, bg in 0.0f64..0.5) {
        let a = random(&[1, 12, 12], seed);
        let thresholds = RegionThresholds { fg, bg };
        prop_assert!(make_region_partition(&a, thresholds).unwrap().is_valid());
        let m = random_binary(&[1, 12, 12], seed, 0.4);
        let trimap = trimap_from_segmask(&m, 2 * k + 1).unwrap();
        prop_assert!(trimap.is_valid());
        // core foreground lies inside the mask, core background outside it
        for i in 0..144 {
            prop_assert!(trimap.core_fg.data()[i] <= m.data()[i]);
            prop_assert!(trimap.core_bg.data()[i] <= 1.0 - m.data()[i]);
        }
    }

    #[test]
    fn fused_readout_stays_between_sources(seed in 0u64..10_000, n in 1usize..20, m in 1usize..30, c in 1usize..6) {
        let q = random(&[n, 3], seed).map(|v| 4.0 * v - 2.0);
        let k = random(&[m, 3], seed + 1).map(|v| 4.0 * v - 2.0);
        let values = random(&[m, c], seed + 2).map(|v| v - 0.5);
        let a = compute_affinity(&q, &k, None).unwrap();
        for row in a.tensor().data().chunks(m) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let read = read_memory(&a, &values).unwrap();
        let last = random(&[n, c], seed + 3).map(|v| v - 0.5);
        let change = ChangeProbabilityMap { probability: random(&[n, 1], seed + 4), logits: None };
        let fused = fuse_memory(&read, &last, &change).unwrap();
        for i in 0..n * c {
            let (x, y) = (read.data()[i], last.data()[i]);
            let f = fused.data()[i];
            prop_assert!(f >= x.min(y) - 1e-12 && f <= x.max(y) + 1e-12);
        }
    }

    #[test]
    fn losses_nonnegative_and_zero_at_target(seed in 0u64..10_000, t in 2usize..4) {
        let pred = random(&[1, 32, 32], seed);
        let target = random(&[1, 32, 32], seed + 1);
        prop_assert!(loss_l1(&pred, &target).unwrap() >= 0.0);
        prop_assert!(loss_laplacian_pyramid(&pred, &target).unwrap() >= 0.0);
        prop_assert_eq!(loss_l1(&target, &target).unwrap(), 0.0);
        prop_assert_eq!(loss_laplacian_pyramid(&target, &target).unwrap(), 0.0);

        let ps = random(&[t, 1, 8, 8], seed + 2);
        let ts = random(&[t, 1, 8, 8], seed + 3);
        prop_assert!(loss_temporal_coherence(&ps, &ts).unwrap() >= 0.0);
        prop_assert_eq!(loss_temporal_coherence(&ts, &ts).unwrap(), 0.0);

        let logits = random(&[1, 8, 8], seed + 4).map(|v| 8.0 * v - 4.0);
        let bin = random_binary(&[1, 8, 8], seed + 5, 0.5);
        prop_assert!(loss_segmentation(&logits, &bin).unwrap() >= 0.0);
        prop_assert!(loss_change_mask(&logits, &bin).unwrap() >= 0.0);
    }
}
