//! Property tests for the metric and algebra invariants.

use proptest::prelude::*;

use crossflow::detect::{average_precision, iou, match_detections, Box};
use crossflow::lora::{adapted_forward, init_adapter, merge};
use crossflow::stats::{average_ranks, linear_fit, pearson, spearman};
use crossflow::tensor::{self, Tensor};

fn arb_box() -> impl Strategy<Value = Box> {
    (0.0f64..20.0, 0.0f64..20.0, 0.5f64..10.0, 0.5f64..10.0, 0u32..3).prop_map(
        |(x, y, w, h, class)| Box::new(x, y, x + w, y + h, class).unwrap(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn iou_symmetric_bounded(a in arb_box(), b in arb_box()) {
        let ab = iou(&a, &b).unwrap();
        let ba = iou(&b, &a).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn iou_one_iff_identical(a in arb_box(), b in arb_box()) {
        let v = iou(&a, &b).unwrap();
        let identical = a.x_min == b.x_min && a.y_min == b.y_min
            && a.x_max == b.x_max && a.y_max == b.y_max;
        if identical {
            prop_assert_eq!(v, 1.0);
        } else {
            prop_assert!(v < 1.0);
        }
    }

    #[test]
    fn ap_bounded_and_threshold_monotone(
        flags in proptest::collection::vec(any::<bool>(), 1..12),
        extra_gt in 0usize..3,
    ) {
        let tp = flags.iter().filter(|&&f| f).count();
        let n_gt = tp.max(1) + extra_gt;
        let ap = average_precision(&flags, n_gt).unwrap();
        prop_assert!((0.0..=1.0).contains(&ap));
    }

    #[test]
    fn matching_never_double_books(preds in proptest::collection::vec(arb_box(), 0..8),
                                   gts in proptest::collection::vec(arb_box(), 0..6)) {
        let preds: Vec<Box> = preds
            .into_iter()
            .enumerate()
            .map(|(i, b)| b.with_score(1.0 - i as f64 * 0.1))
            .collect();
        let matches = match_detections(&preds, &gts, 0.5).unwrap();
        let tp_count = matches.iter().filter(|m| m.tp).count();
        prop_assert!(tp_count <= gts.len());
        prop_assert_eq!(matches.len(), preds.len());
        // scores are visited in non-increasing order
        for pair in matches.windows(2) {
            prop_assert!(pair[0].score >= pair[1].score);
        }
    }

    #[test]
    fn raising_iou_threshold_never_raises_ap(
        preds in proptest::collection::vec(arb_box(), 1..8),
        gts in proptest::collection::vec(arb_box(), 1..6),
    ) {
        let preds: Vec<Box> = preds
            .into_iter()
            .enumerate()
            .map(|(i, b)| b.with_score(1.0 / (1.0 + i as f64)))
            .collect();
        let mut prev = f64::INFINITY;
        for thr in [0.3, 0.5, 0.7, 0.9] {
            let flags: Vec<bool> =
                match_detections(&preds, &gts, thr).unwrap().iter().map(|m| m.tp).collect();
            let ap = average_precision(&flags, gts.len()).unwrap();
            prop_assert!(ap <= prev + 1e-12);
            prev = ap;
        }
    }

    #[test]
    fn correlations_bounded_and_affine_invariant(
        xs in proptest::collection::vec(-100.0f64..100.0, 4..12),
        noise in proptest::collection::vec(-1.0f64..1.0, 4..12),
        a in 0.1f64..5.0,
        b in -10.0f64..10.0,
    ) {
        let n = xs.len().min(noise.len());
        let xs = &xs[..n];
        let ys: Vec<f64> = xs.iter().zip(&noise[..n]).map(|(x, e)| 0.5 * x + e).collect();
        if let (Ok((r, p)), Ok((rho, _))) = (pearson(xs, &ys), spearman(xs, &ys)) {
            prop_assert!((-1.0..=1.0).contains(&r));
            prop_assert!((-1.0..=1.0).contains(&rho));
            prop_assert!(p >= 0.0 && p <= 1.0);
            // positive affine transform of xs preserves both
            let xs2: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            if let Ok((r2, _)) = pearson(&xs2, &ys) {
                prop_assert!((r - r2).abs() < 1e-9);
            }
            if let Ok((rho2, _)) = spearman(&xs2, &ys) {
                prop_assert_eq!(rho, rho2);
            }
        }
    }

    #[test]
    fn ranks_are_a_mean_preserving_permutation(
        values in proptest::collection::vec(-50.0f64..50.0, 1..20),
    ) {
        let ranks = average_ranks(&values);
        let n = values.len();
        let sum: f64 = ranks.iter().sum();
        prop_assert!((sum - (n * (n + 1)) as f64 / 2.0).abs() < 1e-9);
    }

    #[test]
    fn fit_residuals_orthogonal_to_x(
        xs in proptest::collection::vec(-10.0f64..10.0, 3..10),
        ys in proptest::collection::vec(-10.0f64..10.0, 3..10),
    ) {
        let n = xs.len().min(ys.len());
        let (xs, ys) = (&xs[..n], &ys[..n]);
        if let Ok((slope, intercept)) = linear_fit(xs, ys) {
            let mean_x = xs.iter().sum::<f64>() / n as f64;
            let dot: f64 = xs
                .iter()
                .zip(ys.iter())
                .map(|(x, y)| (x - mean_x) * (y - slope * x - intercept))
                .sum();
            prop_assert!(dot.abs() < 1e-6, "residuals not orthogonal: {}", dot);
        }
    }

    #[test]
    fn merged_and_unmerged_paths_agree(seed in 0u64..500, rank in 1usize..5) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (d_out, d_in) = (12usize, 10usize);
        let mut ad = init_adapter(d_out, d_in, rank, rank as f32, seed, "t").unwrap();
        let a_data: Vec<f32> = (0..d_out * rank).map(|_| rng.gen_range(-0.2..0.2)).collect();
        ad.a = Tensor::from_vec(&[d_out, rank], a_data).unwrap();
        let w = Tensor::from_vec(
            &[d_out, d_in],
            (0..d_out * d_in).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        ).unwrap();
        let x = Tensor::from_vec(&[d_in], (0..d_in).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let via_adapter = adapted_forward(&x, &w, &ad).unwrap();
        let merged = merge(&w, &ad).unwrap();
        let via_merge = tensor::matmul(&merged, &tensor::reshape(&x, &[d_in, 1]).unwrap()).unwrap();
        for (p, q) in via_adapter.to_vec().iter().zip(via_merge.to_vec().iter()) {
            prop_assert!((p - q).abs() <= 1e-5);
        }
    }

    #[test]
    fn interpolation_is_affine_in_t(t in 0.0f32..1.0) {
        let x0 = Tensor::from_vec(&[4], vec![0.0, 1.0, -1.0, 2.0]).unwrap();
        let x1 = Tensor::from_vec(&[4], vec![2.0, -1.0, 1.0, 2.0]).unwrap();
        let (z, u) = crossflow::flow::interpolate(&x0, &x1, t).unwrap();
        for ((zv, a), b) in z.to_vec().iter().zip(x0.to_vec()).zip(x1.to_vec()) {
            prop_assert!((zv - ((1.0 - t) * a + t * b)).abs() < 1e-6);
        }
        prop_assert_eq!(u.to_vec(), vec![2.0, -2.0, 2.0, 0.0]);
    }
}
