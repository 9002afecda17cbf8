use proptest::prelude::*;
use uie_core::losses::{classify_scores, cr_from_distances, hinge};
use uie_core::metrics::{plcc, psnr, srocc, ssim, uciqe};
use uie_core::perception::PerceptionScore;
use uie_core::ImageTensor;

fn image(h: usize, w: usize) -> impl Strategy<Value = ImageTensor> {
    prop::collection::vec(0.0f64..=1.0, h * w * 3).prop_map(move |d| ImageTensor::new(h, w, d).unwrap())
}

/// Samples with enough spread that correlations are defined.
fn spread_pairs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 4..30).prop_filter("needs variance", |v| {
        let spread = |f: fn(&(f64, f64)) -> f64| {
            let (lo, hi) = v.iter().map(f).fold((f64::MAX, f64::MIN), |(a, b), x| (a.min(x), b.max(x)));
            hi - lo > 1e-3
        };
        spread(|p| p.0) && spread(|p| p.1)
    })
    .prop_map(|v| v.into_iter().unzip())
}

proptest! {
    #[test]
    fn score_is_a_probability_and_monotone(sp in -1.0f64..1.0, sn in -1.0f64..1.0, d in 1e-3f64..0.5) {
        let s = PerceptionScore::from_similarities(sp, sn, 1.0).s_out;
        prop_assert!(s > 0.0 && s < 1.0);
        prop_assert!(PerceptionScore::from_similarities(sp + d, sn, 1.0).s_out > s);
        prop_assert!(PerceptionScore::from_similarities(sp, sn + d, 1.0).s_out < s);
    }

    #[test]
    fn hinge_is_nonnegative_and_nonincreasing(a in 0.0f64..1.0, b in 0.0f64..1.0, alpha in 0.0f64..1.0, d in 0.0f64..0.5) {
        let h = hinge(a, b, alpha);
        prop_assert!(h >= 0.0);
        prop_assert!(hinge((a + d).min(1.0), b, alpha) <= h);
        // zero once the output reaches the relaxed target
        let target = 1.0 - alpha * (1.0 - b);
        prop_assert!(hinge((target + d).min(1.0), b, alpha) <= 1e-15);
    }

    #[test]
    fn curriculum_weights_take_two_values(anchor in 0.0f64..1.0, negs in prop::collection::vec(0.0f64..1.0, 1..8), gamma in 0.0f64..0.5) {
        let w = classify_scores(anchor, &negs, gamma, false).unwrap();
        prop_assert_eq!(w.easy_weight, negs.len() as f64);
        for (q, &s) in negs.iter().enumerate() {
            let expected = if anchor > s { 1.0 + gamma } else { 1.0 - gamma };
            prop_assert_eq!(w.per_negative[q], expected);
        }
        let flipped = classify_scores(anchor, &negs, gamma, true).unwrap();
        for (q, &s) in negs.iter().enumerate() {
            if s != anchor {
                prop_assert_ne!(flipped.per_negative[q], w.per_negative[q]);
            }
        }
    }

    #[test]
    fn regularizer_is_scale_free(
        pos in prop::collection::vec(0.0f64..1.0, 5),
        easy in prop::collection::vec(0.01f64..1.0, 5),
        negs in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 5), 1..4),
        scale in 0.01f64..100.0,
    ) {
        let w = classify_scores(0.5, &vec![0.4; negs.len()], 0.25, false).unwrap();
        let xi = [0.1, 0.2, 0.3, 0.4, 1.0];
        let base = cr_from_distances(&pos, &negs, &easy, &w, &xi, None).unwrap();
        let sc = |v: &[f64]| v.iter().map(|x| x * scale).collect::<Vec<_>>();
        let scaled_negs: Vec<Vec<f64>> = negs.iter().map(|n| sc(n)).collect();
        let scaled = cr_from_distances(&sc(&pos), &scaled_negs, &sc(&easy), &w, &xi, None).unwrap();
        prop_assert!(base >= 0.0);
        prop_assert!((base - scaled).abs() <= 1e-9 * base.max(1.0));
    }

    #[test]
    fn plcc_is_affine_invariant((x, y) in spread_pairs(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let r = plcc(&x, &y).unwrap();
        let ya: Vec<f64> = y.iter().map(|v| a * v + b).collect();
        prop_assert!((plcc(&x, &ya).unwrap() - r).abs() < 1e-9);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
    }

    #[test]
    fn srocc_is_monotone_invariant((x, y) in spread_pairs()) {
        let r = srocc(&x, &y).unwrap();
        let ym: Vec<f64> = y.iter().map(|v| v.powi(3) + 2.0 * v).collect();
        prop_assert!((srocc(&x, &ym).unwrap() - r).abs() < 1e-9);
        prop_assert!((srocc(&y, &x).unwrap() - r).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn uciqe_ignores_pixel_order(img in image(12, 12), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut order: Vec<usize> = (0..144).collect();
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let shuffled = ImageTensor::from_fn(12, 12, |y, x, c| {
            let k = order[y * 12 + x];
            img.get(k / 12, k % 12, c)
        });
        prop_assert!((uciqe(&img) - uciqe(&shuffled)).abs() < 1e-9);
    }

    #[test]
    fn ssim_and_psnr_are_symmetric(a in image(12, 12), b in image(12, 12)) {
        let s = ssim(&a, &b).unwrap();
        prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-9);
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quantization_is_idempotent(img in image(6, 5)) {
        let q = img.quantize_u8();
        prop_assert_eq!(q.quantize_u8(), q.clone());
        let back = ImageTensor::from_rgb8(6, 5, &q.to_rgb8()).unwrap();
        prop_assert_eq!(back, q);
    }
}
