use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use claws_core::augment::{Image, ViewPair};
use claws_core::eval::{ami, ari, kmeans, nmi, Normalization};
use claws_core::gmm::{gmm_fit, GmmConfig};
use claws_core::loss::{cross_entropy, nt_xent, LossConfig};
use claws_core::model::{ClawsModel, ConvSpec, MaskMode, ModelConfig, Variant};
use claws_core::numerics::Tensor;

const A: Normalization = Normalization::Arithmetic;

fn label_pair() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (2usize..60).prop_flat_map(|n| (prop::collection::vec(0usize..6, n), prop::collection::vec(0usize..6, n)))
}

fn relabel(x: &[usize], shift: usize) -> Vec<usize> {
    // A bijection on 0..6 followed by an offset.
    x.iter().map(|&v| (v * 5 + shift) % 6 + 10).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn metrics_are_symmetric_and_bounded((a, b) in label_pair()) {
        let (n, m, r) = (nmi(&a, &b, A).unwrap(), ami(&a, &b, A).unwrap(), ari(&a, &b).unwrap());
        prop_assert!((0.0..=1.0).contains(&n));
        prop_assert!((-1.0..=1.0).contains(&r));
        prop_assert!(m <= n + 1e-9, "ami {m} > nmi {n}");
        prop_assert!((nmi(&b, &a, A).unwrap() - n).abs() < 1e-12);
        prop_assert!((ami(&b, &a, A).unwrap() - m).abs() < 1e-12);
        prop_assert!((ari(&b, &a).unwrap() - r).abs() < 1e-12);
    }

    #[test]
    fn metrics_ignore_label_names((a, b) in label_pair(), shift in 0usize..6) {
        let pa = relabel(&a, shift);
        prop_assert!((nmi(&pa, &b, A).unwrap() - nmi(&a, &b, A).unwrap()).abs() < 1e-12);
        prop_assert!((ami(&pa, &b, A).unwrap() - ami(&a, &b, A).unwrap()).abs() < 1e-12);
        prop_assert!((ari(&pa, &b).unwrap() - ari(&a, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn identical_partitions_score_one(a in prop::collection::vec(0usize..5, 2..60)) {
        prop_assert!((nmi(&a, &a, A).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((ari(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nt_xent_is_rotation_invariant(seed in any::<u64>(), tau in 0.05f64..2.0, angle in 0.0f64..6.3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn(&[4, 32], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 32], 1.0, &mut rng);
        // Givens rotations on coordinate pairs (0,1), (2,3), ...
        let rotate = |t: &Tensor| {
            let mut out = t.clone();
            let (c, s) = (angle.cos(), angle.sin());
            for row in out.data_mut().chunks_mut(32) {
                for p in row.chunks_mut(2) {
                    let (x, y) = (p[0], p[1]);
                    p[0] = c * x - s * y;
                    p[1] = s * x + c * y;
                }
            }
            out
        };
        let cfg = LossConfig { temperature: tau, ..LossConfig::default() };
        let before = nt_xent(&a, &b, &cfg).unwrap();
        let after = nt_xent(&rotate(&a), &rotate(&b), &cfg).unwrap();
        prop_assert!((before - after).abs() < 1e-10);
    }

    #[test]
    fn cross_entropy_is_non_negative(seed in any::<u64>(), scale in 0.0f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::randn(&[5, 4], scale, &mut rng);
        let ce = cross_entropy(&logits, &[0, 1, 2, 3, 0]).unwrap();
        prop_assert!(ce >= 0.0 && ce.is_finite());
    }
}

fn random_points(seed: u64, n: usize, d: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor::randn(&[n, d], 1.0, &mut rng);
    // Three shifted groups.
    for (i, row) in x.data_mut().chunks_mut(d).enumerate() {
        row[0] += 6.0 * (i % 3) as f64;
    }
    x
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn kmeans_inertia_never_increases(seed in any::<u64>(), k in 1usize..6) {
        let x = random_points(seed, 90, 4);
        let fit = kmeans(&x, k, seed, 100, 0.0).unwrap();
        prop_assert!(fit.inertia >= 0.0);
        prop_assert!(fit.labels.iter().all(|&l| l < k));
        for w in fit.inertia_trace.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", fit.inertia_trace);
        }
    }

    #[test]
    fn gmm_weights_stay_a_simplex(seed in any::<u64>()) {
        let x = random_points(seed, 150, 3);
        let cfg = GmmConfig { seed, restarts: 1, ..GmmConfig::default() };
        let model = gmm_fit(&x, &cfg).unwrap();
        prop_assert!((model.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(model.weights.iter().all(|&w| w > 0.0));
        prop_assert!(model.variances.iter().flatten().all(|&v| v >= cfg.variance_floor));
        prop_assert_eq!(gmm_fit(&x, &cfg).unwrap(), model);
    }

    #[test]
    fn masks_are_binary_and_shared(seed in any::<u64>()) {
        let cfg = ModelConfig {
            variant: Variant::Claws,
            mask_mode: MaskMode::Hard,
            classes: 2,
            full_height: 10,
            full_width: 14,
            crop_size: 6,
            full_encoder: vec![ConvSpec::new(3, 3, 2)],
            crop_encoder: vec![ConvSpec::new(3, 3, 1)],
            hidden_dim: 8,
            projection_hidden: 8,
            attention_hidden: 8,
            classifier_hidden: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = ClawsModel::new(cfg, &mut rng).unwrap();
        let noise = |h: usize, w: usize, rng: &mut ChaCha8Rng| {
            Image::new(h, w, Tensor::randn(&[h * w * 3], 0.3, rng).data().iter().map(|v| (v.abs() as f32).min(1.0)).collect()).unwrap()
        };
        let pair = ViewPair {
            full: noise(10, 14, &mut rng),
            crop: noise(6, 6, &mut rng),
            source_id: "p".into(),
            label: Some(0),
        };
        let out = model.forward_pair(&pair).unwrap();
        prop_assert!(out.full.mask.data().iter().all(|&m| m == 0.0 || m == 1.0));
        prop_assert_eq!(out.full.mask.data(), out.crop.mask.data());
        for e in [&out.full, &out.crop] {
            for ((z, m), zm) in e.z.data().iter().zip(e.mask.data()).zip(e.z_masked.data()) {
                prop_assert_eq!((z * m).to_bits(), zm.to_bits());
            }
        }
    }
}
