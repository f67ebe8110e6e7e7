//! Property tests for invariants of the numeric building blocks.

use approx::assert_relative_eq;
use proptest::collection::vec;
use proptest::prelude::*;

use vpe_core::data::{perturb, render_prototypes, PerturbationRanges};
use vpe_core::model::{kl_divergence, GaussianLatent};
use vpe_core::nn::{adam_step, conv2d, fully_connected, AdamConfig, AdamState, LayerParams};
use vpe_core::oneshot::{brute_force_nn_oracle, SupportSet};
use vpe_core::retrieval::{pr_auc, retrieve, GalleryItem};
use vpe_core::{rng, Tensor};

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape, data).unwrap()
}

fn combine(a: &Tensor<f64>, x: f64, b: &Tensor<f64>, y: f64) -> Tensor<f64> {
    let data = a.data().iter().zip(b.data()).map(|(p, q)| x * p + y * q).collect();
    tensor(a.shape(), data)
}

fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>) {
    for (p, q) in a.data().iter().zip(b.data()) {
        assert_relative_eq!(p, q, epsilon = 1e-9, max_relative = 1e-9);
    }
}

proptest! {
    #[test]
    fn conv_is_linear_in_its_input(
        u in vec(-1.0..1.0f64, 2 * 2 * 6 * 6),
        v in vec(-1.0..1.0f64, 2 * 2 * 6 * 6),
        w in vec(-1.0..1.0f64, 3 * 2 * 3 * 3),
        a in -2.0..2.0f64,
        b in -2.0..2.0f64,
        stride in 1usize..3,
    ) {
        let params = LayerParams::new("c", tensor(&[3, 2, 3, 3], w), Tensor::zeros(&[3]));
        let (u, v) = (tensor(&[2, 2, 6, 6], u), tensor(&[2, 2, 6, 6], v));
        let lhs = conv2d(&combine(&u, a, &v, b), &params, stride, 1).unwrap();
        let rhs = combine(&conv2d(&u, &params, stride, 1).unwrap(), a, &conv2d(&v, &params, stride, 1).unwrap(), b);
        assert_close(&lhs, &rhs);
    }

    #[test]
    fn fully_connected_is_affine(
        u in vec(-1.0..1.0f64, 3 * 5),
        v in vec(-1.0..1.0f64, 3 * 5),
        w in vec(-1.0..1.0f64, 5 * 4),
        bias in vec(-1.0..1.0f64, 4),
        t in 0.0..1.0f64,
    ) {
        // Affine maps preserve convex combinations.
        let params = LayerParams::new("fc", tensor(&[5, 4], w), tensor(&[4], bias));
        let (u, v) = (tensor(&[3, 5], u), tensor(&[3, 5], v));
        let lhs = fully_connected(&combine(&u, t, &v, 1.0 - t), &params).unwrap();
        let rhs = combine(&fully_connected(&u, &params).unwrap(), t, &fully_connected(&v, &params).unwrap(), 1.0 - t);
        assert_close(&lhs, &rhs);
    }

    #[test]
    fn kl_is_non_negative(mu in vec(-5.0..5.0f64, 1..12), seed in 0u64..1000) {
        let d = mu.len();
        let lv: Vec<f64> = (0..d).map(|i| ((seed as f64 + i as f64) * 0.37).sin() * 4.0).collect();
        let lat = GaussianLatent::new(tensor(&[1, d], mu), tensor(&[1, d], lv)).unwrap();
        prop_assert!(kl_divergence(&lat)[0] >= 0.0);
    }

    #[test]
    fn classification_ignores_translation_and_support_order(
        support in vec(vec(-3.0..3.0f32, 4), 2..10),
        query in vec(-3.0..3.0f32, 4),
        shift in vec(-2.0..2.0f32, 4),
    ) {
        let labelled: Vec<(usize, Vec<f32>)> = support.into_iter().enumerate().collect();
        let expected = brute_force_nn_oracle(std::slice::from_ref(&query), &labelled)[0];
        let set = SupportSet::new(labelled.clone()).unwrap();
        prop_assert_eq!(set.classify(&query).unwrap().0, expected);

        let mut reversed = labelled.clone();
        reversed.reverse();
        prop_assert_eq!(SupportSet::new(reversed).unwrap().classify(&query).unwrap().0, expected);

        // A common shift moves every distance by float rounding only, so
        // compare against the oracle on the shifted inputs.
        let moved = |v: &[f32]| v.iter().zip(&shift).map(|(a, s)| a + s).collect::<Vec<_>>();
        let shifted: Vec<(usize, Vec<f32>)> = labelled.iter().map(|(l, v)| (*l, moved(v))).collect();
        let q = moved(&query);
        let oracle = brute_force_nn_oracle(std::slice::from_ref(&q), &shifted)[0];
        prop_assert_eq!(SupportSet::new(shifted).unwrap().classify(&q).unwrap().0, oracle);
    }

    #[test]
    fn pr_auc_is_invariant_under_distance_scaling(
        items in vec((vec(-1.0..1.0f32, 3), 0usize..3), 2..40),
        query in vec(-1.0..1.0f32, 3),
        scale in prop_oneof![Just(0.5f32), Just(2.0f32), Just(4.0f32)],
    ) {
        prop_assume!(items.iter().any(|(_, l)| *l == 0));
        let gallery = |s: f32| -> Vec<GalleryItem> {
            items
                .iter()
                .enumerate()
                .map(|(id, (e, label))| GalleryItem { id, label: *label, embedding: e.iter().map(|x| x * s).collect() })
                .collect()
        };
        let q: Vec<f32> = query.iter().map(|x| x * scale).collect();
        let base = pr_auc(&retrieve(0, &query, &gallery(1.0)).unwrap()).unwrap();
        let scaled = pr_auc(&retrieve(0, &q, &gallery(scale)).unwrap()).unwrap();
        prop_assert!((0.0..=1.0).contains(&base));
        // Power-of-two scaling is exact in binary floating point.
        prop_assert_eq!(base, scaled);
    }

    #[test]
    fn adam_leaves_parameters_alone_under_zero_gradient(
        w in vec(-1.0..1.0f32, 6),
        b in vec(-1.0..1.0f32, 2),
        steps in 1usize..5,
    ) {
        let mut params = vec![LayerParams::new(
            "l",
            Tensor::from_vec(&[3, 2], w.clone()).unwrap(),
            Tensor::from_vec(&[2], b.clone()).unwrap(),
        )];
        let mut state = AdamState::new(AdamConfig::default());
        for _ in 0..steps {
            adam_step(&mut params, &mut state).unwrap();
        }
        prop_assert_eq!(params[0].weight.data(), &w[..]);
        prop_assert_eq!(params[0].bias.data(), &b[..]);
        prop_assert_eq!(state.step, steps as u64);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn perturbed_images_stay_in_unit_range(seed in 0u64..10_000, class in 0usize..6) {
        let protos = render_prototypes(6, 24, 1).unwrap();
        let mut r = rng::stream(seed, rng::PERTURBATION);
        let params = PerturbationRanges::default().sample(&mut r);
        let img = perturb(&protos[class].1, &params, seed).unwrap();
        prop_assert!(img.in_unit_range());
    }
}
