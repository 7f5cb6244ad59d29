use proptest::prelude::*;

use scnn_core::canonical::{evaluate, max2, max_n, tightness, weighted_sum, CanonicalForm};
use scnn_core::layers::{LayerSpec, Network};
use scnn_core::tensor::{CanonicalTensor, Shape};

fn form(m: usize) -> impl Strategy<Value = CanonicalForm> {
    (-5.0..5.0f64, prop::collection::vec(-3.0..3.0f64, m), 0.0..2.0f64)
        .prop_map(|(mu, s, r)| CanonicalForm::new(mu, s, r).unwrap())
}

fn pair() -> impl Strategy<Value = (CanonicalForm, CanonicalForm)> {
    (0usize..=6).prop_flat_map(|m| (form(m), form(m)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn max_and_sum_stay_in_the_family((a, b) in pair(), w in -3.0..3.0f64) {
        let (c, t) = max2(&a, &b).unwrap();
        prop_assert_eq!(c.dim(), a.dim());
        prop_assert!((0.0..=1.0).contains(&t));
        let s = weighted_sum(&[a.clone(), b], &[w, 1.0 - w]).unwrap();
        prop_assert_eq!(s.dim(), a.dim());
        prop_assert!(c.params().iter().chain(&s.params()).all(|v| v.is_finite()));
        prop_assert!(c.noise() >= 0.0 && s.noise() >= 0.0);
    }

    #[test]
    fn tightness_complement((a, b) in pair()) {
        let t = tightness(&a, &b).unwrap() + tightness(&b, &a).unwrap();
        prop_assert!((t - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn max_is_idempotent(a in (0usize..=6).prop_flat_map(form)) {
        let (c, t) = max2(&a, &a).unwrap();
        prop_assert_eq!(c, a);
        prop_assert_eq!(t, 0.5);
    }

    #[test]
    fn max_commutes((a, b) in pair()) {
        let (p, _) = max2(&a, &b).unwrap();
        let (q, _) = max2(&b, &a).unwrap();
        for (u, v) in p.params().iter().zip(q.params()) {
            prop_assert!((u - v).abs() <= 1e-9 * (1.0 + u.abs()));
        }
    }

    #[test]
    fn max_dominates_means((a, b) in pair()) {
        let (c, _) = max2(&a, &b).unwrap();
        prop_assert!(c.mean() >= a.mean().max(b.mean()) - 1e-9);
    }

    #[test]
    fn max_variance_is_bounded_by_sources((a, b) in pair()) {
        // the max of two Gaussians never has more variance than the larger one
        let (c, _) = max2(&a, &b).unwrap();
        prop_assert!(c.variance() <= a.variance().max(b.variance()) * (1.0 + 1e-9) + 1e-12);
    }

    #[test]
    fn evaluate_is_linear(
        (a, b, x) in (0usize..=6).prop_flat_map(|m| (form(m), form(m), prop::collection::vec(-3.0..3.0f64, m))),
        w in prop::array::uniform2(-3.0..3.0f64),
    ) {
        let s = weighted_sum(&[a.clone(), b.clone()], &w).unwrap();
        let lhs = evaluate(&s, &x).unwrap();
        let rhs = w[0] * evaluate(&a, &x).unwrap() + w[1] * evaluate(&b, &x).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
    }

    #[test]
    fn max_n_chain_is_a_probability(ds in (1usize..=4).prop_flat_map(|m| prop::collection::vec(form(m), 1..6))) {
        let (out, chain) = max_n(&ds).unwrap();
        prop_assert_eq!(chain.len(), ds.len() - 1);
        prop_assert!(chain.iter().all(|t| (0.0..=1.0).contains(t)));
        prop_assert!(out.noise() >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn layer_stack_keeps_noise_non_negative(
        seed in any::<u64>(),
        vals in prop::collection::vec((-2.0..2.0f64, -1.0..1.0f64, -1.0..1.0f64, 0.0..1.0f64), 2 * 6 * 6),
    ) {
        let net = Network::init(
            Shape::new(2, 6, 6),
            &[
                LayerSpec::Conv { out_channels: 3, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::MaxPool { kernel: 2, stride: 2 },
                LayerSpec::Fc { out_features: 5 },
            ],
            seed,
        )
        .unwrap();
        let forms: Vec<CanonicalForm> = vals
            .iter()
            .map(|&(mu, s0, s1, r)| CanonicalForm::new(mu, vec![s0, s1], r).unwrap())
            .collect();
        let x = CanonicalTensor::from_forms(Shape::new(2, 6, 6), &forms).unwrap();
        let trace = net.forward(&x).unwrap();
        for t in &trace.activations {
            prop_assert!(t.noise_plane().iter().all(|&r| r >= 0.0 && r.is_finite()));
            prop_assert!(t.data().iter().all(|v| v.is_finite()));
        }
    }
}
