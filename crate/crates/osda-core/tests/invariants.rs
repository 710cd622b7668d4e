use osda_core::autodiff::leaky_softmax;
use osda_core::rng;
use osda_core::threshold::compute_threshold;
use osda_core::Tensor;
use proptest::prelude::*;

proptest! {
    #[test]
    fn leaky_softmax_mass_stays_below_one(logits in prop::collection::vec(-30.0f64..30.0, 1..12)) {
        let p = leaky_softmax(&logits);
        prop_assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        prop_assert!(p.iter().sum::<f64>() < 1.0);
    }

    #[test]
    fn threshold_lies_in_unit_interval(
        raw in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4), 2..40),
        lambda1 in 0.5f64..=1.0,
        seed in any::<u64>(),
    ) {
        let rows: Vec<Vec<f64>> = raw
            .into_iter()
            .map(|r| {
                let s: f64 = r.iter().sum::<f64>() + 1e-12;
                r.iter().map(|v| v / s).collect()
            })
            .collect();
        let t = Tensor::from_rows(&rows).unwrap();
        let h = compute_threshold(&t, 3, lambda1, &mut rng::stream(seed, 0)).unwrap().h;
        prop_assert!((0.0..=1.0).contains(&h));
    }
}
