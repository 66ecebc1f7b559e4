use hyperedit_core::layerselect::{adaptive_threshold, passing_layers, select_layers};
use proptest::prelude::*;

fn dw_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..10.0, 1..12)
}

proptest! {
    #[test]
    fn raising_lambda_never_adds_layers(dw in dw_strategy(), a in 0.0f64..2.0, b in 0.0f64..2.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let wide = passing_layers(&dw, lo).unwrap();
        let narrow = passing_layers(&dw, hi).unwrap();
        prop_assert!(narrow.iter().all(|l| wide.contains(l)), "{narrow:?} ⊄ {wide:?}");
    }

    #[test]
    fn membership_is_scale_invariant(dw in dw_strategy(), lambda in 0.0f64..1.5, c in prop::sample::select(vec![0.25, 0.5, 2.0, 4.0, 1024.0])) {
        let scaled: Vec<f64> = dw.iter().map(|v| v * c).collect();
        prop_assert_eq!(select_layers(&dw, lambda).unwrap().layers, select_layers(&scaled, lambda).unwrap().layers);
    }

    #[test]
    fn threshold_at_least_mean(dw in dw_strategy(), lambda in 0.0f64..3.0) {
        let mean = dw.iter().sum::<f64>() / dw.len() as f64;
        prop_assert!(adaptive_threshold(&dw, lambda).unwrap() >= mean - 1e-12);
    }

    #[test]
    fn selection_is_nonempty_ascending_and_valid(dw in dw_strategy(), lambda in 0.0f64..5.0) {
        let s = select_layers(&dw, lambda).unwrap();
        prop_assert!(!s.layers.is_empty());
        prop_assert!(s.layers.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(s.layers.iter().all(|&l| l >= 1 && l <= dw.len()));
    }
}
