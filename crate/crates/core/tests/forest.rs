use proptest::prelude::*;
use stratopt::risk_forest::{auc_scores, Forest, ForestConfig, TrainingArm};

fn small_config(seed: u64) -> ForestConfig {
    ForestConfig {
        n_trees: 15,
        max_depth: 4,
        min_leaf: 2,
        features_per_split: None,
        seed,
    }
}

fn dataset() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<bool>)> {
    (8usize..40, 1usize..4).prop_flat_map(|(n, d)| {
        (
            prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_filter("both classes present", |(_, y)| y.iter().any(|&v| v) && y.iter().any(|&v| !v))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn predictions_are_probabilities((x, y) in dataset(), seed in any::<u64>()) {
        let f = Forest::train(&x, &y, None, &small_config(seed), TrainingArm::Baseline).unwrap();
        for row in &x {
            let p = f.predict_proba(row).unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn same_seed_same_forest((x, y) in dataset(), seed in any::<u64>()) {
        let a = Forest::train(&x, &y, None, &small_config(seed), TrainingArm::Baseline).unwrap();
        let b = Forest::train(&x, &y, None, &small_config(seed), TrainingArm::Baseline).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn uniform_weights_change_nothing((x, y) in dataset(), seed in any::<u64>()) {
        let config = small_config(seed);
        let plain = Forest::train(&x, &y, None, &config, TrainingArm::Treated).unwrap();
        let ones = vec![1.0; x.len()];
        let weighted = Forest::train(&x, &y, Some(&ones), &config, TrainingArm::Treated).unwrap();
        prop_assert_eq!(plain.predict_many(&x).unwrap(), weighted.predict_many(&x).unwrap());
    }

    #[test]
    fn heavier_negatives_lower_unsplit_trees((x, y) in dataset(), seed in any::<u64>(), rho in 1.0f64..5.0) {
        // With constant features no tree can split, so each predicts the
        // weighted event share of its bootstrap sample, which can only fall
        // as negatives gain weight.
        let flat = vec![vec![0.0; x[0].len()]; x.len()];
        let config = small_config(seed);
        let base = Forest::train(&flat, &y, None, &config, TrainingArm::Treated).unwrap();
        let w: Vec<f64> = y.iter().map(|&e| if e { 1.0 } else { rho }).collect();
        let heavy = Forest::train(&flat, &y, Some(&w), &config, TrainingArm::Treated).unwrap();
        let p0 = base.predict_proba(&flat[0]).unwrap();
        let p1 = heavy.predict_proba(&flat[0]).unwrap();
        prop_assert!(p1 <= p0 + 1e-12);
    }

    #[test]
    fn auc_is_rank_based(scores in prop::collection::vec(0.0f64..1.0, 2..30), labels in prop::collection::vec(any::<bool>(), 30)) {
        let labels = &labels[..scores.len()];
        prop_assume!(labels.iter().any(|&v| v) && labels.iter().any(|&v| !v));
        let a = auc_scores(&scores, labels).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|s| s.powi(3)).collect();
        let b = auc_scores(&squashed, labels).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        let c = auc_scores(&flipped, labels).unwrap();
        prop_assert!((a + c - 1.0).abs() < 1e-12);
    }
}

#[test]
fn wrong_dimension_is_an_error() {
    let x = vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]];
    let y = vec![false, true, false, true];
    let f = Forest::train(&x, &y, None, &small_config(1), TrainingArm::Baseline).unwrap();
    assert!(f.predict_proba(&[0.0, 1.0]).is_err());
}
