use stratopt::synthgen::{generate, planted_policy, Assignment, SynthConfig};

#[test]
fn randomized_assignment_is_balanced() {
    let config = SynthConfig {
        n: 4000,
        assignment: Assignment::Rct,
        seed: 11,
        ..SynthConfig::default()
    };
    let (cohort, _) = generate(&config).unwrap();
    let (untreated, treated) = cohort.arm_counts();
    let share = treated as f64 / (treated + untreated) as f64;
    assert!((share - 0.5).abs() < 0.03, "treated share {share}");
}

#[test]
fn imbalanced_band_is_overtreated() {
    let config = SynthConfig {
        n: 6000,
        hidden_effect: 0.0,
        assignment: Assignment::rct_imbalanced(),
        seed: 5,
        ..SynthConfig::default()
    };
    let (cohort, truth) = generate(&config).unwrap();
    let (mut inside, mut inside_t, mut outside, mut outside_t) = (0, 0, 0, 0);
    for (r, t) in cohort.records.iter().zip(&truth.rows) {
        if t.baseline_risk >= 0.5 {
            inside += 1;
            inside_t += usize::from(r.treated);
        } else {
            outside += 1;
            outside_t += usize::from(r.treated);
        }
    }
    let a = inside_t as f64 / inside as f64;
    let b = outside_t as f64 / outside as f64;
    assert!((a - 0.8).abs() < 0.05, "band share {a}");
    assert!((b - 0.5).abs() < 0.05, "outside share {b}");
}

#[test]
fn observed_event_rates_track_truth() {
    let config = SynthConfig {
        n: 8000,
        assignment: Assignment::Rct,
        seed: 2,
        ..SynthConfig::default()
    };
    let (cohort, truth) = generate(&config).unwrap();
    for arm in [false, true] {
        let (mut events, mut expected, mut n) = (0.0, 0.0, 0.0);
        for (r, t) in cohort.records.iter().zip(&truth.rows) {
            if r.treated == arm {
                events += f64::from(u8::from(r.event));
                expected += if arm { t.treated_risk } else { t.baseline_risk };
                n += 1.0;
            }
        }
        assert!(((events - expected) / n).abs() < 0.025, "arm {arm}");
    }
}

#[test]
fn optimal_action_follows_the_planted_rule() {
    let config = SynthConfig {
        n: 500,
        harm_size: 0.0,
        benefit_size: 0.2,
        seed: 8,
        ..SynthConfig::default()
    };
    let (cohort, truth) = generate(&config).unwrap();
    let policy = stratopt::policy_tree::PolicyTree {
        feature_names: stratopt::synthgen::covariate_names(config.d),
        root: planted_policy(),
    };
    for (r, t) in cohort.records.iter().zip(&truth.rows) {
        let planted = policy.prescribe(&r.covariates).unwrap();
        // Strict benefit requires positive baseline risk to remove.
        assert_eq!(t.optimal_action, planted && t.baseline_risk > 0.0);
    }
}
