use proptest::prelude::*;
use stratopt::cohort::PatientRecord;
use stratopt::strata::{assign_buckets, diagnose, oversample, rebalance, BucketSpec};

fn records(arms: &[bool]) -> Vec<PatientRecord> {
    arms.iter()
        .enumerate()
        .map(|(i, &t)| PatientRecord {
            id: format!("r{i}"),
            covariates: vec![i as f64],
            treated: t,
            event: i % 3 == 0,
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn every_risk_lands_in_its_bucket(risks in prop::collection::vec(0.0f64..=1.0, 1..50), m in 1usize..10) {
        let spec = BucketSpec::equal_width(m).unwrap();
        let buckets = assign_buckets(&risks, &spec).unwrap();
        for (&r, &b) in risks.iter().zip(&buckets) {
            let (lo, hi) = spec.bounds(b);
            prop_assert!(lo <= r && (r < hi || (b == m && r == hi)));
        }
    }

    #[test]
    fn oversampled_bucket_is_balanced(arms in prop::collection::vec(any::<bool>(), 2..40), extra in 0usize..5, seed in any::<u64>()) {
        prop_assume!(arms.iter().any(|&t| t) && arms.iter().any(|&t| !t));
        let recs = records(&arms);
        let largest = arms.iter().filter(|&&t| t).count().max(arms.iter().filter(|&&t| !t).count());
        let out = oversample(&recs, largest + extra, seed).unwrap();
        prop_assert_eq!(&out[..recs.len()], &recs[..]);
        let spec = BucketSpec::equal_width(1).unwrap();
        let report = diagnose(&out, &vec![1; out.len()], &spec, 1.0).unwrap();
        prop_assert!(report.flagged().is_empty());
        prop_assert_eq!(report.buckets[0].treated, largest + extra);
        prop_assert_eq!(report.buckets[0].untreated, largest + extra);
    }

    #[test]
    fn rebalancing_clears_every_flag(
        rows in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 4..80),
        threshold in 1.0f64..3.0,
        seed in any::<u64>(),
    ) {
        let arms: Vec<bool> = rows.iter().map(|r| r.1).collect();
        let risks: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let recs = records(&arms);
        let spec = BucketSpec::risk_bands();
        let Ok(r) = rebalance(&recs, &risks, &spec, threshold, seed) else {
            return Ok(());
        };
        prop_assert!(r.after.flagged().is_empty(), "flags left: {:?}", r.after.flagged());
        prop_assert_eq!(r.records.len(), r.buckets.len());
        prop_assert_eq!(r.records.len(), r.risks.len());
        for &b in &r.buckets {
            prop_assert!(!r.dropped.contains(&b));
        }
    }
}
