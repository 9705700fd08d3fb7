use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use stratopt::cohort::PatientRecord;
use stratopt::matcher::{match_cohort, solve_assignment};

fn permutations_into(rows: usize, cols: usize) -> Vec<Vec<usize>> {
    fn go(rows: usize, cols: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == rows {
            out.push(cur.clone());
            return;
        }
        for c in 0..cols {
            if !cur.contains(&c) {
                cur.push(c);
                go(rows, cols, cur, out);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    go(rows, cols, &mut Vec::new(), &mut out);
    out
}

fn brute_force(cost: &[Vec<f64>]) -> f64 {
    let cols = cost[0].len();
    permutations_into(cost.len(), cols)
        .iter()
        .map(|p| p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

fn objective(cost: &[Vec<f64>], a: &[usize]) -> f64 {
    a.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
}

fn cost_matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..6, 0usize..3).prop_flat_map(|(n, extra)| {
        prop::collection::vec(prop::collection::vec(0.0f64..10.0, n + extra), n)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn assignment_is_optimal(cost in cost_matrix()) {
        let a = solve_assignment(&cost);
        prop_assert_eq!(a.len(), cost.len());
        let distinct: BTreeSet<usize> = a.iter().copied().collect();
        prop_assert_eq!(distinct.len(), a.len());
        let best = brute_force(&cost);
        prop_assert!((objective(&cost, &a) - best).abs() <= 1e-9 * (1.0 + best));
    }

    #[test]
    fn assignment_ignores_scale_and_row_offsets(cost in cost_matrix(), scale in 0.1f64..50.0, shift in 0.0f64..5.0) {
        let a = solve_assignment(&cost);
        let transformed: Vec<Vec<f64>> = cost
            .iter()
            .enumerate()
            .map(|(i, row)| row.iter().map(|c| c * scale + shift * i as f64).collect())
            .collect();
        let b = solve_assignment(&transformed);
        let want = objective(&cost, &a);
        prop_assert!((objective(&cost, &b) - want).abs() <= 1e-7 * (1.0 + want));
    }

    #[test]
    fn matched_buckets_are_balanced(
        rows in prop::collection::vec((1usize..4, any::<bool>(), -2.0f64..2.0, -2.0f64..2.0), 2..40),
    ) {
        let records: Vec<PatientRecord> = rows
            .iter()
            .enumerate()
            .map(|(i, &(_, t, a, b))| PatientRecord { id: format!("r{i:02}"), covariates: vec![a, b], treated: t, event: false })
            .collect();
        let buckets: Vec<usize> = rows.iter().map(|r| r.0).collect();
        let Ok(m) = match_cohort(&records, &buckets) else {
            // Only possible when no bucket holds both arms.
            let mut arms: BTreeMap<usize, (bool, bool)> = BTreeMap::new();
            for (r, &b) in records.iter().zip(&buckets) {
                let e = arms.entry(b).or_default();
                if r.treated { e.1 = true } else { e.0 = true }
            }
            prop_assert!(arms.values().all(|&(u, t)| !(u && t)));
            return Ok(());
        };
        let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for (r, &b) in m.records.iter().zip(&m.buckets) {
            let e = counts.entry(b).or_default();
            if r.treated { e.1 += 1 } else { e.0 += 1 }
        }
        for (b, (u, t)) in counts {
            prop_assert_eq!(u, t, "bucket {} unbalanced", b);
        }
        let ids: BTreeSet<&str> = m.records.iter().map(|r| r.id.as_str()).collect();
        prop_assert_eq!(ids.len(), m.records.len());
        for plan in &m.plans {
            for (a, b) in &plan.pairs {
                prop_assert!(ids.contains(a.as_str()) && ids.contains(b.as_str()));
            }
        }
    }
}
