use proptest::prelude::*;
use stratopt::counterfactual::{escalate_with, Termination};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    /// With a treated-arm mean that falls as the weight grows, the loop walks
    /// the grid `1 + k * epsilon` and stops at the first balanced weight.
    #[test]
    fn escalation_stops_at_first_balanced_weight(
        w0 in 0.05f64..0.6,
        gap in -0.2f64..0.4,
        slope in 0.0f64..0.3,
        epsilon in 0.05f64..0.5,
        cap in 1.0f64..4.0,
    ) {
        let w1 = |rho: f64| w0 + gap - slope * (rho - 1.0);
        let (_, trace) = escalate_with(epsilon, cap, |rho| Ok(((), w0, w1(rho)))).unwrap();
        for (k, s) in trace.steps.iter().enumerate() {
            prop_assert!((s.rho - (1.0 + k as f64 * epsilon)).abs() < 1e-8);
            prop_assert!(s.rho <= cap + 1e-9);
        }
        for s in &trace.steps[..trace.steps.len() - 1] {
            prop_assert!(s.w_hat_1 > s.w_hat_0);
        }
        prop_assert_eq!(trace.increases(0.0), 0);
        let last = trace.steps.last().unwrap();
        prop_assert_eq!(trace.terminal_rho, last.rho);
        match trace.reason {
            Termination::AlreadyBalanced => prop_assert_eq!(trace.steps.len(), 1),
            Termination::Converged => prop_assert!(last.w_hat_1 <= last.w_hat_0),
            Termination::RhoCap => {
                prop_assert!(last.w_hat_1 > last.w_hat_0);
                prop_assert!(last.rho + epsilon > cap + 1e-9);
            }
            Termination::Fixed => prop_assert!(false, "escalation never reports fixed"),
        }
    }
}

#[test]
fn invalid_parameters_rejected() {
    assert!(escalate_with(0.0, 4.0, |_| Ok(((), 0.1, 0.2))).is_err());
    assert!(escalate_with(0.1, 0.5, |_| Ok(((), 0.1, 0.2))).is_err());
}
