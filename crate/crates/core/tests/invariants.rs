use proptest::prelude::*;

use cnfem_core::checks::{pincers_state, perturbed, two_box_overlap};
use cnfem_core::diagnostics::near_self_contact_set;
use cnfem_core::penalty::{energy_cn_accelerated, energy_cn_full};
use cnfem_core::PenaltyParams;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn near_contact_sets_are_nested(seed in 0u64..1000, s1 in 0.0f64..0.5, ds in 0.0f64..0.5, a in 1.0f64..1.2) {
        let state = perturbed(&pincers_state(15, 9, a).unwrap(), 0.02, seed).unwrap();
        let small = near_self_contact_set(&state, s1, 0.5).unwrap();
        let large = near_self_contact_set(&state, s1 + ds, 0.5).unwrap();
        prop_assert!(small.iter().zip(&large).all(|(p, c)| !p || *c));
    }

    #[test]
    fn evaluators_agree_on_overlaps(depth in 0.0f64..0.4, eps2 in 0.25f64..0.6, beta in 1.0f64..2.5) {
        let state = two_box_overlap(8, 4, 8, depth).unwrap();
        let p = PenaltyParams { eps2, beta, ..PenaltyParams::default() };
        let full = energy_cn_full(&state, &p).unwrap().0;
        let fast = energy_cn_accelerated(&state, &p).unwrap().0;
        prop_assert!(full >= 0.0);
        prop_assert!((full - fast).abs() <= 1e-12 * full.abs().max(1.0));
    }
}
