use proptest::prelude::*;
use rand::Rng;

use tightci::design::{compute_layout, draw_mbcr, Assignment, DesignError};
use tightci::estimator::{ht_mbcr, ht_standard, ObservedData};
use tightci::interval::{
    gamma_b, gamma_e, hoeff_mbcr_ci, studentized_ci, sub_bernoulli_bern_ci, sub_bernoulli_mbcr_ci,
    Interval, LambdaRule, ScaleRule,
};
use tightci::rng::seeded;

/// Independent statement of which pairs have no usable final group.
fn expect_rejected(n: usize, n1: usize) -> bool {
    let g = n.div_ceil(n1);
    !n.is_multiple_of(n1) && n1 * g - n >= 2 * g - 2
}

fn check_layout(n: usize, n1: usize, full: bool) {
    match compute_layout(n, n1) {
        Ok(l) => {
            assert!(!expect_rejected(n, n1), "({n}, {n1}) accepted");
            assert_eq!(l.full_groups() * l.group_size() + l.final_size(), n);
            assert_eq!(l.full_groups() + l.final_treated(), n1);
            assert!(l.final_treated() <= 2);
            if l.final_treated() > 0 {
                assert!(l.final_size() >= 2 && l.final_size() > l.final_treated());
            } else {
                assert_eq!(l.final_size(), 0);
            }
            if full {
                assert_eq!(l.allocation().iter().filter(|&&b| b).count(), n1);
                let covered: usize = (0..l.group_count())
                    .map(|t| l.group_positions(t).len())
                    .sum();
                assert_eq!(covered, n);
            }
        }
        Err(DesignError::UnsupportedLayout { .. }) => {
            assert!(expect_rejected(n, n1), "({n}, {n1}) rejected");
        }
        Err(e) => panic!("({n}, {n1}): {e}"),
    }
}

#[test]
fn layout_sweep_up_to_ten_thousand() {
    let mut rejected = 0usize;
    for n in 2..=10_000 {
        for n1 in 1..=n / 2 {
            check_layout(n, n1, n <= 300);
            rejected += usize::from(expect_rejected(n, n1));
        }
    }
    assert!(rejected > 0);
    assert!(compute_layout(13, 6).is_err());
    assert!(compute_layout(11, 5).is_err());
    assert!(compute_layout(1000, 100).unwrap().is_exact());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn layout_allocation_at_random_sizes(n in 2usize..=10_000, frac in 0.0f64..1.0) {
        let n1 = 1 + ((n / 2 - 1) as f64 * frac) as usize;
        check_layout(n, n1, true);
    }
}

proptest! {
    #[test]
    fn gamma_b_obeys_hoeffding_lemma(lambda in -5.0f64..5.0, a in -10.0f64..-0.01, b in 0.01f64..10.0) {
        let v = gamma_b(lambda, a, b).unwrap();
        let cap = lambda * lambda * (b - a) * (b - a) / 8.0;
        prop_assert!(v >= -1e-12);
        prop_assert!(v <= cap * (1.0 + 1e-9) + 1e-12);
    }

    #[test]
    fn gamma_e_dominates_quadratic(c in 0.1f64..10.0, frac in 0.0001f64..0.999) {
        let lambda = frac / c;
        let v = gamma_e(lambda, c).unwrap();
        let direct = (-(1.0 - c * lambda).ln() - c * lambda) / (c * c);
        prop_assert!(v >= lambda * lambda / 2.0 * (1.0 - 1e-12));
        prop_assert!((v - direct).abs() <= 1e-9 * direct.max(1e-300) + 1e-15);
    }

    #[test]
    fn closed_form_intervals_round_trip(psi in -1.0f64..1.0, k in 2usize..200, m in 1usize..50, alpha in 0.001f64..0.5) {
        let n = k * m * 4;
        let n1 = m * 4;
        let layout = compute_layout(n, n1).unwrap();
        let cis = [
            hoeff_mbcr_ci(psi, &layout, alpha).unwrap(),
            sub_bernoulli_mbcr_ci(psi, &layout, alpha, LambdaRule::Appendix).unwrap(),
            sub_bernoulli_bern_ci(psi, n, layout.pi(), alpha).unwrap(),
        ];
        for ci in cis {
            prop_assert!(ci.lower <= psi && psi <= ci.upper);
            prop_assert!(((ci.upper - psi) - (psi - ci.lower)).abs() <= 1e-12);
            let text = serde_json::to_string(&ci).unwrap();
            let back: Interval = serde_json::from_str(&text).unwrap();
            let again = back.reevaluate();
            prop_assert_eq!(again.lower.to_bits(), ci.lower.to_bits());
            prop_assert_eq!(again.upper.to_bits(), ci.upper.to_bits());
        }
    }

    #[test]
    fn mbcr_estimate_matches_direct_sum(n in 8usize..300, frac in 0.0f64..1.0, seed in any::<u64>()) {
        let n1 = 1 + ((n / 2 - 1) as f64 * frac) as usize;
        prop_assume!(compute_layout(n, n1).is_ok());
        let layout = compute_layout(n, n1).unwrap();
        let mut rng = seeded(seed);
        let assignment = draw_mbcr(&layout, &mut rng);
        prop_assert_eq!(assignment.n1(), n1);
        let y: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let detail = assignment.mbcr_detail().unwrap().clone();
        let mut direct = 0.0;
        for (j, &yj) in y.iter().enumerate() {
            let pos = detail.eta()[j];
            let p = layout.group_propensity(layout.group_of_position(pos));
            let z = layout.allocation()[detail.beta()[pos]];
            prop_assert_eq!(z, assignment.z()[j]);
            direct += if z { yj / p } else { -yj / (1.0 - p) };
        }
        direct /= n as f64;
        let data = ObservedData::new(y, assignment).unwrap();
        prop_assert!((ht_mbcr(&data).unwrap() - direct).abs() <= 1e-9);
        if layout.is_exact() {
            prop_assert!((ht_standard(&data, layout.pi()).unwrap() - direct).abs() <= 1e-9);
        }
    }

    #[test]
    fn studentized_interval_is_ordered(m in 4usize..40, g in 2usize..12, seed in any::<u64>()) {
        let layout = compute_layout(m * g, m).unwrap();
        let mut rng = seeded(seed);
        let assignment = draw_mbcr(&layout, &mut rng);
        let y: Vec<f64> = (0..m * g).map(|_| rng.gen()).collect();
        let data = ObservedData::new(y, assignment).unwrap();
        let ci = studentized_ci(&data, 0.05, ScaleRule::Corrected).unwrap();
        prop_assert!(ci.lower < ci.upper);
        prop_assert!(ci.lower.is_finite() && ci.upper.is_finite());
        let back = ci.reevaluate();
        prop_assert_eq!(back.lower.to_bits(), ci.lower.to_bits());
    }

    #[test]
    fn bernoulli_assignment_keeps_its_propensity(bits in proptest::collection::vec(any::<bool>(), 1..200), pi in 0.01f64..0.5) {
        let a = Assignment::bernoulli(bits.clone(), pi).unwrap();
        prop_assert_eq!(a.pi(), pi);
        prop_assert_eq!(a.n1(), bits.iter().filter(|&&b| b).count());
    }
}
