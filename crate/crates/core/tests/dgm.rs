use imtk::dgm::{scenario_params, simulate_cohort, simulate_truth};
use imtk::{risk_set, validate_panel, Strategy};
use proptest::prelude::*;

#[test]
fn scenario_table_entries() {
    let s1 = scenario_params(1).unwrap();
    assert_eq!(
        (
            s1.outcome.intercept,
            s1.treatment.prev_monitoring,
            s1.monitoring.intercept
        ),
        (-0.7, 1.2, -2.0)
    );
    let s3 = scenario_params(3).unwrap();
    assert_eq!(
        (
            s3.monitoring.intercept,
            s3.monitoring.covariate,
            s3.monitoring.treatment,
            s3.monitoring.prev_monitoring
        ),
        (-0.7, 0.0, 0.0, 0.0)
    );
    let mut s5 = scenario_params(5).unwrap();
    assert_eq!(s5.treatment.prev_monitoring, 0.0);
    s5.treatment.prev_monitoring = 1.2;
    assert_eq!(s5, s1);
    assert!(scenario_params(6).is_err());
}

#[test]
fn observed_survival_at_time_one() {
    let panel = simulate_cohort(&scenario_params(1).unwrap(), 3000, 61).unwrap();
    let s = risk_set(&panel, 1).unwrap().len() as f64 / 3000.0;
    assert!((0.66..=0.72).contains(&s), "{s}");
}

#[test]
fn scenario_two_always_treat_time_one() {
    let t = simulate_truth(
        &scenario_params(2).unwrap(),
        &Strategy::AlwaysTreat,
        1_000_000,
        62,
    )
    .unwrap();
    let v = t.curve.at(1).unwrap();
    assert!((v - 0.716683).abs() <= 0.002, "{v}");
}

#[test]
fn cohorts_are_reproducible() {
    let p = scenario_params(4).unwrap();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    simulate_cohort(&p, 500, 63)
        .unwrap()
        .write_csv(&mut a)
        .unwrap();
    simulate_cohort(&p, 500, 63)
        .unwrap()
        .write_csv(&mut b)
        .unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn simulated_panels_are_valid(scenario in 1u8..=5, seed in any::<u64>()) {
        let panel = simulate_cohort(&scenario_params(scenario).unwrap(), 300, seed).unwrap();
        prop_assert!(validate_panel(&panel).is_empty());
    }

    #[test]
    fn treat_early_shares_the_always_prefix(seed in any::<u64>()) {
        let p = scenario_params(1).unwrap();
        let always = simulate_truth(&p, &Strategy::AlwaysTreat, 2000, seed).unwrap();
        let early = simulate_truth(&p, &Strategy::TREAT_EARLY, 2000, seed).unwrap();
        for t in 1..=3 {
            prop_assert_eq!(always.curve.at(t), early.curve.at(t));
        }
    }
}
