use commcost::commodel::{geometric_grid, Region, TimeModelParams, DEFAULT_RHO};
use commcost::rng::Stream;
use commcost::SeedKey;
use proptest::prelude::*;

fn params() -> impl Strategy<Value = TimeModelParams> {
    (1e-7f64..1e-1, 1e-12f64..1e-6).prop_map(|(a, b)| TimeModelParams::deterministic(a, b).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn eta_between_one_and_its_limits(p in params(), s in 1.0f64..1e10, omega in 1.0f64..1e6) {
        let eta = p.eta(s, omega).unwrap();
        let bound = omega.min(1.0 + p.beta_const * s / p.alpha_const);
        prop_assert!(eta >= 1.0 - 1e-12);
        prop_assert!(eta <= bound * (1.0 + 1e-12));
    }

    #[test]
    fn eta_nondecreasing_in_omega(p in params(), s in 1.0f64..1e10, w1 in 1.0f64..1e4, w2 in 1.0f64..1e4) {
        let (lo, hi) = if w1 <= w2 { (w1, w2) } else { (w2, w1) };
        prop_assert!(p.eta(s, lo).unwrap() <= p.eta(s, hi).unwrap() * (1.0 + 1e-15));
    }

    #[test]
    fn region_nondecreasing_in_size(p in params(), s1 in 1.0f64..1e10, s2 in 1.0f64..1e10) {
        let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
        prop_assert!(p.classify_region(lo, DEFAULT_RHO) <= p.classify_region(hi, DEFAULT_RHO));
    }

    #[test]
    fn compression_never_raises_region(p in params(), s in 1.0f64..1e10, omega in 1.0f64..1e6) {
        let report = p.transition_report(s, &[omega], DEFAULT_RHO).unwrap();
        let row = &report.rows[0];
        prop_assert!(row.region_to <= row.region_from);
        prop_assert_eq!(row.expected_time_s, p.expected_time(s / omega));
    }
}

#[test]
fn eta_limits() {
    let bandwidth_only = TimeModelParams::deterministic(0.0, 3e-9).unwrap();
    let latency_only = TimeModelParams::deterministic(2e-3, 0.0).unwrap();
    for omega in [1.0, 2.0, 7.5, 1e3] {
        assert_eq!(bandwidth_only.eta(1e6, omega).unwrap(), omega);
        assert_eq!(latency_only.eta(1e6, omega).unwrap(), 1.0);
    }
    assert_eq!(bandwidth_only.eta(1e6, f64::INFINITY).unwrap(), f64::INFINITY);
}

#[test]
fn eta_rejects_invalid_inputs() {
    let p = TimeModelParams::deterministic(1e-3, 1e-9).unwrap();
    assert!(p.eta(0.0, 2.0).is_err());
    assert!(p.eta(-1.0, 2.0).is_err());
    assert!(p.eta(1e3, 0.5).is_err());
    assert!(p.eta(1e3, f64::NAN).is_err());
    assert!(TimeModelParams::deterministic(0.0, 0.0).is_err());
    assert!(TimeModelParams::new(1e-3, 1e-9, -0.1, 0.0).is_err());
}

#[test]
fn speedup_curve_saturates() {
    let p = TimeModelParams::deterministic(1e-4, 1e-9).unwrap();
    let s = 1e7;
    let ratio = p.beta_const * s / p.alpha_const;
    let grid = geometric_grid(1.0, 1e9, 200);
    let curve = p.speedup_curve(s, &grid, DEFAULT_RHO).unwrap();
    let ceiling = p.expected_time(s) / p.alpha_const;
    for row in &curve.rows {
        assert!(row.speedup <= ceiling);
        if row.omega >= 1e4 * ratio {
            assert!((row.speedup - ceiling).abs() / ceiling < 1e-3);
        }
    }
    assert!(curve.rows.windows(2).all(|w| w[0].speedup <= w[1].speedup));
}

#[test]
fn unsorted_grid_is_rejected() {
    let p = TimeModelParams::deterministic(1e-4, 1e-9).unwrap();
    assert!(p.speedup_curve(1e6, &[1.0, 10.0, 5.0], DEFAULT_RHO).is_err());
    assert!(p.transition_report(1e6, &[2.0], 1.0).is_err());
}

#[test]
fn regions_on_a_size_sweep() {
    let p = TimeModelParams::deterministic(1e-3, 1e-9).unwrap();
    // break-even size alpha / beta = 1e6 bits
    assert_eq!(p.classify_region(1e4, 10.0), Region::Area1AlphaDominated);
    assert_eq!(p.classify_region(1e6, 10.0), Region::Area2Mixed);
    assert_eq!(p.classify_region(1e8, 10.0), Region::Area3BetaDominated);
}

#[test]
fn sampled_time_moments() {
    let p = TimeModelParams::new(1e-3, 1e-9, 0.1, 0.2).unwrap();
    let s = 4e6;
    let trials = 40_000;
    let mut rng = SeedKey::from_seed(99).rng(Stream::Synth);
    let draws: Vec<f64> = (0..trials).map(|_| p.sample_time(s, &mut rng)).collect();
    let mean = draws.iter().sum::<f64>() / trials as f64;
    let var = draws.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
    let sd = p.time_variance(s).sqrt();
    assert!((mean - p.expected_time(s)).abs() < 4.0 * sd / (trials as f64).sqrt());
    // variance of the sample variance for a normal is 2 sigma^4 / (n - 1)
    let var_se = (2.0 / (trials - 1) as f64).sqrt() * p.time_variance(s);
    assert!((var - p.time_variance(s)).abs() < 4.0 * var_se);
}

#[test]
fn sampled_time_stays_positive() {
    let p = TimeModelParams::new(1e-6, 1e-12, 50.0, 50.0).unwrap();
    for seed in 0..2000 {
        assert!(p.sample_time_keyed(10.0, SeedKey::from_seed(seed)) > 0.0);
    }
}

#[test]
fn noiseless_sampling_is_the_expectation() {
    let p = TimeModelParams::deterministic(2e-4, 3e-9).unwrap();
    for s in [1.0, 1e3, 1e9] {
        assert_eq!(p.sample_time_keyed(s, SeedKey::from_seed(1)), p.expected_time(s));
    }
}
