use commcost::commodel::TimeModelParams;
use commcost::estimator::{
    batch_ls, propose_next_size, read_fit_trace, read_samples_csv, size_grid, write_fit_trace, EstimatorState,
    FitResult, SizePolicy,
};
use commcost::rng::Stream;
use commcost::SeedKey;
use proptest::prelude::*;
use rand::Rng;

const P_MAX: f64 = 8.0 * 1_048_576.0;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn online(points: &[(f64, f64)]) -> FitResult {
    let mut st = EstimatorState::new(P_MAX).unwrap();
    for &(x, y) in points {
        st.push(x, y).unwrap();
    }
    st.fit().unwrap()
}

fn stream() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((1.0f64..P_MAX, 1e-6f64..1.0), 3..200)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn online_matches_batch(points in stream()) {
        let a = online(&points);
        let b = batch_ls(&points).unwrap();
        prop_assert!(rel(a.beta_hat, b.beta_hat) < 1e-9 || (a.beta_hat - b.beta_hat).abs() < 1e-18);
        prop_assert!(rel(a.alpha_hat, b.alpha_hat) < 1e-9 || (a.alpha_hat - b.alpha_hat).abs() < 1e-12);
    }

    #[test]
    fn order_does_not_matter(mut points in stream(), seed in any::<u64>()) {
        let a = online(&points);
        let mut rng = SeedKey::from_seed(seed).rng(Stream::Synth);
        for i in (1..points.len()).rev() {
            points.swap(i, rng.random_range(0..=i));
        }
        let b = online(&points);
        prop_assert!(rel(a.beta_hat, b.beta_hat) < 1e-9 || (a.beta_hat - b.beta_hat).abs() < 1e-18);
        prop_assert!(rel(a.alpha_hat, b.alpha_hat) < 1e-9 || (a.alpha_hat - b.alpha_hat).abs() < 1e-12);
    }

    #[test]
    fn noiseless_line_is_recovered(alpha in 1e-6f64..1e-1, beta in 1e-12f64..1e-6,
                                   xs in prop::collection::vec(1.0f64..P_MAX, 2..100)) {
        let spread = xs.iter().cloned().fold(f64::MIN, f64::max) - xs.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 1e3);
        let points: Vec<_> = xs.iter().map(|&x| (x, alpha + beta * x)).collect();
        let fit = online(&points);
        prop_assert!(rel(fit.alpha_hat, alpha) < 1e-9, "alpha {} vs {}", fit.alpha_hat, alpha);
        prop_assert!(rel(fit.beta_hat, beta) < 1e-9, "beta {} vs {}", fit.beta_hat, beta);
    }
}

#[test]
fn two_points_give_the_line_through_them() {
    let st = EstimatorState::init(8.0, 5.0, 16.0, 7.0, P_MAX).unwrap();
    let fit = st.fit().unwrap();
    assert_eq!(fit.alpha_hat, 3.0);
    assert_eq!(fit.beta_per_byte(), 2.0);
    assert_eq!(fit.k, 2);
}

#[test]
fn degenerate_designs_are_reported() {
    assert!(EstimatorState::init(10.0, 1.0, 10.0, 2.0, P_MAX).is_err());
    let mut st = EstimatorState::new(P_MAX).unwrap();
    st.push(100.0, 1.0).unwrap();
    assert!(st.fit().is_err());
    assert!(st.update(100.0, 2.0).is_err());
    assert_eq!(st.samples(), 2);
    assert!(st.update(200.0, 3.0).is_ok());
    assert!(st.push(0.0, 1.0).is_err());
    assert!(st.push(P_MAX * 2.0, 1.0).is_err());
}

#[test]
fn monte_carlo_unbiasedness() {
    let truth = TimeModelParams::new(1e-3, 1e-9, 0.1, 0.1).unwrap();
    let (reps, updates) = (4000, 50);
    let grid = size_grid(P_MAX);
    let (mut alphas, mut betas) = (Vec::with_capacity(reps), Vec::with_capacity(reps));
    for rep in 0..reps {
        let mut rng = SeedKey::new(17, rep as u64, 0).rng(Stream::Synth);
        let mut st = EstimatorState::new(P_MAX).unwrap();
        for i in 0..updates {
            let x = grid[i % grid.len()];
            st.push(x, truth.sample_time(x, &mut rng)).unwrap();
        }
        let fit = st.fit().unwrap();
        alphas.push(fit.alpha_hat);
        betas.push(fit.beta_hat);
    }
    for (est, target) in [(&alphas, truth.alpha_const), (&betas, truth.beta_const)] {
        let n = est.len() as f64;
        let mean = est.iter().sum::<f64>() / n;
        let sd = (est.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((mean - target).abs() < 3.0 * sd / n.sqrt(), "mean {mean} vs {target}");
    }
}

#[test]
fn forgetting_tracks_a_jump() {
    let mut st = EstimatorState::new(P_MAX).unwrap().with_forgetting(0.9).unwrap();
    let grid = size_grid(P_MAX);
    for i in 0..200 {
        let x = grid[i % grid.len()];
        let alpha = if i < 100 { 1e-3 } else { 1e-1 };
        st.push(x, alpha + 1e-9 * x).unwrap();
    }
    let fit = st.fit().unwrap();
    // samples before the jump keep weight 0.9^100, about 3e-5
    assert!(rel(fit.alpha_hat, 1e-1) < 1e-3);
    assert!(rel(fit.beta_hat, 1e-9) < 1e-3);
}

#[test]
fn proposals_are_reproducible_and_in_range() {
    let mut st = EstimatorState::new(P_MAX).unwrap();
    for i in 0..100u32 {
        let a = propose_next_size(&st, SizePolicy::Uniform, 5);
        assert_eq!(a, propose_next_size(&st, SizePolicy::Uniform, 5));
        assert!(a > 0.0 && a <= P_MAX);
        let g = propose_next_size(&st, SizePolicy::Grid, 5);
        assert_eq!(g, size_grid(P_MAX)[i as usize % 16]);
        st.push(a, 1.0 + f64::from(i)).unwrap();
    }
    let g = size_grid(P_MAX);
    assert_eq!(g[15], P_MAX);
    assert!(rel(g[0], P_MAX * 10f64.powf(-3.75)) < 1e-12);
}

#[test]
fn csv_round_trip_uses_bytes() {
    let samples = read_samples_csv("size_bytes,time_seconds,rep\n1,5,0\n2,7,0\n".as_bytes()).unwrap();
    assert_eq!(samples[0].size_bits, 8.0);
    assert_eq!(samples[1].size_bits, 16.0);
    let fit = batch_ls(&samples.iter().map(|s| s.as_point()).collect::<Vec<_>>()).unwrap();
    let mut out = Vec::new();
    write_fit_trace(&mut out, &[fit]).unwrap();
    assert_eq!(String::from_utf8(out.clone()).unwrap(), "k,alpha_hat,beta_hat\n2,3,2\n");
    let back = read_fit_trace(out.as_slice()).unwrap();
    assert_eq!(back, vec![fit]);
    assert!(read_samples_csv("size,time\n1,2\n".as_bytes()).is_err());
}
