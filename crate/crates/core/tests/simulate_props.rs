mod common;

use carma_hawkes::inference::{bin_events_window, ks_test};
use carma_hawkes::linalg::expm;
use carma_hawkes::model::{companion, ModelSpec};
use carma_hawkes::moments::{hawkes_oracle, kernel_h, MomentEngine};
use carma_hawkes::simulate::*;
use common::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

/// Next exponential-Hawkes arrival after an event, given the excess
/// intensity `y` right after it: solve μΔ + (y/β)(1 − e^{−βΔ}) = −ln u by
/// bisection then Newton.
fn ozaki_next(mu: f64, beta: f64, y: f64, u: f64) -> f64 {
    let target = -u.ln();
    let f = |d: f64| mu * d + y / beta * (1.0 - (-beta * d).exp()) - target;
    let (mut lo, mut hi) = (0.0, target / mu);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut d = 0.5 * (lo + hi);
    for _ in 0..3 {
        d -= f(d) / (mu + y * (-beta * d).exp());
    }
    d
}

#[test]
fn first_arrival_and_poisson_segments() {
    let spec = hawkes_spec();
    let u = (-1.0f64).exp();
    assert!((next_arrival(&spec, &SimState::new(1), u).unwrap() - 5.0).abs() < 1e-12);

    let poisson = ModelSpec::new(0.8, vec![1.1, 0.4], vec![0.0]).unwrap();
    let mut state = SimState::new(2);
    let a = companion(&poisson.a);
    let mut r = rng(31);
    for _ in 0..20 {
        let u: f64 = r.random_range(0.01..0.99);
        let t = next_arrival(&poisson, &state, u).unwrap();
        assert_eq!(t, state.last_event + (-u.ln()) / 0.8);
        state.advance(&a, t).unwrap();
    }
}

#[test]
fn matches_scalar_hawkes_recursion() {
    let (mu, alpha, beta) = (0.2, 0.5, 0.7);
    let spec = hawkes_spec();
    let comp = Compensator::new(&spec, Evaluation::Matrix).unwrap();
    let auto = Compensator::new(&spec, Evaluation::Auto).unwrap();
    let events = simulate_path(&spec, &SimConfig::events(300, 5)).unwrap();
    let mut state = SimState::new(1);
    let mut y = 0.0;
    let mut r = rng(32);
    for &t in events.times() {
        let dt = t - state.last_event;
        state.advance(comp.companion(), t).unwrap();
        y = y * (-beta * dt).exp() + alpha;
        let u: f64 = r.random_range(1e-6..1.0);
        let want = t + ozaki_next(mu, beta, y, u);
        for c in [&comp, &auto] {
            let got = c.next_arrival(&state, u, 1e-10).unwrap().time;
            assert!((got - want).abs() <= 1e-10 * (want - t).max(1.0), "{got} {want}");
        }
    }
}

#[test]
fn recursion_equals_direct_sum() {
    let spec = study_spec();
    let a = companion(&spec.a);
    let mut r = rng(33);
    let mut times = Vec::new();
    let mut t = 0.0;
    for _ in 0..50 {
        t += r.random_range(0.01..3.0);
        times.push(t);
    }
    let mut state = SimState::new(3);
    for (k, &ti) in times.iter().enumerate() {
        state = advance_state(&spec, &state, ti).unwrap();
        if k == 0 {
            assert_eq!(state.s, DMatrix::identity(3, 3));
        }
        if k == 1 {
            let want = expm(&a, times[1] - times[0]).unwrap() + DMatrix::identity(3, 3);
            assert!((&state.s - want).abs().max() < 1e-14);
        }
    }
    let direct = times.iter().fold(DMatrix::zeros(3, 3), |acc, &ti| acc + expm(&a, t - ti).unwrap());
    assert!((&state.s - &direct).abs().max() < 1e-9);
    assert_eq!(state.count, 50);
    assert!(advance_state(&spec, &state, t).is_err());
}

#[test]
fn deterministic_and_stream_separated() {
    let spec = study_spec();
    let c = SimConfig::horizon(2000.0, 99);
    let p1 = simulate_path(&spec, &c).unwrap();
    let p2 = simulate_path(&spec, &c).unwrap();
    assert_eq!(p1, p2);
    let bits: Vec<u64> = p1.times().iter().map(|x| x.to_bits()).collect();
    let bits2: Vec<u64> = p2.times().iter().map(|x| x.to_bits()).collect();
    assert_eq!(bits, bits2);
    assert_ne!(p1, simulate_path(&spec, &SimConfig::horizon(2000.0, 100)).unwrap());
    assert_ne!(p1, simulate_path(&spec, &c.clone().with_stream(1)).unwrap());
    let matrix = simulate_detailed(&spec, &c, Evaluation::Matrix).unwrap().events;
    let close = p1.times().iter().zip(matrix.times()).all(|(a, b)| (a - b).abs() < 1e-7);
    assert!(close && p1.len() == matrix.len());
}

#[test]
fn event_counts_near_stationary_rate() {
    let h = simulate_path(&hawkes_spec(), &SimConfig::horizon(15_000.0, 7)).unwrap();
    assert!((h.len() as f64 / 10_500.0 - 1.0).abs() < 0.05, "{}", h.len());
    let spec = study_spec();
    let rate = MomentEngine::new(&spec).unwrap().stationary_rate();
    let c = simulate_path(&spec, &SimConfig::horizon(15_000.0, 7)).unwrap();
    assert!((c.len() as f64 / (rate * 15_000.0) - 1.0).abs() < 0.05, "{}", c.len());
}

#[test]
fn root_residuals_within_tolerance() {
    let out = simulate_detailed(&study_spec(), &SimConfig::events(10_000, 3), Evaluation::Auto).unwrap();
    for (r, s) in out.residuals.iter().zip(&out.scales) {
        assert!(*r <= 1e-10 * s.max(1.0));
    }
}

#[test]
fn time_rescaling_exponential() {
    let spec = study_spec();
    let events = simulate_path(&spec, &SimConfig::events(10_000, 4)).unwrap();
    let inc = compensator_increments(&spec, &events).unwrap();
    let (_, p) = ks_test(&inc, |x| 1.0 - (-x).exp());
    assert!(p > 0.01, "p = {p}");
}

#[test]
fn zero_kernel_is_poisson() {
    let spec = ModelSpec::new(1.7, vec![0.9, 0.3], vec![0.0]).unwrap();
    let events = simulate_path(&spec, &SimConfig::events(5_000, 8)).unwrap();
    let mut prev = 0.0;
    let gaps: Vec<f64> = events.times().iter().map(|&t| {
        let g = t - prev;
        prev = t;
        g
    }).collect();
    let (_, p) = ks_test(&gaps, |x| 1.0 - (-1.7 * x).exp());
    assert!(p > 0.01, "p = {p}");
    assert!(simulate_path(&spec, &SimConfig::horizon(0.0, 1)).unwrap().is_empty());
}

#[test]
fn car1_binned_moments() {
    let spec = hawkes_spec();
    let burn = 100.0 / 0.2;
    let horizon = 200_000.0;
    let events = simulate_path(&spec, &SimConfig::horizon(horizon + burn, 12)).unwrap();
    let counts = bin_events_window(&events, 1.0, burn, horizon + burn).unwrap().as_f64();
    let h = hawkes_oracle(0.2, 0.5, 0.7, 1.0, 0.0).unwrap();
    let (m, se_m) = batch_means(&counts, 100, mean);
    let (v, se_v) = batch_means(&counts, 100, variance);
    assert!((m - h.mean).abs() < 3.0 * se_m, "{m} {} {se_m}", h.mean);
    assert!((v - h.var).abs() < 3.0 * se_v, "{v} {} {se_v}", h.var);
}

#[test]
fn intensity_path_properties() {
    let spec = study_spec();
    let one = carma_hawkes::simulate::EventTimes::new(vec![2.0]).unwrap();
    let grid = [0.5, 1.0, 2.0, 2.5, 4.0, 10.0];
    let lam = intensity_path(&spec, &one, &grid).unwrap();
    assert_eq!(&lam[..3], &[0.3, 0.3, 0.3]);
    for (l, t) in lam.iter().zip(grid).skip(3) {
        assert!((l - 0.3 - kernel_h(&spec, t - 2.0).unwrap()).abs() < 1e-12);
    }

    let events = simulate_path(&spec, &SimConfig::horizon(20_000.0, 13)).unwrap();
    let grid: Vec<f64> = (1..200_000).map(|k| 1000.0 + k as f64 * 0.095).collect();
    let lam = intensity_path(&spec, &events, &grid).unwrap();
    let rate = MomentEngine::new(&spec).unwrap().stationary_rate();
    let (m, se) = batch_means(&lam, 50, mean);
    assert!((m - rate).abs() < 3.0 * se, "{m} {rate} {se}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn arrival_solves_compensator_equation(seed in any::<u64>(), u in 0.001f64..0.999) {
        let spec = study_spec();
        let comp = Compensator::new(&spec, Evaluation::Matrix).unwrap();
        let events = simulate_path(&spec, &SimConfig::events(40, seed)).unwrap();
        let mut state = SimState::new(3);
        for &t in events.times() {
            state.advance(comp.companion(), t).unwrap();
        }
        let arr = comp.next_arrival(&state, u, 1e-10).unwrap();
        let dt = arr.time - state.last_event;
        let f = comp.increment_after(&state, dt).unwrap() + u.ln();
        prop_assert!(f.abs() <= 1e-10 * (spec.mu * dt).max(1.0));
        prop_assert!(dt > 0.0 && dt <= -u.ln() / spec.mu);
    }
}
