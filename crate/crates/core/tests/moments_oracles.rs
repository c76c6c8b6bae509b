mod common;

use carma_hawkes::linalg::{eigenvalues, expm};
use carma_hawkes::model::{build_companion_set, check_validity, ModelSpec};
use carma_hawkes::moments::*;
use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * b.abs().max(1e-12)
}

/// CARMA spec with random MA part whose Ã is stable with some margin.
fn random_stable_carma(r: &mut impl Rng, p: usize) -> ModelSpec {
    loop {
        let base = random_stationary(r, p);
        let q = r.random_range(0..p);
        let mut b = vec![base.b[0]];
        b.extend((0..q).map(|_| r.random_range(-0.3..0.6)));
        let spec = ModelSpec::new(base.mu, base.a, b).unwrap();
        let cs = build_companion_set(&spec);
        if eigenvalues(&cs.a_tilde).unwrap().max_real() < -0.02 {
            return spec;
        }
    }
}

/// Moments through the stationary covariance Σ of the state, obtained from
/// the Lyapunov equation ÃΣ + ΣÃᵀ + λ̄eeᵀ = 0 solved as a Kronecker system.
struct Lyapunov {
    at: DMatrix<f64>,
    inv: DMatrix<f64>,
    b: DVector<f64>,
    forcing: DVector<f64>,
    rate: f64,
}

impl Lyapunov {
    fn new(spec: &ModelSpec) -> Self {
        let cs = build_companion_set(spec);
        let p = cs.p;
        let at = cs.a_tilde.clone();
        let inv = at.clone().try_inverse().unwrap();
        let b = cs.b_full.clone();
        let rate = spec.mu * (1.0 - (b.transpose() * &inv * &cs.e)[(0, 0)]);
        let id = DMatrix::<f64>::identity(p, p);
        let k = id.kronecker(&at) + at.kronecker(&id);
        let rhs = (&cs.e * cs.e.transpose() * (-rate)).reshape_generic(nalgebra::Dyn(p * p), nalgebra::Const::<1>);
        let sigma = k.lu().solve(&rhs).unwrap().reshape_generic(nalgebra::Dyn(p), nalgebra::Dyn(p));
        let forcing = &sigma * &b + &cs.e * rate;
        Lyapunov { at, inv, b, forcing, rate }
    }

    fn g(&self, tau: f64) -> DVector<f64> {
        let n = self.at.nrows();
        &self.inv * (expm(&self.at, tau).unwrap() - DMatrix::identity(n, n)) * &self.forcing
    }

    fn cov(&self, tau: f64, delta: f64) -> f64 {
        let n = self.at.nrows();
        let e = expm(&self.at, tau).unwrap() - DMatrix::identity(n, n);
        (self.b.transpose() * &self.inv * e * expm(&self.at, delta).unwrap() * self.g(tau))[(0, 0)]
    }

    fn var(&self, tau: f64) -> f64 {
        let n = self.at.nrows();
        let e = expm(&self.at, tau).unwrap() - DMatrix::identity(n, n);
        let m = &self.inv * e - DMatrix::identity(n, n) * tau;
        self.rate * tau + 2.0 * (self.b.transpose() * &self.inv * m * &self.forcing)[(0, 0)]
    }
}

fn rk4(f: impl Fn(&DVector<f64>) -> DVector<f64>, y0: DVector<f64>, t: f64, steps: usize) -> DVector<f64> {
    let h = t / steps as f64;
    let mut y = y0;
    for _ in 0..steps {
        let k1 = f(&y);
        let k2 = f(&(&y + &k1 * (h / 2.0)));
        let k3 = f(&(&y + &k2 * (h / 2.0)));
        let k4 = f(&(&y + &k3 * h));
        y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    y
}

#[test]
fn hawkes_reference_point() {
    let eng = MomentEngine::new(&hawkes_spec()).unwrap();
    assert!((eng.stationary_mean_increment(1.0) - 0.7).abs() < 1e-12);
    let h = hawkes_oracle(0.2, 0.5, 0.7, 1.0, 0.5).unwrap();
    assert!((h.mean - 0.7).abs() < 1e-12);
    let d1 = hawkes_oracle(0.2, 0.5, 0.7, 1.0, 1.0).unwrap();
    let d0 = hawkes_oracle(0.2, 0.5, 0.7, 1.0, 0.0).unwrap();
    assert!((d1.acf / d0.acf - (-0.2f64).exp()).abs() < 1e-12);
    let poisson = hawkes_oracle(0.2, 0.0, 0.7, 1.0, 0.3).unwrap();
    assert_eq!(poisson.cov, 0.0);
    assert_eq!(poisson.acf, 0.0);
    assert!(hawkes_oracle(0.2, 0.7, 0.7, 1.0, 0.0).is_err());
}

#[test]
fn car1_reduces_to_hawkes() {
    let mut r = rng(21);
    for _ in 0..200 {
        let beta = r.random_range(0.2..3.0);
        let alpha = beta * r.random_range(0.0..0.95);
        let mu = r.random_range(0.05..3.0);
        let eng = MomentEngine::new(&ModelSpec::hawkes(mu, alpha, beta).unwrap()).unwrap();
        for tau in [0.5, 1.0, 2.0] {
            for delta in [0.0, 1.0, 5.0] {
                let h = hawkes_oracle(mu, alpha, beta, tau, delta).unwrap();
                assert!(close(eng.stationary_mean_increment(tau), h.mean, 1e-9));
                assert!(close(eng.longrun_var(tau).unwrap(), h.var, 1e-9));
                if alpha > 0.0 {
                    assert!(close(eng.longrun_cov(tau, delta).unwrap(), h.cov, 1e-9));
                    assert!(close(eng.acf_at(tau, delta).unwrap(), h.acf, 1e-9));
                }
            }
        }
    }
}

#[test]
fn closed_forms_match_lyapunov_route() {
    let mut r = rng(22);
    for p in 1..=4 {
        for _ in 0..25 {
            let spec = random_stable_carma(&mut r, p);
            let eng = MomentEngine::new(&spec).unwrap();
            let ly = Lyapunov::new(&spec);
            assert!(close(eng.stationary_rate(), ly.rate, 1e-10));
            for tau in [0.3, 1.0, 4.0] {
                assert!(close(eng.longrun_var(tau).unwrap(), ly.var(tau), 1e-8), "{spec:?}");
                for delta in [0.0, 0.7, 3.0] {
                    let want = ly.cov(tau, delta);
                    let got = eng.longrun_cov(tau, delta).unwrap();
                    assert!((got - want).abs() <= 1e-8 * ly.var(tau), "{spec:?} {got} {want}");
                }
            }
        }
    }
}

#[test]
fn study_spec_against_lyapunov() {
    let spec = study_spec();
    let eng = MomentEngine::new(&spec).unwrap();
    let ly = Lyapunov::new(&spec);
    assert!(close(eng.longrun_var(1.0).unwrap(), ly.var(1.0), 1e-9));
    for d in 0..5 {
        assert!(close(eng.longrun_cov(1.0, d as f64).unwrap(), ly.cov(1.0, d as f64), 1e-9));
    }
}

#[test]
fn conditional_means_match_ode() {
    let mut r = rng(23);
    for p in 1..=4 {
        let spec = random_stable_carma(&mut r, p);
        let eng = MomentEngine::new(&spec).unwrap();
        let cs = build_companion_set(&spec);
        let b = cs.b_full.clone();
        let x0 = DVector::from_fn(p, |_, _| r.random_range(0.0..1.0));
        // augmented state (E X, E N)
        let f = |y: &DVector<f64>| {
            let x = y.rows(0, p).into_owned();
            let mut dy = DVector::zeros(p + 1);
            dy.rows_mut(0, p).copy_from(&(&cs.a_tilde * &x + &cs.e * spec.mu));
            dy[p] = spec.mu + b.dot(&x);
            dy
        };
        let mut y0 = DVector::zeros(p + 1);
        y0.rows_mut(0, p).copy_from(&x0);
        y0[p] = 2.0;
        let y = rk4(f, y0, 1.0, 10_000);
        let state = eng.conditional_mean_state(&x0, 1.0).unwrap();
        assert!((state - y.rows(0, p)).abs().max() < 1e-6);
        let counts = eng.conditional_mean_counts(&x0, 2.0, 1.0).unwrap();
        assert!((counts - y[p]).abs() < 1e-6);
        let inc = eng.expected_increment(&x0, 0.0, 1.0).unwrap();
        assert!((inc - (y[p] - 2.0)).abs() < 1e-6);
    }
}

#[test]
fn conditional_mean_limits() {
    let spec = study_spec();
    let eng = MomentEngine::new(&spec).unwrap();
    let x0 = DVector::from_vec(vec![0.3, -0.1, 0.4]);
    assert_eq!(eng.conditional_mean_state(&x0, 0.0).unwrap(), x0);
    assert_eq!(eng.conditional_mean_counts(&x0, 5.0, 0.0).unwrap(), 5.0);
    let far = eng.conditional_mean_state(&x0, 2000.0).unwrap();
    assert!((far - eng.stationary_state_mean()).abs().max() < 1e-10);
    let xs = eng.stationary_state_mean();
    let stat = eng.stationary_mean_increment(1.3);
    assert!((eng.expected_increment(&xs, 0.7, 1.3).unwrap() - stat).abs() < 1e-12);
    assert!((eng.expected_increment(&x0, 2000.0, 1.3).unwrap() - stat).abs() < 1e-10);

    let hawkes = MomentEngine::new(&hawkes_spec()).unwrap();
    let zero = DVector::zeros(1);
    let slope = hawkes.conditional_mean_counts(&zero, 0.0, 501.0).unwrap()
        - hawkes.conditional_mean_counts(&zero, 0.0, 500.0).unwrap();
    assert!((slope - 0.2 / (1.0 - 0.5 / 0.7)).abs() < 1e-9);
}

#[test]
fn kernel_integral_is_branching_ratio() {
    let mut r = rng(24);
    let mut specs = vec![study_spec(), hawkes_spec()];
    specs.extend((0..10).map(|i| random_stable_carma(&mut r, 1 + i % 4)));
    for spec in specs {
        let rep = check_validity(&spec).unwrap();
        let rate = -rep.spectrum_a.max_real();
        let t_max = 60.0 / rate;
        let k = carma_hawkes::model::SpectralKernel::new(&spec).unwrap();
        let quad = simpson(|t| k.eval(t), 0.0, t_max, 200_000);
        let br = rep.branching_ratio.unwrap();
        assert!((quad - br).abs() < 1e-8, "{spec:?} {quad} {br}");
    }
}

#[test]
fn kernel_forms_and_small_cases() {
    let car1 = ModelSpec::hawkes(1.0, 0.5, 0.7).unwrap();
    assert!((kernel_h(&car1, 2.0).unwrap() - 0.5 * (-1.4f64).exp()).abs() < 1e-14);
    let spec = study_spec();
    for t in [0.0, 0.1, 1.0, 7.5, 40.0, 200.0] {
        assert!((kernel_h(&spec, t).unwrap() - kernel_h_spectral(&spec, t).unwrap()).abs() < 1e-9);
    }
    let car3 = ModelSpec::new(1.0, spec.a.clone(), vec![0.2]).unwrap();
    assert_eq!(kernel_h(&car3, 0.0).unwrap(), 0.0);
    let tail = kernel_tail(&ModelSpec::new(1.0, vec![3.0, 2.0], vec![1.0, 1.0]).unwrap()).unwrap();
    assert!(tail.coefficient.abs() < 1e-12 && (tail.rate + 1.0).abs() < 1e-12);
    let osc = ModelSpec::new(1.0, vec![0.2, 4.0], vec![1.0]).unwrap();
    assert!(kernel_tail(&osc).is_err());
}

#[test]
fn variance_short_bin_slope() {
    let spec = study_spec();
    let eng = MomentEngine::new(&spec).unwrap();
    let rate = eng.stationary_rate();
    for tau in [1e-3, 1e-4] {
        let v = eng.longrun_var(tau).unwrap();
        assert!((v / tau - rate).abs() < 2.0 * tau * 100.0);
    }
    assert!(eng.longrun_cov(1e-9, 0.0).unwrap().abs() < 1e-12);
}

#[test]
fn study_acf_is_not_monotone() {
    let eng = MomentEngine::new(&study_spec()).unwrap();
    let acf = eng.theoretical_acf(1.0, 40).unwrap();
    let increases = acf.windows(2).any(|w| w[1] > w[0]);
    let decreases = acf.windows(2).any(|w| w[1] < w[0]);
    assert!(increases && decreases, "{acf:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn acf_times_var_is_cov(seed in any::<u64>(), p in 1usize..=4, tau in 0.2f64..3.0) {
        let spec = random_stable_carma(&mut rng(seed), p);
        let eng = MomentEngine::new(&spec).unwrap();
        let var = eng.longrun_var(tau).unwrap();
        let acf = eng.theoretical_acf(tau, 10).unwrap();
        for (d, rho) in acf.iter().enumerate() {
            let cov = eng.longrun_cov(tau, d as f64).unwrap();
            prop_assert!((rho * var - cov).abs() <= 1e-13 * var.max(cov.abs()));
        }
    }

    #[test]
    fn acf_does_not_depend_on_mu(seed in any::<u64>(), p in 1usize..=4, c in 0.05f64..20.0) {
        let spec = random_stable_carma(&mut rng(seed), p);
        let scaled = ModelSpec::new(spec.mu * c, spec.a.clone(), spec.b.clone()).unwrap();
        let a1 = MomentEngine::new(&spec).unwrap().theoretical_acf(1.0, 15).unwrap();
        let a2 = MomentEngine::new(&scaled).unwrap().theoretical_acf(1.0, 15).unwrap();
        for (x, y) in a1.iter().zip(&a2) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn moments_positive_for_valid_specs(seed in any::<u64>(), p in 1usize..=4, tau in 0.01f64..10.0) {
        let mut r = rng(seed);
        let spec = random_stationary(&mut r, p);
        prop_assume!(check_validity(&spec).unwrap().stationary);
        let eng = MomentEngine::new(&spec).unwrap();
        prop_assert!(eng.longrun_var(tau).unwrap() > 0.0);
        prop_assert!(eng.stationary_mean_increment(tau) > 0.0);
    }

    #[test]
    fn covariance_decay_envelope(seed in any::<u64>(), p in 1usize..=4) {
        let spec = random_stable_carma(&mut rng(seed), p);
        let eng = MomentEngine::new(&spec).unwrap();
        let ly = Lyapunov::new(&spec);
        let tau = 1.0;
        let n = ly.at.nrows();
        let u = (&ly.inv * (expm(&ly.at, tau).unwrap() - DMatrix::identity(n, n))).transpose() * &ly.b;
        let v = ly.g(tau);
        // Ã = V D V⁻¹ with distinct eigenvalues; C = Σ|(uᵀV)ᵢ||(V⁻¹v)ᵢ|
        let eig = eigenvalues(&ly.at).unwrap();
        let vand = DMatrix::from_fn(n, n, |i, j| eig.values[j].powu(i as u32));
        let vinv = vand.clone().try_inverse().unwrap();
        let uc = u.map(|x| nalgebra::Complex::new(x, 0.0));
        let vc = v.map(|x| nalgebra::Complex::new(x, 0.0));
        let left = vand.transpose() * uc;
        let right = vinv * vc;
        let c: f64 = (0..n).map(|i| left[i].norm() * right[i].norm()).sum();
        let lead = eig.max_real();
        for k in 0..30 {
            let delta = k as f64 * 0.5;
            let cov = eng.longrun_cov(tau, delta).unwrap();
            prop_assert!(cov.abs() <= c * (lead * delta).exp() * (1.0 + 1e-8) + 1e-14);
        }
    }
}
