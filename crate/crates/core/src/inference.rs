//! Likelihood, maximum-likelihood and moment-matching estimation, empirical
//! autocorrelations with asymptotic bands, and time-rescaling diagnostics.

use argmin::core::{CostFunction, Executor, State, TerminationReason};
use argmin::solver::neldermead::NelderMead;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::linalg::{self, ComplexSpectrum, Factored};
use crate::model::{
    ar_poly_deriv, check_validity, companion, ma_poly, numeric_kernel_check, ModelSpec, ValidityReport,
};
use crate::moments::{LagConvention, MomentEngine};
use crate::simulate::{compensator_increments, EventTimes};

/// Event counts in consecutive bins `[origin + kτ, origin + (k+1)τ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedCounts {
    pub tau: f64,
    pub counts: Vec<u64>,
    pub origin: f64,
}

impl BinnedCounts {
    pub fn as_f64(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }
}

/// Bins over `[0, horizon)`; a trailing partial bin is dropped.
pub fn bin_events(events: &EventTimes, tau: f64, horizon: f64) -> Result<BinnedCounts> {
    bin_events_window(events, tau, 0.0, horizon)
}

/// Bins over `[origin, end)`; a trailing partial bin is dropped.
pub fn bin_events_window(events: &EventTimes, tau: f64, origin: f64, end: f64) -> Result<BinnedCounts> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidInput(format!("tau must be positive, got {tau}")));
    }
    if !(end >= origin) {
        return Err(Error::InvalidInput("window end precedes origin".into()));
    }
    let n = ((end - origin) / tau).floor() as usize;
    let mut counts = vec![0u64; n];
    for &t in events.times() {
        if t < origin {
            continue;
        }
        let k = ((t - origin) / tau).floor() as usize;
        if k >= n {
            break;
        }
        counts[k] += 1;
    }
    Ok(BinnedCounts { tau, counts, origin })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodReport {
    pub value: f64,
    /// Index of the first event with non-positive intensity, if any.
    pub nonpositive_at: Option<usize>,
    pub diagnostic: Option<String>,
}

/// Log-likelihood on `[0, T_k]` through the matrix exponential recursion.
pub fn log_likelihood(spec: &ModelSpec, events: &EventTimes) -> Result<f64> {
    Ok(log_likelihood_detailed(spec, events, None)?.value)
}

/// As [`log_likelihood`], optionally integrating the compensator up to
/// `horizon ≥ T_k` instead of stopping at the last event.
pub fn log_likelihood_detailed(
    spec: &ModelSpec,
    events: &EventTimes,
    horizon: Option<f64>,
) -> Result<LikelihoodReport> {
    spec.validate()?;
    let p = spec.p();
    let a = companion(&spec.a);
    let bf = spec.b_full();
    let f = Factored::new(&a, "A").map_err(|e| Error::InvalidModel(e.to_string()))?;
    // A⁻ᵀb, so that bᵀA⁻¹v = dot(bai, v)
    let bai = f.inverse.transpose() * &bf;
    let mut e = DVector::zeros(p);
    e[p - 1] = 1.0;
    let t = events.times();
    let k = t.len();
    let end = horizon.unwrap_or(events.last().unwrap_or(0.0));
    if let Some(last) = events.last() {
        if end < last {
            return Err(Error::InvalidInput(format!("horizon {end} precedes last event {last}")));
        }
    }

    let mut x = DVector::zeros(p); // X at T_i−
    let mut s_e = DVector::zeros(p); // S(i)e
    let mut sum_log = 0.0;
    let mut prev = 0.0;
    for (i, &ti) in t.iter().enumerate() {
        if i > 0 {
            let ex = linalg::expm(&a, ti - prev)?;
            x = &ex * (&x + &e);
            s_e = &ex * &s_e;
        }
        s_e += &e;
        let lam = spec.mu + bf.dot(&x);
        if !(lam > 0.0) {
            return Ok(LikelihoodReport {
                value: f64::NEG_INFINITY,
                nonpositive_at: Some(i),
                diagnostic: Some(format!("intensity {lam} <= 0 at event {i} (t = {ti}); kernel negative")),
            });
        }
        sum_log += lam.ln();
        prev = ti;
    }
    let tail = if k > 0 && end > prev { linalg::expm(&a, end - prev)? * &s_e } else { s_e };
    let value = -spec.mu * end - bai.dot(&tail) + k as f64 * bai.dot(&e) + sum_log;
    Ok(LikelihoodReport { value, nonpositive_at: None, diagnostic: None })
}

/// Kernel as poles and residues, `h(t) = Σ cⱼ e^{λⱼt}`. Only one member of
/// each conjugate pair is kept, with weight 2 on its real part.
#[derive(Debug, Clone)]
struct Poles {
    lambda: Vec<Complex64>,
    residue: Vec<Complex64>,
    weight: Vec<f64>,
}

impl Poles {
    fn from_spec(spec: &ModelSpec, lambda: Vec<Complex64>) -> Option<Self> {
        let s = ComplexSpectrum::from_unsorted(lambda);
        if !s.is_distinct() {
            return None;
        }
        let tol = 1e-12 * s.spectral_radius().max(1.0);
        let mut out = Self { lambda: Vec::new(), residue: Vec::new(), weight: Vec::new() };
        for l in s.values {
            if l.im < -tol {
                continue;
            }
            let (l, w) = if l.im.abs() <= tol { (Complex64::new(l.re, 0.0), 1.0) } else { (l, 2.0) };
            out.lambda.push(l);
            out.residue.push(ma_poly(&spec.b, l) / ar_poly_deriv(&spec.a, l));
            out.weight.push(w);
        }
        Some(out)
    }
}

fn spectral_loglik(mu: f64, poles: &Poles, times: &[f64]) -> f64 {
    let p = poles.lambda.len();
    let mut r = vec![Complex64::new(0.0, 0.0); p];
    let mut sum_log = 0.0;
    let mut prev = 0.0;
    for (i, &t) in times.iter().enumerate() {
        let mut lam = mu;
        if i > 0 {
            let dt = t - prev;
            for j in 0..p {
                let l = poles.lambda[j];
                let decay = if l.im == 0.0 { Complex64::new((l.re * dt).exp(), 0.0) } else { (l * dt).exp() };
                r[j] = decay * (r[j] + 1.0);
                lam += poles.weight[j] * (poles.residue[j] * r[j]).re;
            }
        }
        if !(lam > 0.0) {
            return f64::NEG_INFINITY;
        }
        sum_log += lam.ln();
        prev = t;
    }
    if times.is_empty() {
        return 0.0;
    }
    let k = times.len() as f64;
    let comp: f64 = (0..p)
        .map(|j| poles.weight[j] * (poles.residue[j] / poles.lambda[j] * (r[j] + 1.0 - k)).re)
        .sum();
    -mu * prev - comp + sum_log
}

/// Log-likelihood through the eigen-decomposition of A, O(np). Falls back to
/// [`log_likelihood`] when the AR roots are not distinct.
pub fn log_likelihood_fast(spec: &ModelSpec, events: &EventTimes) -> Result<f64> {
    spec.validate()?;
    let spectrum = linalg::eigenvalues(&companion(&spec.a))?;
    match Poles::from_spec(spec, spectrum.values) {
        Some(p) if !spec.kernel_is_zero() => Ok(spectral_loglik(spec.mu, &p, events.times())),
        _ => log_likelihood(spec, events),
    }
}

/// Unconstrained coordinates for (μ, a, b).
///
/// `a(z)` is the product of quadratics `z² + e^{θ}z + e^{θ'}` (plus one linear
/// factor `z + e^{θ}` when p is odd), so every point maps to a polynomial with
/// roots in the open left half-plane, and every such polynomial is reachable.
/// `b₀ = e^{θ}`; `b₁ … b_q` are free; `μ = e^{θ}` when estimated.
#[derive(Debug, Clone, Copy)]
struct Coords {
    p: usize,
    q: usize,
    with_mu: bool,
}

struct Decoded {
    mu: f64,
    a: Vec<f64>,
    b: Vec<f64>,
    roots: Vec<Complex64>,
}

fn poly_mul(x: &[f64], y: &[f64]) -> Vec<f64> {
    // coefficients highest power first
    let mut out = vec![0.0; x.len() + y.len() - 1];
    for (i, a) in x.iter().enumerate() {
        for (j, b) in y.iter().enumerate() {
            out[i + j] += a * b;
        }
    }
    out
}

impl Coords {
    fn dim(&self) -> usize {
        usize::from(self.with_mu) + self.p + self.q + 1
    }

    fn decode(&self, th: &[f64]) -> Decoded {
        let mut k = 0;
        let mu = if self.with_mu {
            k += 1;
            th[0].exp()
        } else {
            1.0
        };
        let mut poly = vec![1.0];
        let mut roots = Vec::with_capacity(self.p);
        if self.p % 2 == 1 {
            let c = th[k].exp();
            k += 1;
            poly = poly_mul(&poly, &[1.0, c]);
            roots.push(Complex64::new(-c, 0.0));
        }
        for _ in 0..self.p / 2 {
            let (c1, c2) = (th[k].exp(), th[k + 1].exp());
            k += 2;
            poly = poly_mul(&poly, &[1.0, c1, c2]);
            let disc = Complex64::new(c1 * c1 - 4.0 * c2, 0.0).sqrt();
            roots.push((-c1 + disc) / 2.0);
            roots.push((-c1 - disc) / 2.0);
        }
        let a = poly[1..].to_vec();
        let mut b = Vec::with_capacity(self.q + 1);
        b.push(th[k].exp());
        b.extend_from_slice(&th[k + 1..k + 1 + self.q]);
        Decoded { mu, a, b, roots }
    }

    fn encode(&self, spec: &ModelSpec) -> Option<Vec<f64>> {
        if spec.p() != self.p || spec.q() != self.q || !(spec.b[0] > 0.0) {
            return None;
        }
        let spectrum = linalg::eigenvalues(&companion(&spec.a)).ok()?;
        if spectrum.max_real() >= 0.0 {
            return None;
        }
        let tol = 1e-9 * spectrum.spectral_radius().max(1.0);
        let mut reals: Vec<f64> = spectrum.values.iter().filter(|z| z.im.abs() <= tol).map(|z| z.re).collect();
        let pairs: Vec<Complex64> = spectrum.values.iter().filter(|z| z.im > tol).copied().collect();
        let mut th = Vec::with_capacity(self.dim());
        if self.with_mu {
            th.push(spec.mu.ln());
        }
        if self.p % 2 == 1 {
            th.push((-reals.remove(0)).ln());
        }
        for z in pairs {
            th.push((-2.0 * z.re).ln());
            th.push(z.norm_sqr().ln());
        }
        for w in reals.chunks(2) {
            th.push((-(w[0] + w[1])).ln());
            th.push((w[0] * w[1]).ln());
        }
        th.push(spec.b[0].ln());
        th.extend_from_slice(&spec.b[1..]);
        th.iter().all(|x| x.is_finite()).then_some(th)
    }
}

/// Large finite cost for infeasible points, growing with the violation.
const PENALTY: f64 = 1e8;

/// Feasibility shared by both estimators: branching ratio below one and a
/// non-negative kernel on the numeric grid.
fn feasibility_penalty(spec: &ModelSpec, roots: &[Complex64]) -> Option<f64> {
    let ratio = spec.b[0] / spec.a[spec.p() - 1];
    if !(ratio < 1.0) || !ratio.is_finite() {
        return Some(PENALTY * (1.0 + (ratio - 1.0).abs().min(1e3)));
    }
    if spec.q() > 0 {
        let spectrum = ComplexSpectrum::from_unsorted(roots.to_vec());
        if let crate::model::KernelVerdict::NumericallyNegative { value, .. } = numeric_kernel_check(spec, &spectrum) {
            return Some(PENALTY * (1.0 + value.abs().min(1e3)));
        }
    }
    None
}

struct Objective<'a> {
    f: &'a (dyn Fn(&[f64]) -> f64 + Sync),
}

impl CostFunction for Objective<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, x: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        let v = (self.f)(x);
        Ok(if v.is_finite() { v } else { PENALTY * 10.0 })
    }
}

struct Minimum {
    x: Vec<f64>,
    value: f64,
    iterations: u64,
    converged: bool,
}

/// Nelder–Mead with restarts from the best vertex until the value stops moving.
fn minimize(f: &(dyn Fn(&[f64]) -> f64 + Sync), x0: &[f64], step: f64, max_iters: u64) -> Result<Minimum> {
    let mut x = x0.to_vec();
    let mut best = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    for _ in 0..3 {
        let mut simplex = vec![x.clone()];
        for i in 0..x.len() {
            let mut v = x.clone();
            v[i] += step;
            simplex.push(v);
        }
        let solver = NelderMead::new(simplex)
            .with_sd_tolerance(1e-9)
            .map_err(|e| Error::Numerical(e.to_string()))?;
        let res = Executor::new(Objective { f }, solver)
            .configure(|s| s.max_iters(max_iters))
            .run()
            .map_err(|e| Error::Numerical(e.to_string()))?;
        let st = res.state();
        iterations += st.get_iter();
        converged = matches!(st.get_termination_reason(), Some(TerminationReason::SolverConverged));
        let value = st.get_best_cost();
        if let Some(p) = st.get_best_param() {
            if value <= best {
                x = p.clone();
            }
        }
        let improved = best - value;
        best = best.min(value);
        if improved.abs() <= 1e-8 * best.abs().max(1.0) {
            break;
        }
    }
    Ok(Minimum { x, value: best, iterations, converged })
}

/// Estimation output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub method: String,
    pub spec: ModelSpec,
    /// Log-likelihood for MLE, least-squares ACF distance for MME.
    pub objective: f64,
    pub converged: bool,
    pub iterations: u64,
    pub validity: ValidityReport,
    /// Standard errors in the order `[μ, a₁…a_p, b₀…b_q]`.
    pub stderr: Option<Vec<f64>>,
    pub n_events: usize,
    pub starts: usize,
    pub aic: Option<f64>,
    pub bic: Option<f64>,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct MleOptions {
    pub init: Option<ModelSpec>,
    pub starts: usize,
    pub seed: u64,
    pub max_iters: u64,
}

impl Default for MleOptions {
    fn default() -> Self {
        Self { init: None, starts: 8, seed: 0, max_iters: 2000 }
    }
}

fn negloglik_theta(coords: Coords, times: &[f64], th: &[f64]) -> f64 {
    let d = coords.decode(th);
    let spec = ModelSpec { mu: d.mu, a: d.a, b: d.b };
    if let Some(pen) = feasibility_penalty(&spec, &d.roots) {
        return pen;
    }
    let n = times.len().max(1) as f64;
    match Poles::from_spec(&spec, d.roots) {
        Some(p) => -spectral_loglik(spec.mu, &p, times) / n,
        None => {
            let ev = EventTimes::new(times.to_vec()).expect("validated events");
            log_likelihood(&spec, &ev).map_or(f64::INFINITY, |l| -l / n)
        }
    }
}

/// Default starting point: real AR roots at multiples of a scale, b₀ set for
/// branching ratio one half, μ for the observed rate.
fn heuristic_spec(p: usize, q: usize, rate: f64, scale: f64) -> ModelSpec {
    let roots: Vec<f64> = (1..=p).map(|k| -scale * k as f64).collect();
    let mut poly = vec![1.0];
    for r in &roots {
        poly = poly_mul(&poly, &[1.0, -r]);
    }
    let a = poly[1..].to_vec();
    let mut b = vec![0.0; q + 1];
    b[0] = 0.5 * a[p - 1];
    ModelSpec { mu: 0.5 * rate, a, b }
}

fn jitter(th: &[f64], rng: &mut ChaCha20Rng, sd: f64) -> Vec<f64> {
    th.iter().map(|x| x + sd * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Start points for the local searches: `fixed` as given, then the lowest
/// objective values among `base` and `pool` Gaussian perturbations of it.
fn screen_starts(
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    fixed: Vec<Vec<f64>>,
    base: &[Vec<f64>],
    n_starts: usize,
    pool: usize,
    sd: f64,
    rng: &mut ChaCha20Rng,
) -> Vec<Vec<f64>> {
    let mut candidates: Vec<Vec<f64>> = base.to_vec();
    for i in 0..pool {
        candidates.push(jitter(&base[i % base.len()], rng, sd));
    }
    let values: Vec<f64> = candidates.par_iter().map(|th| f(th)).collect();
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut starts = fixed;
    for i in order {
        if starts.len() >= n_starts {
            break;
        }
        starts.push(candidates[i].clone());
    }
    starts
}

/// Numerical Hessian of `f` by central differences.
fn hessian(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> DMatrix<f64> {
    let n = x.len();
    let h: Vec<f64> = x.iter().map(|v| 1e-4 * v.abs().max(1e-2)).collect();
    let f0 = f(x);
    let mut hm = DMatrix::zeros(n, n);
    let eval = |di: &[(usize, f64)]| {
        let mut y = x.to_vec();
        for &(i, d) in di {
            y[i] += d;
        }
        f(&y)
    };
    for i in 0..n {
        hm[(i, i)] = (eval(&[(i, h[i])]) - 2.0 * f0 + eval(&[(i, -h[i])])) / (h[i] * h[i]);
        for j in 0..i {
            let v = (eval(&[(i, h[i]), (j, h[j])]) - eval(&[(i, h[i]), (j, -h[j])]) - eval(&[(i, -h[i]), (j, h[j])])
                + eval(&[(i, -h[i]), (j, -h[j])]))
                / (4.0 * h[i] * h[j]);
            hm[(i, j)] = v;
            hm[(j, i)] = v;
        }
    }
    hm
}

fn natural_params(spec: &ModelSpec) -> Vec<f64> {
    std::iter::once(spec.mu).chain(spec.a.iter().copied()).chain(spec.b.iter().copied()).collect()
}

fn from_natural(x: &[f64], p: usize) -> ModelSpec {
    ModelSpec { mu: x[0], a: x[1..=p].to_vec(), b: x[p + 1..].to_vec() }
}

/// Standard errors from the inverse observed information at `spec`.
pub fn mle_stderr(spec: &ModelSpec, events: &EventTimes) -> Option<Vec<f64>> {
    let p = spec.p();
    let f = |x: &[f64]| {
        let s = from_natural(x, p);
        if s.validate().is_err() {
            return f64::NAN;
        }
        -log_likelihood_fast(&s, events).unwrap_or(f64::NEG_INFINITY)
    };
    let h = hessian(&f, &natural_params(spec));
    if !h.iter().all(|v| v.is_finite()) {
        return None;
    }
    let chol = h.cholesky()?;
    let inv = chol.inverse();
    Some(inv.diagonal().iter().map(|v| v.sqrt()).collect())
}

/// Maximum likelihood with multi-start Nelder–Mead in stationarity-enforcing
/// coordinates.
pub fn mle_fit(events: &EventTimes, p: usize, q: usize, opts: &MleOptions) -> Result<FitResult> {
    if p == 0 || q >= p {
        return Err(Error::InvalidInput(format!("need 0 <= q < p, got p={p}, q={q}")));
    }
    let need = (p + q + 2) * 20;
    if events.len() < need {
        return Err(Error::InsufficientData(format!("{} events, need at least {need}", events.len())));
    }
    let coords = Coords { p, q, with_mu: true };
    let times = events.times();
    let horizon = events.last().unwrap_or(1.0);
    let rate = events.len() as f64 / horizon;

    let mut base: Vec<Vec<f64>> = Vec::new();
    let mut diagnostics = Vec::new();
    if let Some(init) = &opts.init {
        init.validate()?;
        match coords.encode(init) {
            Some(th) => base.push(th),
            None => diagnostics.push("init is outside the stationary domain; ignored".to_string()),
        }
    } else {
        let m = default_lags(p, q);
        match mme_fit(events, p, q, 1.0, m, &MmeOptions { starts: 4, seed: opts.seed, ..Default::default() }) {
            Ok(fit) => {
                if let Some(th) = coords.encode(&fit.spec) {
                    base.push(th);
                }
            }
            Err(e) => diagnostics.push(format!("moment initialisation failed: {e}")),
        }
    }
    for scale in [1.0, 0.25, 4.0] {
        if let Some(th) = coords.encode(&heuristic_spec(p, q, rate, scale)) {
            base.push(th);
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
    let n_starts = opts.starts.max(1);
    let mut starts: Vec<Vec<f64>> = base.iter().take(n_starts).cloned().collect();
    let mut i = 0;
    while starts.len() < n_starts {
        starts.push(jitter(&base[i % base.len()], &mut rng, 0.5));
        i += 1;
    }

    let f = |th: &[f64]| negloglik_theta(coords, times, th);
    let results: Vec<Result<Minimum>> = starts.par_iter().map(|s| minimize(&f, s, 0.5, opts.max_iters)).collect();
    let best = pick_best(results)?;
    let d = coords.decode(&best.x);
    let spec = ModelSpec::new(d.mu, d.a, d.b)?;
    let loglik = log_likelihood(&spec, events)?;
    let validity = check_validity(&spec)?;
    if !validity.stationary {
        diagnostics.push("estimate is not stationary".to_string());
    }
    let k = coords.dim() as f64;
    let n = events.len() as f64;
    let stderr = mle_stderr(&spec, events);
    if stderr.is_none() {
        diagnostics.push("observed information not positive definite; no standard errors".to_string());
    }
    Ok(FitResult {
        method: "mle".into(),
        converged: best.converged && validity.stationary,
        objective: loglik,
        iterations: best.iterations,
        validity,
        stderr,
        n_events: events.len(),
        starts: n_starts,
        aic: Some(2.0 * k - 2.0 * loglik),
        bic: Some(k * n.ln() - 2.0 * loglik),
        diagnostics,
        spec,
    })
}

fn pick_best(results: Vec<Result<Minimum>>) -> Result<Minimum> {
    let mut best: Option<Minimum> = None;
    let mut last_err = None;
    for r in results {
        match r {
            Ok(m) => {
                if best.as_ref().is_none_or(|b| m.value < b.value) {
                    best = Some(m);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.unwrap_or_else(|| Error::Numerical("no optimizer start succeeded".into())))
}

/// Sample mean, biased variance and autocorrelations of binned counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalAcf {
    pub mean: f64,
    pub variance: f64,
    /// `acf[d − 1]` is lag d.
    pub acf: Vec<f64>,
}

fn check_lags(n: usize, max_lag: usize) -> Result<()> {
    if max_lag == 0 || 4 * max_lag >= n {
        return Err(Error::InvalidInput(format!("max_lag must be in 1..{}, got {max_lag}", n.div_ceil(4))));
    }
    Ok(())
}

pub fn empirical_acf(binned: &BinnedCounts, max_lag: usize) -> Result<EmpiricalAcf> {
    let x = binned.as_f64();
    let n = x.len();
    check_lags(n, max_lag)?;
    let mean = x.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let gamma = |d: usize| c[..n - d].iter().zip(&c[d..]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
    let variance = gamma(0);
    if !(variance > 0.0) {
        return Err(Error::DegenerateVariance);
    }
    let acf = (1..=max_lag).map(|d| gamma(d) / variance).collect();
    Ok(EmpiricalAcf { mean, variance, acf })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcfInterval {
    pub lag: usize,
    pub acf: f64,
    pub stderr: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Bartlett bandwidth `⌊4 (n/100)^{2/9}⌋`.
pub fn default_bandwidth(n: usize) -> usize {
    (4.0 * (n as f64 / 100.0).powf(2.0 / 9.0)).floor() as usize
}

/// Normal intervals for the sample autocorrelations.
///
/// The long-run covariance of `Vₖ = (xₖ, (xₖ−x̄)², (xₖ−x̄)(xₖ₊₁−x̄), …)` is
/// estimated with a Bartlett taper and propagated to `γ̂(d)/γ̂(0)` by the delta
/// method.
pub fn acf_confidence(
    binned: &BinnedCounts,
    max_lag: usize,
    level: f64,
    bandwidth: Option<usize>,
) -> Result<Vec<AcfInterval>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidInput(format!("level must be in (0, 1), got {level}")));
    }
    let emp = empirical_acf(binned, max_lag)?;
    let x = binned.as_f64();
    let n = x.len();
    let rows = n - max_lag;
    let dim = max_lag + 2;
    let c: Vec<f64> = x.iter().map(|v| v - emp.mean).collect();
    // V_k as rows, centred
    let mut v = vec![0.0; rows * dim];
    for k in 0..rows {
        let r = &mut v[k * dim..(k + 1) * dim];
        r[0] = x[k];
        for d in 0..=max_lag {
            r[d + 1] = c[k] * c[k + d];
        }
    }
    let mut mean = vec![0.0; dim];
    for k in 0..rows {
        for i in 0..dim {
            mean[i] += v[k * dim + i];
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    for k in 0..rows {
        for i in 0..dim {
            v[k * dim + i] -= mean[i];
        }
    }
    let bw = bandwidth.unwrap_or_else(|| default_bandwidth(n)).min(rows - 1);
    let autocov = |l: usize| {
        let mut g = DMatrix::zeros(dim, dim);
        for k in 0..rows - l {
            let a = &v[k * dim..(k + 1) * dim];
            let b = &v[(k + l) * dim..(k + l + 1) * dim];
            for i in 0..dim {
                for j in 0..dim {
                    g[(i, j)] += a[i] * b[j];
                }
            }
        }
        g / rows as f64
    };
    let mut sigma = autocov(0);
    for l in 1..=bw {
        let w = 1.0 - l as f64 / (bw as f64 + 1.0);
        let g = autocov(l);
        sigma += (&g + g.transpose()) * w;
    }
    let z = Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(0.5 + level / 2.0);
    let g0 = emp.variance;
    Ok((1..=max_lag)
        .map(|d| {
            let rho = emp.acf[d - 1];
            let mut grad = DVector::zeros(dim);
            grad[1] = -rho / g0;
            grad[d + 1] = 1.0 / g0;
            let var = (grad.transpose() * &sigma * &grad)[(0, 0)] / rows as f64;
            let se = var.max(0.0).sqrt();
            AcfInterval { lag: d, acf: rho, stderr: se, lo: rho - z * se, hi: rho + z * se }
        })
        .collect())
}

const MME_SCREEN_PER_DIM: usize = 100;

/// `max(20, 2(p+q+1))`.
pub fn default_lags(p: usize, q: usize) -> usize {
    20.max(2 * (p + q + 1))
}

#[derive(Debug, Clone)]
pub struct MmeOptions {
    /// Used as the first start; μ is ignored.
    pub init: Option<ModelSpec>,
    pub starts: usize,
    pub seed: u64,
    pub max_iters: u64,
    /// Lag spacing used for the theoretical ACF; `Adjacent` matches how the
    /// empirical ACF of consecutive bins is formed.
    pub convention: LagConvention,
}

impl Default for MmeOptions {
    fn default() -> Self {
        Self { init: None, starts: 8, seed: 0, max_iters: 2000, convention: LagConvention::Adjacent }
    }
}

/// `Σ_d (ρ̂(d) − ρ_τ(d; a, b))²`. The ACF does not depend on μ.
pub fn mme_objective(acf_hat: &[f64], spec: &ModelSpec, tau: f64, convention: LagConvention) -> Result<f64> {
    let eng = MomentEngine::new(spec)?;
    let rho = eng.acf_with(tau, acf_hat.len(), convention)?;
    Ok(acf_hat.iter().zip(&rho).map(|(a, b)| (a - b).powi(2)).sum())
}

fn mme_theta_cost(coords: Coords, acf_hat: &[f64], tau: f64, conv: LagConvention, th: &[f64]) -> f64 {
    let d = coords.decode(th);
    let spec = ModelSpec { mu: 1.0, a: d.a, b: d.b };
    if let Some(pen) = feasibility_penalty(&spec, &d.roots) {
        return pen;
    }
    mme_objective(acf_hat, &spec, tau, conv).unwrap_or(PENALTY)
}

/// Two-step moment matching: fit (a, b) to the empirical ACF of counts in bins
/// of width τ over `m` lags, then set μ from the sample mean.
pub fn mme_fit(events: &EventTimes, p: usize, q: usize, tau: f64, m: usize, opts: &MmeOptions) -> Result<FitResult> {
    if p == 0 || q >= p {
        return Err(Error::InvalidInput(format!("need 0 <= q < p, got p={p}, q={q}")));
    }
    if m < p + q + 1 {
        return Err(Error::InvalidInput(format!("need m >= p+q+1 = {}, got {m}", p + q + 1)));
    }
    let horizon = events.last().unwrap_or(0.0);
    let binned = bin_events(events, tau, horizon)?;
    let emp = empirical_acf(&binned, m)?;
    let coords = Coords { p, q, with_mu: false };
    let conv = opts.convention;

    let mut fixed = Vec::new();
    if let Some(init) = &opts.init {
        if init.p() != p || init.q() != q {
            return Err(Error::InvalidInput(format!("init has order ({}, {}), expected ({p}, {q})", init.p(), init.q())));
        }
        fixed.push(coords.encode(init).ok_or_else(|| Error::InvalidInput("init is outside the fitted domain".into()))?);
    }
    let rate = events.len() as f64 / horizon;
    let mut base = Vec::new();
    for scale in [1.0, 0.25, 4.0, 0.1] {
        if let Some(th) = coords.encode(&heuristic_spec(p, q, rate, scale)) {
            base.push(th);
        }
    }
    let acf_hat = emp.acf.clone();
    let f = |th: &[f64]| mme_theta_cost(coords, &acf_hat, tau, conv, th);
    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
    let n_starts = opts.starts.max(1);
    // The ACF surface has distant basins (real versus complex AR roots), so
    // a cheap screen over perturbed starts picks where the searches begin.
    let starts = screen_starts(&f, fixed, &base, n_starts, MME_SCREEN_PER_DIM * coords.dim(), 1.5, &mut rng);
    let results: Vec<Result<Minimum>> = starts.par_iter().map(|s| minimize(&f, s, 0.5, opts.max_iters)).collect();
    let best = pick_best(results)?;
    let d = coords.decode(&best.x);
    let unit = ModelSpec::new(1.0, d.a.clone(), d.b.clone())?;
    let s = MomentEngine::new(&unit)?.s();
    let denom = (1.0 - s) * tau;
    if !(denom > 0.0) {
        return Err(Error::InvalidEstimate(format!("1 − bᵀÃ⁻¹e = {} is not positive", 1.0 - s)));
    }
    let spec = ModelSpec::new(emp.mean / denom, d.a, d.b)?;
    let validity = check_validity(&spec)?;
    let mut diagnostics = Vec::new();
    if !validity.stationary {
        diagnostics.push("estimate is not stationary".to_string());
    }
    Ok(FitResult {
        method: "mme".into(),
        converged: best.converged && validity.stationary,
        objective: best.value,
        iterations: best.iterations,
        validity,
        stderr: None,
        n_events: events.len(),
        starts: n_starts,
        aic: None,
        bic: None,
        diagnostics,
        spec,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KsReport {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
    pub residuals: Vec<f64>,
}

/// Asymptotic Kolmogorov tail `Q(λ) = 2 Σ (−1)^{j−1} e^{−2j²λ²}`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=100 {
        let term = sign * (-2.0 * (j * j) as f64 * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-16 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample KS test of `x` against the CDF `cdf`, with the small-sample
/// correction `λ = (√n + 0.12 + 0.11/√n) D`.
pub fn ks_test(x: &[f64], cdf: impl Fn(f64) -> f64) -> (f64, f64) {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &v) in s.iter().enumerate() {
        let f = cdf(v);
        d = d.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
    }
    let sn = n.sqrt();
    (d, kolmogorov_q((sn + 0.12 + 0.11 / sn) * d))
}

/// Time-rescaling residuals `Λ(Tᵢ₊₁) − Λ(Tᵢ)` (from `T₀ = 0`) tested against Exp(1).
pub fn residual_ks(spec: &ModelSpec, events: &EventTimes) -> Result<KsReport> {
    if events.len() < 30 {
        return Err(Error::InsufficientData(format!("{} events, need at least 30", events.len())));
    }
    let residuals = compensator_increments(spec, events)?;
    let (statistic, p_value) = ks_test(&residuals, |r| 1.0 - (-r).exp());
    Ok(KsReport { statistic, p_value, n: residuals.len(), residuals })
}
