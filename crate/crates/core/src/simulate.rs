//! Exact simulation by inverting the compensator between events.
//!
//! Given the state right after event k, the compensator up to `T_k + Δ` is
//! `μΔ + bᵀ∫₀^Δ e^{As} ds · y` with `y = S(k)e`, and `S(k) = Σᵢ e^{A(T_k−Tᵢ)}`
//! is carried by the recursion `S ← e^{AΔ}S + I`. The next arrival solves
//! `compensator(Δ) = −ln u` with a bracketed Brent search.
//!
//! RNG: ChaCha20 seeded with `seed_from_u64(seed)`. Parallel replications use
//! the same seed with `set_stream(replication index)`, so every stream is
//! disjoint and reproducible on any platform.

use argmin::core::{CostFunction, Executor, State};
use argmin::solver::brent::BrentRoot;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{companion, ModelSpec};

/// Strictly increasing, positive, finite arrival times.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EventTimes {
    times: Vec<f64>,
}

impl EventTimes {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if let Some(&t0) = times.first() {
            if !(t0 > 0.0) {
                return Err(Error::InvalidInput(format!("first event time must be > 0, got {t0}")));
            }
        }
        if !times.iter().all(|t| t.is_finite()) {
            return Err(Error::InvalidInput("non-finite event time".into()));
        }
        if let Some(i) = times.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput(format!(
                "event times must be strictly increasing (index {}: {} then {})",
                i + 1,
                times[i],
                times[i + 1]
            )));
        }
        Ok(Self { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> Option<f64> {
        self.times.last().copied()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.times
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub horizon: Option<f64>,
    pub max_events: Option<usize>,
    pub seed: u64,
    /// ChaCha stream index, for independent replications under one seed.
    #[serde(default)]
    pub stream: u64,
    pub root_tolerance: f64,
}

impl SimConfig {
    pub fn horizon(horizon: f64, seed: u64) -> Self {
        Self { horizon: Some(horizon), max_events: None, seed, stream: 0, root_tolerance: 1e-10 }
    }

    pub fn events(max_events: usize, seed: u64) -> Self {
        Self { horizon: None, max_events: Some(max_events), seed, stream: 0, root_tolerance: 1e-10 }
    }

    pub fn with_stream(mut self, stream: u64) -> Self {
        self.stream = stream;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon.is_none() && self.max_events.is_none() {
            return Err(Error::InvalidInput("set a horizon or a maximum event count".into()));
        }
        if let Some(h) = self.horizon {
            if !(h >= 0.0) || !h.is_finite() {
                return Err(Error::InvalidInput(format!("horizon must be finite and >= 0, got {h}")));
            }
        }
        if !(self.root_tolerance > 0.0) {
            return Err(Error::InvalidInput("root_tolerance must be positive".into()));
        }
        Ok(())
    }

    pub fn rng(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

/// Running sum `S(k) = Σᵢ e^{A(T_k − Tᵢ)}` after k events.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub s: DMatrix<f64>,
    pub last_event: f64,
    pub count: usize,
}

impl SimState {
    pub fn new(p: usize) -> Self {
        Self { s: DMatrix::zeros(p, p), last_event: 0.0, count: 0 }
    }

    /// `S(k)e`, the state right after the last event.
    pub fn state_after(&self) -> DVector<f64> {
        self.s.column(self.s.ncols() - 1).into_owned()
    }

    /// `S ← e^{AΔ}S + I` with `Δ = new_time − last_event`.
    pub fn advance(&mut self, a: &DMatrix<f64>, new_time: f64) -> Result<()> {
        if !(new_time > self.last_event) {
            return Err(Error::InvalidInput(format!(
                "event time {new_time} does not follow {}",
                self.last_event
            )));
        }
        let p = a.nrows();
        let e = linalg::expm(a, new_time - self.last_event)?;
        self.s = e * &self.s + DMatrix::identity(p, p);
        self.last_event = new_time;
        self.count += 1;
        Ok(())
    }
}

pub fn advance_state(spec: &ModelSpec, state: &SimState, new_time: f64) -> Result<SimState> {
    let mut next = state.clone();
    next.advance(&companion(&spec.a), new_time)?;
    Ok(next)
}

/// Eigen-coordinates of the companion matrix: `A = V diag(λ) V⁻¹` with
/// Vandermonde `V`. Lets the compensator be evaluated in O(p).
#[derive(Debug, Clone)]
struct Modal {
    lambda: Vec<Complex64>,
    v_inv: DMatrix<Complex64>,
    /// `bᵀV`
    bv: Vec<Complex64>,
}

impl Modal {
    fn new(spec: &ModelSpec, a: &DMatrix<f64>) -> Option<Self> {
        let p = spec.p();
        let spectrum = linalg::eigenvalues(a).ok()?;
        if !spectrum.is_distinct() {
            return None;
        }
        let lambda = spectrum.values;
        let v = DMatrix::from_fn(p, p, |i, j| lambda[j].powu(i as u32));
        let v_inv = v.clone().try_inverse()?;
        let norm = |m: &DMatrix<Complex64>| m.iter().map(|z| z.norm()).fold(0.0, f64::max);
        if norm(&v) * norm(&v_inv) > 1e8 || !v_inv.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
            return None;
        }
        let bf = spec.b_full();
        let bv = (0..p).map(|j| (0..p).map(|i| v[(i, j)] * bf[i]).sum()).collect();
        Some(Self { lambda, v_inv, bv })
    }

    fn coords(&self, y: &DVector<f64>) -> Vec<Complex64> {
        let n = y.len();
        (0..n).map(|i| (0..n).map(|j| self.v_inv[(i, j)] * y[j]).sum::<Complex64>() * self.bv[i]).collect()
    }

    /// `bᵀ∫₀^Δ e^{As} ds · y` from precomputed `bᵀV ⊙ V⁻¹y`.
    fn integral(&self, w: &[Complex64], dt: f64) -> f64 {
        self.lambda
            .iter()
            .zip(w)
            .map(|(l, c)| {
                let z = l * dt;
                let f = if z.norm() < 1e-3 {
                    dt * (1.0 + z / 2.0 + z * z / 6.0 + z * z * z / 24.0)
                } else {
                    (z.exp() - 1.0) / l
                };
                (c * f).re
            })
            .sum()
    }

    fn rate(&self, w: &[Complex64], dt: f64) -> f64 {
        self.lambda.iter().zip(w).map(|(l, c)| (c * (l * dt).exp()).re).sum()
    }
}

/// How the compensator is evaluated inside the root search.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Evaluation {
    /// Eigen-decomposition when A has distinct, well-separated roots; block
    /// exponential otherwise.
    Auto,
    /// Always through the block matrix exponential.
    Matrix,
}

/// Result of one root search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arrival {
    pub time: f64,
    /// Compensator increment `Λ(T_{k+1}) − Λ(T_k)`, equal to `−ln u` at the root.
    pub increment: f64,
    /// `|F(T_{k+1})|`.
    pub residual: f64,
}

/// Compensator machinery for one spec.
#[derive(Debug, Clone)]
pub struct Compensator {
    mu: f64,
    a: DMatrix<f64>,
    bf: DVector<f64>,
    modal: Option<Modal>,
}

struct RootProblem<'a> {
    comp: &'a Compensator,
    y: &'a DVector<f64>,
    w: Option<&'a [Complex64]>,
    target: f64,
}

impl CostFunction for RootProblem<'_> {
    type Param = f64;
    type Output = f64;

    fn cost(&self, dt: &f64) -> std::result::Result<f64, argmin::core::Error> {
        Ok(self.comp.increment(self.y, self.w, *dt)? - self.target)
    }
}

impl Compensator {
    pub fn new(spec: &ModelSpec, evaluation: Evaluation) -> Result<Self> {
        spec.validate()?;
        let a = companion(&spec.a);
        let modal = match evaluation {
            Evaluation::Auto if !spec.kernel_is_zero() => Modal::new(spec, &a),
            _ => None,
        };
        Ok(Self { mu: spec.mu, a, bf: spec.b_full(), modal })
    }

    pub fn companion(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn uses_modal(&self) -> bool {
        self.modal.is_some()
    }

    fn modal_coords(&self, y: &DVector<f64>) -> Option<Vec<Complex64>> {
        self.modal.as_ref().map(|m| m.coords(y))
    }

    /// `μΔ + bᵀ∫₀^Δ e^{As} ds · y`.
    fn increment(&self, y: &DVector<f64>, w: Option<&[Complex64]>, dt: f64) -> Result<f64> {
        let kernel = match (&self.modal, w) {
            (Some(m), Some(w)) => m.integral(w, dt),
            _ => {
                if self.bf.iter().all(|&x| x == 0.0) {
                    0.0
                } else {
                    self.bf.dot(&(linalg::expm_integral(&self.a, dt)? * y))
                }
            }
        };
        Ok(self.mu * dt + kernel)
    }

    /// Intensity `μ + bᵀe^{AΔ}y` at `Δ` after the last event.
    pub fn intensity(&self, y: &DVector<f64>, dt: f64) -> Result<f64> {
        Ok(self.mu + self.bf.dot(&(linalg::expm(&self.a, dt)? * y)))
    }

    fn intensity_fast(&self, y: &DVector<f64>, w: Option<&[Complex64]>, dt: f64) -> Result<f64> {
        match (&self.modal, w) {
            (Some(m), Some(w)) => Ok(self.mu + m.rate(w, dt)),
            _ => self.intensity(y, dt),
        }
    }

    /// Compensator increment from the last event to `dt` later.
    pub fn increment_after(&self, state: &SimState, dt: f64) -> Result<f64> {
        let y = state.state_after();
        self.increment(&y, None, dt)
    }

    /// Solve `μΔ + bᵀ∫₀^Δe^{As}ds·y + ln u = 0` for Δ and return `T_k + Δ`.
    pub fn next_arrival(&self, state: &SimState, u: f64, tol: f64) -> Result<Arrival> {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::InvalidInput(format!("u must lie in (0, 1), got {u}")));
        }
        let target = -u.ln();
        let hi = target / self.mu;
        let t0 = state.last_event;
        if state.count == 0 || self.bf.iter().all(|&x| x == 0.0) {
            return Ok(Arrival { time: t0 + hi, increment: target, residual: 0.0 });
        }
        let y = state.state_after();
        let w = self.modal_coords(&y);
        let problem = RootProblem { comp: self, y: &y, w: w.as_deref(), target };
        let f_hi = problem.cost(&hi).map_err(|e| Error::Numerical(e.to_string()))?;
        let scale = |dt: f64| tol * (self.mu * dt).max(1.0);
        if f_hi < 0.0 {
            if f_hi.abs() <= scale(hi) {
                return Ok(Arrival { time: t0 + hi, increment: f_hi + target, residual: f_hi.abs() });
            }
            return Err(Error::SimulationIntegrity(format!(
                "compensator at the upper bracket {hi} is below target by {}; kernel negative?",
                -f_hi
            )));
        }
        let x_tol = 1e-14 * hi.max(1e-300);
        let solver = BrentRoot::new(0.0, hi, x_tol);
        let res = Executor::new(problem, solver)
            .configure(|s| s.param(0.5 * hi).max_iters(500))
            .run()
            .map_err(|e| Error::SimulationIntegrity(format!("root search failed: {e}")))?;
        let mut dt = *res.state().get_best_param().unwrap_or(&hi);
        let problem = RootProblem { comp: self, y: &y, w: w.as_deref(), target };
        let mut f = problem.cost(&dt).map_err(|e| Error::Numerical(e.to_string()))?;
        // Newton polish when the intensity is large enough that the
        // bracket width alone does not pin F down.
        for _ in 0..4 {
            if f.abs() <= 0.01 * scale(dt) {
                break;
            }
            let lam = self.intensity_fast(&y, w.as_deref(), dt)?;
            let next = (dt - f / lam).clamp(0.0, hi);
            let fn_ = problem.cost(&next).map_err(|e| Error::Numerical(e.to_string()))?;
            if fn_.abs() >= f.abs() {
                break;
            }
            dt = next;
            f = fn_;
        }
        if !(dt > 0.0) {
            return Err(Error::SimulationIntegrity("zero inter-arrival time".into()));
        }
        Ok(Arrival { time: t0 + dt, increment: f + target, residual: f.abs() })
    }
}

/// One root search with the block-exponential compensator.
pub fn next_arrival(spec: &ModelSpec, state: &SimState, u: f64) -> Result<f64> {
    Ok(Compensator::new(spec, Evaluation::Matrix)?.next_arrival(state, u, 1e-10)?.time)
}

/// Simulated path plus per-event root diagnostics.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub events: EventTimes,
    /// `|F(T_k)|` for every event.
    pub residuals: Vec<f64>,
    /// `μ(T_k − T_{k−1})` for every event, the scale the tolerance is relative to.
    pub scales: Vec<f64>,
}

pub fn simulate_path(spec: &ModelSpec, config: &SimConfig) -> Result<EventTimes> {
    Ok(simulate_detailed(spec, config, Evaluation::Auto)?.events)
}

pub fn simulate_detailed(spec: &ModelSpec, config: &SimConfig, evaluation: Evaluation) -> Result<SimOutput> {
    config.validate()?;
    let comp = Compensator::new(spec, evaluation)?;
    let stationary = crate::moments::MomentEngine::new(spec)
        .map(|m| m.stationary_rate())
        .ok()
        .filter(|r| *r > 0.0 && r.is_finite())
        .unwrap_or(spec.mu);
    let mut rng = config.rng();
    let mut state = SimState::new(spec.p());
    let horizon = config.horizon.unwrap_or(f64::INFINITY);
    let max_events = config.max_events.unwrap_or(usize::MAX);
    let mut times = Vec::new();
    let mut residuals = Vec::new();
    let mut scales = Vec::new();
    let bf = spec.b_full();
    while times.len() < max_events {
        let u: f64 = rng.sample(Open01);
        let arrival = comp.next_arrival(&state, u, config.root_tolerance)?;
        if arrival.time > horizon {
            break;
        }
        scales.push(spec.mu * (arrival.time - state.last_event));
        state.advance(comp.companion(), arrival.time)?;
        times.push(arrival.time);
        residuals.push(arrival.residual);
        let lam = spec.mu + bf.dot(&state.state_after());
        if lam > 1e6 * stationary {
            return Err(Error::Runaway { time: arrival.time, intensity: lam, stationary });
        }
    }
    Ok(SimOutput { events: EventTimes { times }, residuals, scales })
}

/// Left-continuous intensity `μ + Σ_{Tᵢ < t} h(t − Tᵢ)` on a sorted grid.
pub fn intensity_path(spec: &ModelSpec, events: &EventTimes, grid: &[f64]) -> Result<Vec<f64>> {
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidInput("grid must be sorted".into()));
    }
    let comp = Compensator::new(spec, Evaluation::Matrix)?;
    let mut state = SimState::new(spec.p());
    let mut next = 0;
    let ev = events.times();
    let mut out = Vec::with_capacity(grid.len());
    for &t in grid {
        while next < ev.len() && ev[next] < t {
            state.advance(comp.companion(), ev[next])?;
            next += 1;
        }
        if state.count == 0 {
            out.push(spec.mu);
        } else {
            out.push(comp.intensity(&state.state_after(), t - state.last_event)?);
        }
    }
    Ok(out)
}

/// `Λ(T_{i+1}) − Λ(T_i)` for every event, starting from `T_0 = 0`.
pub fn compensator_increments(spec: &ModelSpec, events: &EventTimes) -> Result<Vec<f64>> {
    let comp = Compensator::new(spec, Evaluation::Matrix)?;
    let mut state = SimState::new(spec.p());
    let mut out = Vec::with_capacity(events.len());
    for &t in events.times() {
        let dt = t - state.last_event;
        out.push(if state.count == 0 { spec.mu * dt } else { comp.increment_after(&state, dt)? });
        state.advance(comp.companion(), t)?;
    }
    Ok(out)
}
