//! Kernel evaluation and closed-form moments of binned counts.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Factored};
use crate::model::{ar_poly_deriv, build_companion_set, companion, ma_poly, CompanionSet, ModelSpec, SpectralKernel};

/// `h(t) = bᵀ e^{At} e` through the matrix exponential.
pub fn kernel_h(spec: &ModelSpec, t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::InvalidInput(format!("kernel_h needs t >= 0, got {t}")));
    }
    let a = companion(&spec.a);
    let e = linalg::expm(&a, t)?;
    let p = spec.p();
    Ok(spec.b.iter().enumerate().map(|(i, b)| b * e[(i, p - 1)]).sum())
}

/// `h(t)` as `Σ b(λᵢ)/a′(λᵢ) e^{λᵢt}`; needs distinct AR roots.
pub fn kernel_h_spectral(spec: &ModelSpec, t: f64) -> Result<f64> {
    Ok(SpectralKernel::new(spec)?.eval(t))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelTail {
    pub coefficient: f64,
    pub rate: f64,
}

/// Leading term of the spectral kernel: `h(t) ≈ coefficient · e^{rate·t}`.
pub fn kernel_tail(spec: &ModelSpec) -> Result<KernelTail> {
    let spectrum = linalg::eigenvalues(&companion(&spec.a))?;
    if !spectrum.is_distinct() {
        return Err(Error::InvalidInput("AR roots are not distinct".into()));
    }
    let l1 = spectrum.leading();
    let tol = 1e-9 * spectrum.spectral_radius().max(1.0);
    if l1.im.abs() > tol {
        return Err(Error::UnsupportedTail(format!("{l1}")));
    }
    let l1 = num_complex::Complex64::new(l1.re, 0.0);
    let c = ma_poly(&spec.b, l1) / ar_poly_deriv(&spec.a, l1);
    Ok(KernelTail { coefficient: c.re, rate: l1.re })
}

/// Classical Hawkes closed forms for `h(t) = α e^{−βt}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HawkesMoments {
    pub mean: f64,
    pub var: f64,
    pub cov: f64,
    pub acf: f64,
}

pub fn hawkes_oracle(mu: f64, alpha: f64, beta: f64, tau: f64, delta: f64) -> Result<HawkesMoments> {
    if !(alpha < beta) || alpha < 0.0 {
        return Err(Error::InvalidModel(format!("need 0 <= alpha < beta, got alpha={alpha}, beta={beta}")));
    }
    if !(mu > 0.0) {
        return Err(Error::InvalidModel("mu must be positive".into()));
    }
    let (a, b) = (alpha, beta);
    let k = 1.0 / (1.0 - a / b);
    let mean = mu * k * tau;
    let var = mu * k * (tau * k * k + (1.0 - k * k) * (1.0 - (-tau * (b - a)).exp()) / (b - a));
    let decay = ((a - b) * delta).exp();
    let cov = mu * b * a * (2.0 * b - a) * (((a - b) * tau).exp() - 1.0).powi(2) / (2.0 * (a - b).powi(4)) * decay;
    let acf = (-2.0 * b * tau).exp() * ((a * tau).exp() - (b * tau).exp()).powi(2) * a * (a - 2.0 * b)
        / (2.0 * (a * (a - 2.0 * b) * (((a - b) * tau).exp() - 1.0) + b * b * tau * (a - b)))
        * decay;
    Ok(HawkesMoments { mean, var, cov, acf })
}

/// How the lag index `d` maps to the gap `δ` between the two bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LagConvention {
    /// `δ = d − 1` in time units, independent of τ.
    #[default]
    Unit,
    /// `δ = (d − 1)τ`: the gap between bin k and bin k + d.
    Adjacent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub tau: f64,
    pub convention: LagConvention,
    pub mean_increment: f64,
    pub variance: f64,
    /// `acf[d − 1]` is the autocorrelation at lag d.
    pub acf: Vec<f64>,
    pub cov: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Per-spec cache of the companion set and the inverses every formula needs.
#[derive(Debug, Clone)]
pub struct MomentEngine {
    pub spec: ModelSpec,
    pub cs: CompanionSet,
    at_inv: DMatrix<f64>,
    /// `Ã⁻¹ e`
    at_inv_e: DVector<f64>,
    /// `bᵀÃ⁻¹e`
    s: f64,
    /// `B Ã̃⁻¹ (ẽ − C̃ Ã⁻¹ e)`, present when Ã is stable.
    w: Option<DVector<f64>>,
    warnings: Vec<String>,
}

impl MomentEngine {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let cs = build_companion_set(spec);
        let f = Factored::new(&cs.a_tilde, "Ã").map_err(|e| Error::InvalidModel(e.to_string()))?;
        let mut warnings = Vec::new();
        if f.ill_conditioned() {
            warnings.push(format!("Ã is ill-conditioned (cond ≈ {:.3e})", f.condition));
        }
        let at_inv_e = f.solve(&cs.e);
        let s = cs.b_full.dot(&at_inv_e);
        let stable = linalg::eigenvalues(&cs.a_tilde)?.max_real() < 0.0;
        let w = if stable {
            let f2 = Factored::new(&cs.a_tilde2, "Ã̃").map_err(|e| Error::AcfNonexistent(e.to_string()))?;
            if f2.ill_conditioned() {
                warnings.push(format!("Ã̃ is ill-conditioned (cond ≈ {:.3e})", f2.condition));
            }
            let rhs = &cs.e_tilde - &cs.c_tilde * &at_inv_e;
            Some(&cs.b_mat * f2.solve(&rhs))
        } else {
            None
        };
        Ok(Self { spec: spec.clone(), cs, at_inv: f.inverse, at_inv_e, s, w, warnings })
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// `bᵀÃ⁻¹e`.
    pub fn s(&self) -> f64 {
        self.s
    }

    /// Long-run event rate `μ(1 − bᵀÃ⁻¹e)`.
    pub fn stationary_rate(&self) -> f64 {
        self.spec.mu * (1.0 - self.s)
    }

    /// Long-run mean of the state, `−Ã⁻¹eμ`.
    pub fn stationary_state_mean(&self) -> DVector<f64> {
        -&self.at_inv_e * self.spec.mu
    }

    fn check_state(&self, x0: &DVector<f64>) -> Result<()> {
        if x0.len() != self.cs.p {
            return Err(Error::InvalidInput(format!("state must have length {}", self.cs.p)));
        }
        Ok(())
    }

    /// `E[X_{t0+dt} | X_{t0} = x0]`.
    pub fn conditional_mean_state(&self, x0: &DVector<f64>, dt: f64) -> Result<DVector<f64>> {
        self.check_state(x0)?;
        let shift = &self.at_inv_e * self.spec.mu;
        let e = linalg::expm(&self.cs.a_tilde, dt)?;
        let id = DMatrix::identity(self.cs.p, self.cs.p);
        Ok(x0 + (e - id) * (x0 + shift))
    }

    /// `E[N_{t0+dt} | X_{t0} = x0, N_{t0} = n0]`.
    pub fn conditional_mean_counts(&self, x0: &DVector<f64>, n0: f64, dt: f64) -> Result<f64> {
        self.check_state(x0)?;
        let e = linalg::expm(&self.cs.a_tilde, dt)?;
        let id = DMatrix::identity(self.cs.p, self.cs.p);
        let v = x0 + &self.at_inv_e * self.spec.mu;
        let bt = self.cs.b_full.transpose() * &self.at_inv;
        Ok(n0 + self.stationary_rate() * dt + (bt * (e - id) * v)[(0, 0)])
    }

    /// Expected events in `[t0 + t_gap, t0 + t_gap + τ]` given `X_{t0} = x0`.
    pub fn expected_increment(&self, x0: &DVector<f64>, t_gap: f64, tau: f64) -> Result<f64> {
        self.check_state(x0)?;
        if !(tau > 0.0) {
            return Err(Error::InvalidInput("tau must be positive".into()));
        }
        let g = linalg::expm(&self.cs.a_tilde, t_gap)?;
        let e = linalg::expm(&self.cs.a_tilde, tau)?;
        let id = DMatrix::identity(self.cs.p, self.cs.p);
        let v = x0 + &self.at_inv_e * self.spec.mu;
        let bt = self.cs.b_full.transpose() * &self.at_inv;
        Ok(self.stationary_rate() * tau + (bt * g * (e - id) * v)[(0, 0)])
    }

    pub fn stationary_mean_increment(&self, tau: f64) -> f64 {
        self.stationary_rate() * tau
    }

    fn w(&self) -> Result<&DVector<f64>> {
        self.w
            .as_ref()
            .ok_or_else(|| Error::AcfNonexistent("Ã (hence Ã̃) has an eigenvalue with non-negative real part".into()))
    }

    fn check_tau(tau: f64) -> Result<()> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::InvalidInput(format!("tau must be positive, got {tau}")));
        }
        Ok(())
    }

    /// `g∞(τ)` and the row vector `bᵀÃ⁻¹(e^{Ãτ} − I)`.
    fn cov_parts(&self, tau: f64) -> Result<(DVector<f64>, DVector<f64>)> {
        Self::check_tau(tau)?;
        let w = self.w()?;
        let mu = self.spec.mu;
        let p = self.cs.p;
        let e = linalg::expm(&self.cs.a_tilde, tau)?;
        let id = DMatrix::identity(p, p);
        let inner = &self.cs.e * self.s - &self.cs.e + &self.at_inv_e * (mu * self.s) + w;
        let g = (&id - &e) * &self.at_inv * inner * mu;
        let row = ((e - id).transpose() * self.at_inv.transpose()) * &self.cs.b_full;
        Ok((g, row))
    }

    /// Long-run covariance of counts in two bins of width τ separated by a gap δ.
    pub fn longrun_cov(&self, tau: f64, delta: f64) -> Result<f64> {
        if !(delta >= 0.0) {
            return Err(Error::InvalidInput(format!("delta must be >= 0, got {delta}")));
        }
        let (g, row) = self.cov_parts(tau)?;
        let d = linalg::expm(&self.cs.a_tilde, delta)?;
        Ok(row.dot(&(d * g)))
    }

    /// Covariances at gaps `0, step, 2·step, …` (n values).
    pub fn longrun_cov_ladder(&self, tau: f64, step: f64, n: usize) -> Result<Vec<f64>> {
        let (mut g, row) = self.cov_parts(tau)?;
        let d = linalg::expm(&self.cs.a_tilde, step)?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(row.dot(&g));
            g = &d * g;
        }
        Ok(out)
    }

    /// Long-run variance of counts in a bin of width τ.
    pub fn longrun_var(&self, tau: f64) -> Result<f64> {
        Self::check_tau(tau)?;
        let w = self.w()?;
        let (mu, s) = (self.spec.mu, self.s);
        let p = self.cs.p;
        let b = &self.cs.b_full;
        let ai = &self.at_inv;
        let ai_e = &self.at_inv_e;
        let e = linalg::expm(&self.cs.a_tilde, tau)?;
        let id = DMatrix::identity(p, p);
        let h0 = -ai_e * (mu * (1.0 - s)) + ai * ai_e * (mu * mu * s) + ai * w * mu;
        let bai = ai.transpose() * b;
        let v = (1.0 - s) * (1.0 - 2.0 * s) * mu * tau + 2.0 * bai.dot(ai_e) * tau * mu * mu * s
            + 2.0 * bai.dot(w) * mu * tau
            - 2.0 * bai.dot(&((e - id) * h0));
        Ok(v)
    }

    /// `Cov(τ, δ) / Var(τ)`.
    pub fn acf_at(&self, tau: f64, delta: f64) -> Result<f64> {
        Ok(self.longrun_cov(tau, delta)? / self.longrun_var(tau)?)
    }

    /// `ρ_τ(d) = Cov(τ, d − 1)/Var(τ)` for `d = 1..=max_lag`.
    pub fn theoretical_acf(&self, tau: f64, max_lag: usize) -> Result<Vec<f64>> {
        self.acf_with(tau, max_lag, LagConvention::Unit)
    }

    /// Autocorrelation between bin k and bin k + d, i.e. `δ = (d − 1)τ`.
    pub fn theoretical_acf_adjacent(&self, tau: f64, max_lag: usize) -> Result<Vec<f64>> {
        self.acf_with(tau, max_lag, LagConvention::Adjacent)
    }

    pub fn acf_with(&self, tau: f64, max_lag: usize, convention: LagConvention) -> Result<Vec<f64>> {
        let var = self.longrun_var(tau)?;
        Ok(self.cov_with(tau, max_lag, convention)?.into_iter().map(|c| c / var).collect())
    }

    fn cov_with(&self, tau: f64, max_lag: usize, convention: LagConvention) -> Result<Vec<f64>> {
        let step = match convention {
            LagConvention::Unit => 1.0,
            LagConvention::Adjacent => tau,
        };
        self.longrun_cov_ladder(tau, step, max_lag)
    }

    pub fn report(&self, tau: f64, max_lag: usize, convention: LagConvention) -> Result<MomentReport> {
        let variance = self.longrun_var(tau)?;
        let cov = self.cov_with(tau, max_lag, convention)?;
        let acf = cov.iter().map(|c| c / variance).collect();
        Ok(MomentReport {
            tau,
            convention,
            mean_increment: self.stationary_mean_increment(tau),
            variance,
            acf,
            cov,
            warnings: self.warnings.clone(),
        })
    }
}
