//! Model specification, the derived companion matrices, and validity checks.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, ComplexSpectrum, Factored};

/// Parameters of a CARMA(p,q)-Hawkes model.
///
/// `a = [a₁, …, a_p]` are the autoregressive coefficients of
/// `a(z) = z^p + a₁z^{p−1} + … + a_p`, and `b = [b₀, …, b_q]` the
/// moving-average coefficients of `b(z) = b₀ + b₁z + … + b_q z^q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub mu: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl ModelSpec {
    pub fn new(mu: f64, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        let s = Self { mu, a, b };
        s.validate()?;
        Ok(s)
    }

    /// Classical exponential Hawkes: `h(t) = α e^{−βt}`.
    pub fn hawkes(mu: f64, alpha: f64, beta: f64) -> Result<Self> {
        Self::new(mu, vec![beta], vec![alpha])
    }

    pub fn p(&self) -> usize {
        self.a.len()
    }

    pub fn q(&self) -> usize {
        self.b.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.a.is_empty() {
            return Err(Error::InvalidInput("p must be at least 1".into()));
        }
        if self.b.is_empty() || self.b.len() > self.a.len() {
            return Err(Error::InvalidInput(format!(
                "need 0 <= q < p, got {} MA and {} AR coefficients",
                self.b.len(),
                self.a.len()
            )));
        }
        if !(self.mu > 0.0) || !self.mu.is_finite() {
            return Err(Error::InvalidInput(format!("mu must be positive and finite, got {}", self.mu)));
        }
        if !self.a.iter().chain(&self.b).all(|x| x.is_finite()) {
            return Err(Error::InvalidInput("non-finite coefficient".into()));
        }
        Ok(())
    }

    /// `[b₀, …, b_q, 0, …, 0]` of length p.
    pub fn b_full(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.p());
        for (i, &x) in self.b.iter().enumerate() {
            v[i] = x;
        }
        v
    }

    pub fn kernel_is_zero(&self) -> bool {
        self.b.iter().all(|&x| x == 0.0)
    }
}

/// Every matrix and vector derived from a [`ModelSpec`].
#[derive(Debug, Clone)]
pub struct CompanionSet {
    pub p: usize,
    pub m: usize,
    pub a: DMatrix<f64>,
    pub a_tilde: DMatrix<f64>,
    pub a_tilde2: DMatrix<f64>,
    pub b_mat: DMatrix<f64>,
    pub c_tilde: DMatrix<f64>,
    pub e: DVector<f64>,
    pub e_tilde: DVector<f64>,
    pub b_full: DVector<f64>,
}

/// Row offset (0-based) of block `j` (1-based) in vlt ordering.
fn block_start(p: usize, j: usize) -> usize {
    (1..j).map(|k| p - k + 1).sum()
}

/// Position of entry (i, j), i ≥ j, both 1-based, in a vlt vector.
pub fn vlt_index(p: usize, i: usize, j: usize) -> usize {
    debug_assert!(i >= j && i <= p && j >= 1);
    block_start(p, j) + (i - j)
}

/// Companion matrix: ones on the superdiagonal, last row `[−a_p, …, −a₁]`.
pub fn companion(a: &[f64]) -> DMatrix<f64> {
    let p = a.len();
    let mut m = DMatrix::zeros(p, p);
    for i in 0..p - 1 {
        m[(i, i + 1)] = 1.0;
    }
    for k in 0..p {
        m[(p - 1, k)] = -a[p - 1 - k];
    }
    m
}

pub fn build_companion_set(spec: &ModelSpec) -> CompanionSet {
    let p = spec.p();
    let m = p * (p + 1) / 2;
    let a = &spec.a;
    let bf = spec.b_full();
    let a_mat = companion(a);
    let mut e = DVector::zeros(p);
    e[p - 1] = 1.0;
    let a_tilde = &a_mat + &e * bf.transpose();

    // coefficient b_{k} − a_{p−k}, k 0-based
    let c = |k: usize| bf[k] - a[p - 1 - k];

    let mut att = DMatrix::zeros(m, m);
    for j in 1..=p {
        let r0 = block_start(p, j);
        let n = p - j + 1;
        if j == p {
            att[(r0, r0)] = 2.0 * c(p - 1);
        } else {
            // D^j
            att[(r0, r0 + 1)] = 2.0;
            for h in 1..n - 1 {
                att[(r0 + h, r0 + h + 1)] = 1.0;
            }
            for l in 0..n {
                att[(r0 + n - 1, r0 + l)] = c(j - 1 + l);
            }
            // U^{j,j+1}
            for h in 1..n {
                att[(r0 + h, r0 + n + h - 1)] += 1.0;
            }
        }
        // L^{j,i}
        for i in 1..j {
            let c0 = block_start(p, i);
            let mut v = c(i - 1);
            if j == p {
                v *= 2.0;
            }
            att[(r0 + n - 1, c0 + j - i)] += v;
        }
    }

    let mut b_mat = DMatrix::zeros(p, m);
    for i in 0..p {
        for j in 0..p {
            let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
            b_mat[(i, vlt_index(p, hi + 1, lo + 1))] += bf[j];
        }
    }

    let mut c_tilde = DMatrix::zeros(m, p);
    for j in 1..p {
        c_tilde[(vlt_index(p, p, j), j - 1)] = spec.mu;
    }
    for j in 0..p {
        c_tilde[(m - 1, j)] = bf[j];
    }
    c_tilde[(m - 1, p - 1)] += 2.0 * spec.mu;

    let mut e_tilde = DVector::zeros(m);
    e_tilde[m - 1] = 1.0;

    CompanionSet { p, m, a: a_mat, a_tilde, a_tilde2: att, b_mat, c_tilde, e, e_tilde, b_full: bf }
}

/// Lower triangle of `H Hᵀ` stacked column by column.
pub fn vlt(h: &DVector<f64>) -> DVector<f64> {
    let p = h.len();
    let mut out = DVector::zeros(p * (p + 1) / 2);
    let mut k = 0;
    for j in 0..p {
        for i in j..p {
            out[k] = h[i] * h[j];
            k += 1;
        }
    }
    out
}

/// Lower triangle of a symmetric matrix in the same ordering as [`vlt`].
pub fn vlt_sym(s: &DMatrix<f64>) -> DVector<f64> {
    let p = s.nrows();
    let mut out = DVector::zeros(p * (p + 1) / 2);
    let mut k = 0;
    for j in 0..p {
        for i in j..p {
            out[k] = s[(i, j)];
            k += 1;
        }
    }
    out
}

/// Inverse of [`vlt_sym`].
pub fn unvlt(v: &DVector<f64>, p: usize) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(p, p);
    let mut k = 0;
    for j in 0..p {
        for i in j..p {
            s[(i, j)] = v[k];
            s[(j, i)] = v[k];
            k += 1;
        }
    }
    s
}

fn poly_eval(coef_low_first: &[f64], z: Complex64) -> Complex64 {
    coef_low_first.iter().rev().fold(Complex64::new(0.0, 0.0), |acc, &c| acc * z + c)
}

/// `a(z) = z^p + a₁z^{p−1} + … + a_p`.
pub fn ar_poly(a: &[f64], z: Complex64) -> Complex64 {
    a.iter().fold(Complex64::new(1.0, 0.0), |acc, &c| acc * z + c)
}

/// `a′(z)`.
pub fn ar_poly_deriv(a: &[f64], z: Complex64) -> Complex64 {
    let p = a.len();
    let mut acc = Complex64::new(p as f64, 0.0);
    for (k, &c) in a.iter().enumerate().take(p - 1) {
        acc = acc * z + c * (p - 1 - k) as f64;
    }
    acc
}

/// `b(z) = b₀ + b₁z + … + b_q z^q`.
pub fn ma_poly(b: &[f64], z: Complex64) -> Complex64 {
    poly_eval(b, z)
}

/// Kernel as a sum of exponentials `Σ cᵢ e^{λᵢ t}` with `cᵢ = b(λᵢ)/a′(λᵢ)`.
/// Needs distinct AR roots.
#[derive(Debug, Clone)]
pub struct SpectralKernel {
    pub poles: Vec<Complex64>,
    pub residues: Vec<Complex64>,
}

impl SpectralKernel {
    pub fn from_poles(spec: &ModelSpec, poles: Vec<Complex64>) -> Self {
        let residues = poles.iter().map(|&l| ma_poly(&spec.b, l) / ar_poly_deriv(&spec.a, l)).collect();
        Self { poles, residues }
    }

    pub fn new(spec: &ModelSpec) -> Result<Self> {
        let spectrum = linalg::eigenvalues(&companion(&spec.a))?;
        if !spectrum.is_distinct() {
            return Err(Error::InvalidInput("AR roots are not distinct".into()));
        }
        Ok(Self::from_poles(spec, spectrum.values))
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.poles
            .iter()
            .zip(&self.residues)
            .map(|(l, c)| (c * (l * t).exp()).re)
            .sum()
    }

    /// `∫₀ᵗ h(s) ds`.
    pub fn integral(&self, t: f64) -> f64 {
        self.poles
            .iter()
            .zip(&self.residues)
            .map(|(l, c)| (c * ((l * t).exp() - 1.0) / l).re)
            .sum()
    }
}

/// Which sufficient or necessary rule settled the verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelRule {
    ZeroKernel,
    /// CAR(p) with all AR roots real and negative.
    RuleB,
    /// CAR(p) with every complex pair dominated by a distinct real root.
    RuleC,
    /// CAR(p) necessary condition: a real root must dominate.
    RuleD,
    /// Interlacing partial sums of sorted AR and MA roots.
    RuleE,
    /// Exact CARMA(2,1) criterion.
    RuleF,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub points: usize,
    pub t_max: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum KernelVerdict {
    ProvenNonnegative { rule: KernelRule },
    ProvenNotNonnegative { rule: KernelRule },
    NumericallyNonnegative { grid: GridSpec, min_value: f64 },
    NumericallyNegative { t: f64, value: f64 },
}

impl KernelVerdict {
    pub fn is_nonnegative(&self) -> bool {
        matches!(self, KernelVerdict::ProvenNonnegative { .. } | KernelVerdict::NumericallyNonnegative { .. })
    }
}

pub const KERNEL_GRID_POINTS: usize = 4096;

/// Real roots (sorted descending) and complex pairs (one representative each,
/// positive imaginary part) of a spectrum. Roots with `|im| ≤ tol` count as real.
fn split_roots(values: &[Complex64], tol: f64) -> (Vec<f64>, Vec<Complex64>) {
    let mut reals: Vec<f64> = values.iter().filter(|z| z.im.abs() <= tol).map(|z| z.re).collect();
    reals.sort_by(|x, y| y.total_cmp(x));
    let pairs = values.iter().filter(|z| z.im > tol).copied().collect();
    (reals, pairs)
}

fn real_roots_of(coef_low_first: &[f64]) -> Option<Vec<f64>> {
    // trailing zeros reduce the degree
    let mut c = coef_low_first.to_vec();
    while c.len() > 1 && *c.last().unwrap() == 0.0 {
        c.pop();
    }
    let deg = c.len() - 1;
    if deg == 0 {
        return Some(Vec::new());
    }
    let lead = c[deg];
    // monic companion in the same layout as the AR companion
    let a: Vec<f64> = (0..deg).map(|k| c[deg - 1 - k] / lead).collect();
    let spec = linalg::eigenvalues(&companion(&a)).ok()?;
    let tol = 1e-9 * spec.spectral_radius().max(1.0);
    let (reals, pairs) = split_roots(&spec.values, tol);
    if !pairs.is_empty() {
        return None;
    }
    Some(reals)
}

fn grid_points(t_max: f64) -> Vec<f64> {
    let lo = t_max * 1e-7;
    let n = KERNEL_GRID_POINTS;
    let ratio = (t_max / lo).ln() / (n - 1) as f64;
    std::iter::once(0.0).chain((0..n).map(|k| lo * (ratio * k as f64).exp())).collect()
}

/// Evaluate the kernel on the log-spaced grid and report the first violation.
pub fn numeric_kernel_check(spec: &ModelSpec, spectrum_a: &ComplexSpectrum) -> KernelVerdict {
    let lead = spectrum_a.max_real();
    let rate = if lead < 0.0 { -lead } else { spectrum_a.spectral_radius().max(1e-6) };
    let t_max = 40.0 / rate;
    let bnorm = spec.b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let threshold = -1e-12 * bnorm.max(1.0);
    let grid = grid_points(t_max);
    let eval: Box<dyn Fn(f64) -> f64> = if spectrum_a.is_distinct() {
        let k = SpectralKernel::from_poles(spec, spectrum_a.values.clone());
        Box::new(move |t| k.eval(t))
    } else {
        let a = companion(&spec.a);
        let bf = spec.b_full();
        Box::new(move |t| {
            let e = linalg::expm(&a, t).expect("finite companion");
            (bf.transpose() * e.column(a.ncols() - 1))[(0, 0)]
        })
    };
    let mut min_value = f64::INFINITY;
    for &t in &grid {
        let v = eval(t);
        if v < threshold || !v.is_finite() {
            return KernelVerdict::NumericallyNegative { t, value: v };
        }
        min_value = min_value.min(v);
    }
    KernelVerdict::NumericallyNonnegative {
        grid: GridSpec { points: grid.len(), t_max, threshold },
        min_value,
    }
}

/// Non-negativity of `h(t) = bᵀe^{At}e`: exact rules first, numeric grid otherwise.
pub fn check_kernel_nonnegativity(spec: &ModelSpec) -> Result<KernelVerdict> {
    if spec.kernel_is_zero() {
        return Ok(KernelVerdict::ProvenNonnegative { rule: KernelRule::ZeroKernel });
    }
    let spectrum = linalg::eigenvalues(&companion(&spec.a))?;
    Ok(kernel_verdict_with(spec, &spectrum))
}

fn kernel_verdict_with(spec: &ModelSpec, spectrum: &ComplexSpectrum) -> KernelVerdict {
    use KernelRule::*;
    if spec.kernel_is_zero() {
        return KernelVerdict::ProvenNonnegative { rule: ZeroKernel };
    }
    let p = spec.p();
    let tol = 1e-9 * spectrum.spectral_radius().max(1.0);
    let (reals, pairs) = split_roots(&spectrum.values, tol);
    let all_real_negative = pairs.is_empty() && reals.iter().all(|&x| x < 0.0);
    let car = spec.q() == 0 && spec.b[0] > 0.0;

    // (b)
    if car && all_real_negative {
        return KernelVerdict::ProvenNonnegative { rule: RuleB };
    }
    // (f)
    if p == 2 && spec.b.len() == 2 {
        let (b0, b1) = (spec.b[0], spec.b[1]);
        let ok = pairs.is_empty()
            && reals.len() == 2
            && reals[0] < 0.0
            && b1 >= 0.0
            && b0 + reals[0] * b1 >= 0.0;
        return if ok {
            KernelVerdict::ProvenNonnegative { rule: RuleF }
        } else {
            KernelVerdict::ProvenNotNonnegative { rule: RuleF }
        };
    }
    if car && spectrum.max_real() < 0.0 {
        // (c): greedy matching of pairs (by real part, descending) to real roots
        let mut pr: Vec<f64> = pairs.iter().map(|z| z.re).collect();
        pr.sort_by(|x, y| y.total_cmp(x));
        if pr.len() <= reals.len() && pr.iter().zip(&reals).all(|(re, r)| *r >= *re - tol) {
            return KernelVerdict::ProvenNonnegative { rule: RuleC };
        }
        // (d): necessary only
        let lead = spectrum.max_real();
        if !reals.iter().any(|&r| r >= lead - tol) {
            return KernelVerdict::ProvenNotNonnegative { rule: RuleD };
        }
    }
    // (e)
    if all_real_negative && spec.q() >= 1 && spec.b[spec.q()] > 0.0 {
        if let Some(gammas) = real_roots_of(&spec.b) {
            if gammas.len() == spec.q()
                && gammas.iter().all(|&g| g < 0.0)
                && (1..=gammas.len()).all(|k| {
                    gammas[..k].iter().sum::<f64>() <= reals[..k].iter().sum::<f64>() + tol
                })
            {
                return KernelVerdict::ProvenNonnegative { rule: RuleE };
            }
        }
    }
    numeric_kernel_check(spec, spectrum)
}

/// Stationarity and moment-existence diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityReport {
    /// `−bᵀA⁻¹e`; `None` when A is singular.
    pub branching_ratio: Option<f64>,
    pub spectrum_a: ComplexSpectrum,
    pub spectrum_a_tilde: ComplexSpectrum,
    pub spectrum_a_tilde2: ComplexSpectrum,
    pub eigenvalues_distinct: bool,
    pub kernel_verdict: KernelVerdict,
    pub stationary: bool,
    pub moments_exist: bool,
    pub acf_exists: bool,
    pub diagnostics: Vec<String>,
}

pub fn check_validity(spec: &ModelSpec) -> Result<ValidityReport> {
    spec.validate()?;
    let cs = build_companion_set(spec);
    let mut diagnostics = Vec::new();

    let branching_ratio = if spec.a[spec.p() - 1] == 0.0 {
        diagnostics.push("A is singular (a_p = 0); branching ratio undefined".to_string());
        None
    } else {
        match Factored::new(&cs.a, "A") {
            Ok(f) => {
                if f.ill_conditioned() {
                    diagnostics.push(format!("A is ill-conditioned (cond ≈ {:.3e})", f.condition));
                }
                Some(-(cs.b_full.transpose() * f.solve(&cs.e))[(0, 0)])
            }
            Err(_) => {
                diagnostics.push("A is numerically singular".to_string());
                None
            }
        }
    };

    let spectrum_a = linalg::eigenvalues(&cs.a)?;
    let spectrum_a_tilde = linalg::eigenvalues(&cs.a_tilde)?;
    let spectrum_a_tilde2 = linalg::eigenvalues(&cs.a_tilde2)?;
    let eigenvalues_distinct = spectrum_a.is_distinct();
    if !eigenvalues_distinct {
        diagnostics.push("eigenvalues of A are not distinct".to_string());
    }
    let kernel_verdict = kernel_verdict_with(spec, &spectrum_a);
    let a_stable = spectrum_a.max_real() < 0.0;
    if !a_stable {
        diagnostics.push(format!("A has an eigenvalue with real part {:.6}", spectrum_a.max_real()));
    }
    let br_ok = branching_ratio.is_some_and(|r| r < 1.0);
    if let Some(r) = branching_ratio {
        if r >= 1.0 {
            diagnostics.push(format!("branching ratio {r:.6} >= 1"));
        }
    }
    if !kernel_verdict.is_nonnegative() {
        diagnostics.push("kernel takes negative values".to_string());
    }
    let moments_exist = spectrum_a_tilde.max_real() < 0.0;
    let acf_exists = moments_exist && spectrum_a_tilde2.max_real() < 0.0;
    Ok(ValidityReport {
        branching_ratio,
        stationary: a_stable && eigenvalues_distinct && br_ok && kernel_verdict.is_nonnegative(),
        spectrum_a,
        spectrum_a_tilde,
        spectrum_a_tilde2,
        eigenvalues_distinct,
        kernel_verdict,
        moments_exist,
        acf_exists,
        diagnostics,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationBound {
    pub norm_order: u32,
    /// `‖S⁻¹ e bᵀ S‖_r` computed directly.
    pub direct: f64,
    /// `κ_r(S) ‖e bᵀ‖_r`; for r = 2 this is `σ_max/σ_min · ‖b‖₂`.
    pub lhs: f64,
    /// `|Re λ₁|`. The sufficient condition is stated against `Re λ₁`, which is
    /// negative for any stable A, so the magnitude is used.
    pub rhs: f64,
    pub holds: bool,
}

fn cnorm(m: &DMatrix<Complex64>, r: u32) -> f64 {
    match r {
        1 => m.column_iter().map(|c| c.iter().map(|z| z.norm()).sum::<f64>()).fold(0.0, f64::max),
        _ => m.clone().svd(false, false).singular_values.max(),
    }
}

/// Bauer–Fike style sufficient condition for Ã to inherit stability from A.
pub fn perturbation_sufficient_bound(spec: &ModelSpec, norm_order: u32) -> Result<PerturbationBound> {
    spec.validate()?;
    if norm_order != 1 && norm_order != 2 {
        return Err(Error::InvalidInput(format!("norm_order must be 1 or 2, got {norm_order}")));
    }
    let p = spec.p();
    let spectrum = linalg::eigenvalues(&companion(&spec.a))?;
    if !spectrum.is_distinct() {
        return Err(Error::InvalidInput("A is defective: eigenvalues not distinct".into()));
    }
    let s = DMatrix::from_fn(p, p, |i, j| spectrum.values[j].powu(i as u32));
    let s_inv = s
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidInput("eigenvector matrix is singular".into()))?;
    let bf = spec.b_full();
    let mut ebt = DMatrix::<Complex64>::zeros(p, p);
    for j in 0..p {
        ebt[(p - 1, j)] = Complex64::new(bf[j], 0.0);
    }
    let direct = cnorm(&(&s_inv * &ebt * &s), norm_order);
    let kappa = cnorm(&s, norm_order) * cnorm(&s_inv, norm_order);
    let lhs = kappa * cnorm(&ebt, norm_order);
    let rhs = spectrum.max_real().abs();
    Ok(PerturbationBound { norm_order, direct, lhs, rhs, holds: lhs < rhs })
}
