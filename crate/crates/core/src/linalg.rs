//! Dense matrix numerics used by every closed form in the crate.
//!
//! The matrix exponential is nalgebra's scaling-and-squaring Padé
//! implementation. Integrals of exponentials are read off the exponential of
//! a block upper-triangular matrix (Van Loan), so no inverse is needed even
//! when the generator is singular.

use nalgebra::{DMatrix, DVector, Schur};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Condition numbers above this trigger a warning in reports.
pub const COND_WARN: f64 = 1e12;

fn check_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what}: non-finite entry")))
    }
}

fn check_square(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.nrows() == 0 || m.nrows() != m.ncols() {
        return Err(Error::InvalidInput(format!(
            "{what}: expected a non-empty square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    check_finite(m, what)
}

/// `e^{M t}`.
pub fn expm(m: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    check_square(m, "expm")?;
    if !t.is_finite() {
        return Err(Error::InvalidInput("expm: non-finite t".into()));
    }
    if t == 0.0 {
        return Ok(DMatrix::identity(m.nrows(), m.nrows()));
    }
    let out = (m * t).exp();
    check_finite(&out, "expm result").map_err(|_| Error::Numerical("expm overflow".into()))?;
    Ok(out)
}

/// `∫₀ᵗ e^{M s} ds`, via the top-right block of `exp([[M, I], [0, 0]] t)`.
pub fn expm_integral(m: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    check_square(m, "expm_integral")?;
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::InvalidInput(format!("expm_integral: t must be finite and >= 0, got {t}")));
    }
    let n = m.nrows();
    let mut big = DMatrix::zeros(2 * n, 2 * n);
    big.view_mut((0, 0), (n, n)).copy_from(m);
    big.view_mut((0, n), (n, n)).fill_with_identity();
    let e = expm(&big, t)?;
    Ok(e.view((0, n), (n, n)).into_owned())
}

/// `∫₀ᵗ e^{H11 (t−u)} H12 e^{H22 u} du`, the off-diagonal block of
/// `exp([[H11, H12], [0, H22]] t)`.
pub fn coupled_block_integral(
    h11: &DMatrix<f64>,
    h12: &DMatrix<f64>,
    h22: &DMatrix<f64>,
    t: f64,
) -> Result<DMatrix<f64>> {
    check_square(h11, "H11")?;
    check_square(h22, "H22")?;
    check_finite(h12, "H12")?;
    let (d1, d2) = (h11.nrows(), h22.nrows());
    if h12.nrows() != d1 || h12.ncols() != d2 {
        return Err(Error::InvalidInput(format!(
            "H12 must be {d1}x{d2}, got {}x{}",
            h12.nrows(),
            h12.ncols()
        )));
    }
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::InvalidInput(format!("coupled_block_integral: bad t {t}")));
    }
    let mut big = DMatrix::zeros(d1 + d2, d1 + d2);
    big.view_mut((0, 0), (d1, d1)).copy_from(h11);
    big.view_mut((0, d1), (d1, d2)).copy_from(h12);
    big.view_mut((d1, d1), (d2, d2)).copy_from(h22);
    let e = expm(&big, t)?;
    Ok(e.view((0, d1), (d1, d2)).into_owned())
}

/// Eigenvalues sorted by real part descending, ties by imaginary part descending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexSpectrum {
    pub values: Vec<Complex64>,
}

impl ComplexSpectrum {
    /// Sorts in place using a relative tolerance for real-part ties, so that
    /// conjugate pairs come out as `(x + iy, x − iy)`.
    pub fn from_unsorted(mut values: Vec<Complex64>) -> Self {
        let scale = values.iter().map(|z| z.norm()).fold(1.0_f64, f64::max);
        let tol = 1e-10 * scale;
        values.sort_by(|x, y| {
            if (x.re - y.re).abs() <= tol {
                y.im.total_cmp(&x.im)
            } else {
                y.re.total_cmp(&x.re)
            }
        });
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// The eigenvalue with largest real part.
    pub fn leading(&self) -> Complex64 {
        self.values[0]
    }

    pub fn max_real(&self) -> f64 {
        self.values.first().map_or(f64::NEG_INFINITY, |z| z.re)
    }

    pub fn spectral_radius(&self) -> f64 {
        self.values.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Smallest pairwise distance between eigenvalues (infinite for n = 1).
    pub fn min_gap(&self) -> f64 {
        let mut gap = f64::INFINITY;
        for (i, x) in self.values.iter().enumerate() {
            for y in &self.values[i + 1..] {
                gap = gap.min((x - y).norm());
            }
        }
        gap
    }

    /// Distinct in the sense `min_gap > 1e-8 · spectral_radius`.
    pub fn is_distinct(&self) -> bool {
        self.min_gap() > 1e-8 * self.spectral_radius().max(f64::MIN_POSITIVE)
    }
}

pub fn eigenvalues(m: &DMatrix<f64>) -> Result<ComplexSpectrum> {
    check_square(m, "eigenvalues")?;
    let schur = Schur::try_new(m.clone(), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical(format!("Schur iteration did not converge for {m}")))?;
    let vals = schur.complex_eigenvalues();
    Ok(ComplexSpectrum::from_unsorted(vals.iter().copied().collect()))
}

fn norm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// LU-factored square matrix with its 1-norm condition number.
#[derive(Debug, Clone)]
pub struct Factored {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    pub inverse: DMatrix<f64>,
    pub condition: f64,
}

impl Factored {
    pub fn new(m: &DMatrix<f64>, what: &str) -> Result<Self> {
        check_square(m, what)?;
        let lu = m.clone().lu();
        let inverse = lu
            .try_inverse()
            .ok_or_else(|| Error::Numerical(format!("{what} is singular")))?;
        if !inverse.iter().all(|x| x.is_finite()) {
            return Err(Error::Numerical(format!("{what} is numerically singular")));
        }
        let condition = norm1(m) * norm1(&inverse);
        Ok(Self { lu, inverse, condition })
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.lu.solve(rhs).expect("factorization already checked invertible")
    }

    pub fn ill_conditioned(&self) -> bool {
        !(self.condition <= COND_WARN)
    }
}
