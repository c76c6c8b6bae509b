#![allow(dead_code)]

use carma_hawkes::model::ModelSpec;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn study_spec() -> ModelSpec {
    let pi2 = std::f64::consts::PI.powi(2);
    ModelSpec::new(0.3, vec![1.3, 0.34 + pi2 / 4.0, 0.025 + 0.025 * pi2], vec![0.2, 0.3]).unwrap()
}

pub fn hawkes_spec() -> ModelSpec {
    ModelSpec::hawkes(0.2, 0.5, 0.7).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

/// Random matrix shifted so every eigenvalue has real part ≤ −margin.
pub fn random_stable(rng: &mut impl Rng, n: usize, margin: f64) -> DMatrix<f64> {
    let m = random_matrix(rng, n, n);
    let lead = carma_hawkes::linalg::eigenvalues(&m).unwrap().max_real();
    m - DMatrix::identity(n, n) * (lead + margin)
}

/// Truncated Taylor series of e^{M}.
pub fn exp_series(m: &DMatrix<f64>, terms: usize) -> DMatrix<f64> {
    let n = m.nrows();
    let mut term = DMatrix::identity(n, n);
    let mut sum = term.clone();
    for k in 1..terms {
        term = &term * m / k as f64;
        sum += &term;
    }
    sum
}

/// e^{M t} as the 2^s-th power of a short-step Taylor series; no Padé involved.
pub fn exp_oracle(m: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    let norm = (m * t).abs().max() * m.nrows() as f64;
    let s = norm.log2().ceil().max(0.0) as i32 + 4;
    let mut e = exp_series(&(m * (t / 2f64.powi(s))), 30);
    for _ in 0..s {
        e = &e * &e;
    }
    e
}

/// Composite Simpson rule for ∫₀ᵗ e^{H11(t−u)} H12 e^{H22 u} du, with the
/// exponentials at the nodes built by repeated multiplication of one step.
pub fn simpson_coupled(h11: &DMatrix<f64>, h12: &DMatrix<f64>, h22: &DMatrix<f64>, t: f64, panels: usize) -> DMatrix<f64> {
    assert!(panels % 2 == 0);
    let h = t / panels as f64;
    let s1 = exp_oracle(h11, h);
    let s2 = exp_oracle(h22, h);
    let mut left = vec![DMatrix::identity(h11.nrows(), h11.nrows())];
    let mut right = vec![DMatrix::identity(h22.nrows(), h22.nrows())];
    for k in 1..=panels {
        left.push(&s1 * &left[k - 1]);
        right.push(&s2 * &right[k - 1]);
    }
    let mut acc = DMatrix::zeros(h12.nrows(), h12.ncols());
    for k in 0..=panels {
        let w = if k == 0 || k == panels { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += (&left[panels - k] * h12 * &right[k]) * w;
    }
    acc * (h / 3.0)
}

/// Simpson rule for a scalar function.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let h = (b - a) / panels as f64;
    let mut acc = f(a) + f(b);
    for k in 1..panels {
        acc += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

/// Random stationary CARMA spec with real negative AR roots and a positive
/// kernel, so every moment exists.
pub fn random_stationary(rng: &mut impl Rng, p: usize) -> ModelSpec {
    loop {
        let mut roots: Vec<f64> = (0..p).map(|_| -rng.random_range(0.2..3.0)).collect();
        roots.sort_by(|a, b| b.total_cmp(a));
        if roots.windows(2).any(|w| (w[0] - w[1]).abs() < 0.05) {
            continue;
        }
        let mut poly = vec![1.0];
        for r in &roots {
            let mut next = vec![0.0; poly.len() + 1];
            for (i, c) in poly.iter().enumerate() {
                next[i] += c;
                next[i + 1] -= c * r;
            }
            poly = next;
        }
        let a = poly[1..].to_vec();
        let ratio = rng.random_range(0.1..0.8);
        let b = vec![ratio * a[p - 1]];
        let mu = rng.random_range(0.1..2.0);
        return ModelSpec::new(mu, a, b).unwrap();
    }
}

pub fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_vec(v.to_vec())
}

/// Batch-means estimate and standard error of a statistic of a long
/// dependent series: the statistic on the whole series, with the SE taken
/// from its spread over `batches` contiguous blocks.
pub fn batch_means(x: &[f64], batches: usize, stat: impl Fn(&[f64]) -> f64) -> (f64, f64) {
    let len = x.len() / batches;
    let vals: Vec<f64> = x.chunks_exact(len).take(batches).map(&stat).collect();
    let m = vals.iter().sum::<f64>() / batches as f64;
    let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (stat(x), (var / batches as f64).sqrt())
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64
}

pub fn acf_lag(x: &[f64], d: usize) -> f64 {
    let m = mean(x);
    let n = x.len();
    let c0: f64 = x.iter().map(|v| (v - m).powi(2)).sum();
    let cd: f64 = (0..n - d).map(|i| (x[i] - m) * (x[i + d] - m)).sum();
    cd / c0
}
