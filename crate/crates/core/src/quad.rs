//! Quadrature helpers: Gauss-Legendre rules (spectral accuracy for the smooth
//! integrands in basis projections) and seeded Monte Carlo point sets (used
//! for normalizers in dimensions where tensor grids are unaffordable).

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::domain::Domain;
use crate::error::{Error, Result};

/// Gauss-Legendre nodes (ascending) and weights on [-1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Chebyshev-based initial guess, then Newton on P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, d) = legendre_and_derivative(n, x);
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_and_derivative(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

fn legendre_and_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Midpoint-rule integral of `f` over [a, b] with `n` uniform cells.
pub fn midpoint(a: f64, b: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
    assert!(n >= 1 && b > a);
    let h = (b - a) / n as f64;
    (0..n).map(|i| f(a + (i as f64 + 0.5) * h)).sum::<f64>() * h
}

/// Gauss-Legendre rule mapped to [a, b].
pub fn gauss_legendre_on(a: f64, b: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let (xs, ws) = gauss_legendre(n);
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    (
        xs.iter().map(|x| mid + half * x).collect(),
        ws.iter().map(|w| half * w).collect(),
    )
}

/// Tensor-product quadrature points and weights over a box.
pub struct TensorQuad {
    pub points: Array2<f64>,
    pub weights: Vec<f64>,
}

pub fn tensor_gauss(domain: &Domain, per_axis: usize) -> Result<TensorQuad> {
    let d = domain.dim();
    let total = per_axis
        .checked_pow(d as u32)
        .ok_or_else(|| Error::InvalidParameter("quadrature grid overflows".into()))?;
    if total > (1 << 22) {
        return Err(Error::InvalidParameter(format!(
            "tensor quadrature with {total} points is too large; use Monte Carlo"
        )));
    }
    let mut axes = Vec::with_capacity(d);
    for j in 0..d {
        axes.push(gauss_legendre_on(domain.lo()[j], domain.hi()[j], per_axis));
    }
    let mut points = Array2::zeros((total, d));
    let mut weights = vec![1.0; total];
    for idx in 0..total {
        let mut rem = idx;
        for j in 0..d {
            let k = rem % per_axis;
            rem /= per_axis;
            points[[idx, j]] = axes[j].0[k];
            weights[idx] *= axes[j].1[k];
        }
    }
    Ok(TensorQuad { points, weights })
}

/// Seeded uniform Monte Carlo point set with the constant weight |domain|/n.
pub fn monte_carlo(domain: &Domain, n: usize, seed: u64) -> TensorQuad {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = domain.sample_uniform(n, &mut rng);
    let w = domain.volume() / n as f64;
    TensorQuad {
        points,
        weights: vec![w; n],
    }
}
