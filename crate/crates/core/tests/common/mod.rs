//! Shared oracles for the integration tests.
//!
//! Everything here recomputes expectations through routes independent of
//! the estimator code: dense quadrature, direct gram algebra, and finite
//! differences.

#![allow(dead_code)]

use gpecm_core::field::GpField;
use gpecm_core::kernels::{se_cov, Dim};
use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Gauss-Hermite nodes and weights for the weight function exp(-x^2),
/// via the Golub-Welsch eigenvalue construction.
pub fn gauss_hermite(order: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jacobi = DMatrix::<f64>::zeros(order, order);
    for k in 1..order {
        let b = (k as f64 / 2.0).sqrt();
        jacobi[(k - 1, k)] = b;
        jacobi[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..order)
        .map(|j| {
            let node = eig.eigenvalues[j];
            let v0 = eig.eigenvectors[(0, j)];
            (node, core::f64::consts::PI.sqrt() * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    pairs.into_iter().unzip()
}

/// `E[g(Z)]` for `Z ~ N(mu, var)` by Gauss-Hermite quadrature.
pub fn gauss_expect(g: impl Fn(f64) -> f64, mu: f64, var: f64, order: usize) -> f64 {
    let (nodes, weights) = gauss_hermite(order);
    let s = (2.0 * var).sqrt();
    let mut acc = 0.0;
    for (x, w) in nodes.iter().zip(&weights) {
        acc += w * g(mu + s * x);
    }
    acc / core::f64::consts::PI.sqrt()
}

/// Conditional GP prediction at an exactly known operating point, done
/// with plain dense algebra on `K_uu + diag(vars)`.
pub fn dense_conditional(
    field: &GpField,
    soc: f64,
    current: f64,
    values: &DVector<f64>,
    value_vars: &DVector<f64>,
) -> (f64, f64) {
    let n = field.grid.len();
    let x_star: Vec<(Dim, f64)> = field
        .grid
        .dims()
        .iter()
        .map(|&d| match d {
            Dim::Soc => (d, soc),
            Dim::Current => (d, current),
        })
        .collect();
    let mut kmat = field.gram().clone();
    for k in 0..n {
        kmat[(k, k)] += value_vars[k];
    }
    let chol = kmat.cholesky().expect("oracle gram");
    let ks = DVector::from_fn(n, |j, _| {
        se_cov(&x_star, &field.grid.point(j), &field.se).unwrap()
    });
    let alpha = chol.solve(values);
    let kss = field.se.magnitude_sq;
    (ks.dot(&alpha), kss - ks.dot(&chol.solve(&ks)))
}

/// Scale-aware relative disagreement used by the equivalence checks.
pub fn rel_err(a: f64, b: f64, scale_floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(scale_floor)
}

/// Root-mean-square of a slice.
pub fn rms(xs: &[f64]) -> f64 {
    (xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64).sqrt()
}
