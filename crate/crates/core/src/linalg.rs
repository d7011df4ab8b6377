//! Small shared linear-algebra helpers.

use crate::{Error, Result};
use nalgebra::{Cholesky, DMatrix, Dyn};

/// Relative jitter added to gram diagonals before factorisation.
pub(crate) const JITTER_REL: f64 = 1e-10;

/// Cholesky factorisation with diagonal jitter. The jitter is relative to
/// each diagonal entry so that blocks living on very different scales
/// (say a parameter variance next to a tiny fluctuation-channel variance)
/// are all perturbed proportionally, not swamped by the largest one.
pub(crate) fn chol_jittered(
    mut m: DMatrix<f64>,
    what: &'static str,
) -> Result<Cholesky<f64, Dyn>> {
    for k in 0..m.nrows() {
        m[(k, k)] *= 1.0 + JITTER_REL;
    }
    Cholesky::new(m).ok_or(Error::Conditioning(what))
}

/// Replace `m` with `(m + m^T) / 2`.
pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for k in (j + 1)..n {
            let v = 0.5 * (m[(j, k)] + m[(k, j)]);
            m[(j, k)] = v;
            m[(k, j)] = v;
        }
    }
}
