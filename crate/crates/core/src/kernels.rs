//! Kernel functions and their exact discrete-time state-space forms.
//!
//! Parameter evolution is separable: a squared exponential (SE) kernel
//! covers the operating point (state of charge `z`, applied current `I`),
//! while the lifetime coordinate `zeta` carries a Wiener velocity (WV)
//! kernel for slow drift plus an exponential (E) kernel for short-range
//! fluctuation. The WV and E kernels admit exact linear-Gaussian dynamics,
//! which is what makes the recursive (Kalman) formulation possible.

use crate::{Error, Result};
use alloc::vec::Vec;
use nalgebra::Matrix2;
#[cfg(not(feature = "std"))]
use num_traits::Float;

/// Operating-point input dimension of the SE kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Dim {
    /// State of charge `z`, dimensionless.
    Soc,
    /// Applied current `I`, amperes.
    Current,
}

/// A point in operating-condition space, e.g. `[(Dim::Soc, 0.5)]`.
pub type OpPoint<'a> = &'a [(Dim, f64)];

/// Squared-exponential kernel over the operating point.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SeKernelParams {
    /// GP variance `sigma_x^2` (dimensionless after the affine scaling).
    pub magnitude_sq: f64,
    /// Inverse squared length scales `gamma`, one per input dimension.
    /// Empty for a constant kernel (a GP with no operating-point inputs).
    pub inv_lengthscales: Vec<(Dim, f64)>,
}

impl SeKernelParams {
    pub fn new(magnitude_sq: f64, inv_lengthscales: Vec<(Dim, f64)>) -> Result<Self> {
        if magnitude_sq <= 0.0 {
            return Err(Error::NonPositive("SE magnitude"));
        }
        if inv_lengthscales.iter().any(|&(_, g)| g <= 0.0) {
            return Err(Error::NonPositive("SE inverse length scale"));
        }
        Ok(Self {
            magnitude_sq,
            inv_lengthscales,
        })
    }

    /// Constant kernel: no operating-point dependence, variance only.
    pub fn constant(magnitude_sq: f64) -> Result<Self> {
        Self::new(magnitude_sq, Vec::new())
    }
}

/// Wiener velocity kernel over lifetime, truncated at `zeta0`.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WvKernelParams {
    /// Spectral-density scale `sigma_zeta_s^2` of the velocity noise.
    pub magnitude_sq: f64,
    /// Truncation offset in lifetime units (Ah); see [`solve_zeta0`].
    pub zeta0: f64,
}

impl WvKernelParams {
    pub fn new(magnitude_sq: f64, zeta0: f64) -> Result<Self> {
        if magnitude_sq <= 0.0 {
            return Err(Error::NonPositive("WV magnitude"));
        }
        if zeta0 <= 0.0 {
            return Err(Error::NonPositive("WV zeta0"));
        }
        Ok(Self { magnitude_sq, zeta0 })
    }

    /// Initial covariance of the truncated process: the WV process noise
    /// accumulated over `[0, zeta0]`, which is the same closed form as
    /// [`wv_discrete`] with step `zeta0`.
    pub fn initial_cov(&self) -> Matrix2<f64> {
        wv_noise(self.zeta0, self.magnitude_sq)
    }
}

/// Exponential (Ornstein-Uhlenbeck) kernel over lifetime.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ExpKernelParams {
    /// Stationary variance `sigma_zeta_r^2`.
    pub magnitude_sq: f64,
    /// Decay rate `gamma_zeta_r` in 1/Ah.
    pub inv_lengthscale: f64,
}

impl ExpKernelParams {
    pub fn new(magnitude_sq: f64, inv_lengthscale: f64) -> Result<Self> {
        if magnitude_sq <= 0.0 {
            return Err(Error::NonPositive("E magnitude"));
        }
        if inv_lengthscale <= 0.0 {
            return Err(Error::NonPositive("E inverse length scale"));
        }
        Ok(Self {
            magnitude_sq,
            inv_lengthscale,
        })
    }
}

fn check_dims(x: OpPoint, p: &SeKernelParams) -> Result<()> {
    if x.len() != p.inv_lengthscales.len()
        || x.iter()
            .zip(&p.inv_lengthscales)
            .any(|(&(dx, _), &(dp, _))| dx != dp)
    {
        return Err(Error::DimMismatch);
    }
    Ok(())
}

/// SE covariance between two operating points.
pub fn se_cov(x: OpPoint, x_prime: OpPoint, p: &SeKernelParams) -> Result<f64> {
    check_dims(x, p)?;
    check_dims(x_prime, p)?;
    let mut q = 0.0;
    for (k, &(_, gamma)) in p.inv_lengthscales.iter().enumerate() {
        let d = x[k].1 - x_prime[k].1;
        q += gamma * d * d;
    }
    Ok(p.magnitude_sq * (-0.5 * q).exp())
}

/// WV covariance between two lifetime coordinates (both `>= 0`).
pub fn wv_cov(zeta: f64, zeta_prime: f64, p: &WvKernelParams) -> Result<f64> {
    if zeta < 0.0 || zeta_prime < 0.0 {
        return Err(Error::Negative("WV lifetime coordinate"));
    }
    let lo = zeta.min(zeta_prime);
    let gap = (zeta - zeta_prime).abs();
    Ok(p.magnitude_sq * (lo * lo * lo / 3.0 + gap * lo * lo / 2.0))
}

/// E covariance between two lifetime coordinates.
pub fn exp_cov(zeta: f64, zeta_prime: f64, p: &ExpKernelParams) -> f64 {
    p.magnitude_sq * (-p.inv_lengthscale * (zeta - zeta_prime).abs()).exp()
}

fn wv_noise(delta: f64, magnitude_sq: f64) -> Matrix2<f64> {
    let d2 = delta * delta;
    let d3 = d2 * delta;
    Matrix2::new(d3 / 3.0, d2 / 2.0, d2 / 2.0, delta) * magnitude_sq
}

/// Exact discretisation of the WV dynamics over a lifetime step.
///
/// The drift matrix `[[0, 1], [0, 0]]` is nilpotent, so the matrix
/// exponential is `[[1, dz], [0, 1]]` exactly and the process-noise
/// integral has the closed form below.
pub fn wv_discrete(delta_zeta: f64, p: &WvKernelParams) -> Result<(Matrix2<f64>, Matrix2<f64>)> {
    if delta_zeta < 0.0 {
        return Err(Error::Negative("WV step"));
    }
    let transition = Matrix2::new(1.0, delta_zeta, 0.0, 1.0);
    Ok((transition, wv_noise(delta_zeta, p.magnitude_sq)))
}

/// Exact discretisation of the E (OU) dynamics over a lifetime step.
pub fn exp_discrete(delta_zeta: f64, p: &ExpKernelParams) -> Result<(f64, f64)> {
    if delta_zeta < 0.0 {
        return Err(Error::Negative("E step"));
    }
    let a = (-p.inv_lengthscale * delta_zeta).exp();
    let q = p.magnitude_sq * (1.0 - (-2.0 * p.inv_lengthscale * delta_zeta).exp());
    Ok((a, q))
}

/// Truncation offset giving the WV kernel a chosen variance at beginning
/// of life: `wv_cov(zeta0, zeta0) == sigma_x_sq` exactly.
pub fn solve_zeta0(sigma_x_sq: f64, sigma_zeta_sq: f64) -> Result<f64> {
    if sigma_x_sq <= 0.0 {
        return Err(Error::NonPositive("target variance"));
    }
    if sigma_zeta_sq <= 0.0 {
        return Err(Error::NonPositive("WV magnitude"));
    }
    Ok((3.0 * sigma_x_sq / sigma_zeta_sq).cbrt())
}
