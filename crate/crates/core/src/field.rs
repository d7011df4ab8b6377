//! Grid-discretised Gaussian processes over the operating point.
//!
//! Each circuit parameter is represented by GP values at fixed grid
//! coordinates; every grid point carries a (value, lifetime-derivative)
//! state pair from the Wiener velocity dynamics, plus one shared
//! exponential noise state per parameter. Off-grid prediction treats the
//! grid states as noisy observations of the underlying function, and state
//! of charge enters as a Gaussian input whose uncertainty is integrated
//! out in closed form. Batch-mode GP regression lives here too, serving as
//! the algebraic counterpart of the recursive path.

use crate::kernels::{
    exp_discrete, se_cov, wv_discrete, Dim, ExpKernelParams, SeKernelParams, WvKernelParams,
};
use crate::linalg::{chol_jittered, JITTER_REL};
use crate::{Error, Result};
use alloc::boxed::Box;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};
#[cfg(not(feature = "std"))]
use num_traits::Float;

/// Discretisation coordinates for one GP.
///
/// For a state-of-charge and current grid the points enumerate the full
/// Cartesian product soc-major: all current values for the first soc, then
/// the second soc, and so on. This order is load-bearing for state layout
/// and file round-trips.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Grid {
    dims: Vec<Dim>,
    coords: Vec<Vec<f64>>,
}

impl Grid {
    /// Single abstract point, for parameters without operating-point inputs.
    pub fn scalar() -> Self {
        Self {
            dims: Vec::new(),
            coords: alloc::vec![Vec::new()],
        }
    }

    /// 1-D grid over state of charge; points must strictly increase.
    pub fn over_soc(points: &[f64]) -> Result<Self> {
        check_increasing(points, "soc grid")?;
        Ok(Self {
            dims: alloc::vec![Dim::Soc],
            coords: points.iter().map(|&z| alloc::vec![z]).collect(),
        })
    }

    /// Cartesian soc x current grid, soc-major.
    pub fn soc_current(soc: &[f64], current: &[f64]) -> Result<Self> {
        check_increasing(soc, "soc axis")?;
        check_increasing(current, "current axis")?;
        let mut coords = Vec::with_capacity(soc.len() * current.len());
        for &z in soc {
            for &i in current {
                coords.push(alloc::vec![z, i]);
            }
        }
        Ok(Self {
            dims: alloc::vec![Dim::Soc, Dim::Current],
            coords,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dims(&self) -> &[Dim] {
        &self.dims
    }

    pub fn coords(&self) -> &[Vec<f64>] {
        &self.coords
    }

    /// Point `k` as an operating point for kernel evaluation.
    pub fn point(&self, k: usize) -> Vec<(Dim, f64)> {
        self.dims.iter().copied().zip(self.coords[k].iter().copied()).collect()
    }
}

fn check_increasing(v: &[f64], what: &str) -> Result<()> {
    if v.is_empty() {
        return Err(Error::InvalidInput(alloc::format!("{what} is empty")));
    }
    if v.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput(alloc::format!(
            "{what} must be strictly increasing"
        )));
    }
    Ok(())
}

/// One circuit parameter's GP: grid, kernels and cached gram structure.
#[derive(Clone, Debug, PartialEq)]
pub struct GpField {
    pub grid: Grid,
    pub se: SeKernelParams,
    pub wv: WvKernelParams,
    pub exp: ExpKernelParams,
    gram: DMatrix<f64>,
    gamma_soc: Option<f64>,
    gamma_current: Option<f64>,
    soc_axis: Option<usize>,
    current_axis: Option<usize>,
}

impl GpField {
    pub fn new(
        grid: Grid,
        se: SeKernelParams,
        wv: WvKernelParams,
        exp: ExpKernelParams,
    ) -> Result<Self> {
        if se.inv_lengthscales.len() != grid.dims.len()
            || se
                .inv_lengthscales
                .iter()
                .zip(&grid.dims)
                .any(|(&(d, _), &g)| d != g)
        {
            return Err(Error::DimMismatch);
        }
        let n = grid.len();
        let mut gram = DMatrix::zeros(n, n);
        for j in 0..n {
            let pj = grid.point(j);
            for k in j..n {
                let v = se_cov(&pj, &grid.point(k), &se)?;
                gram[(j, k)] = v;
                gram[(k, j)] = v;
            }
        }
        let axis = |dim: Dim| grid.dims.iter().position(|&d| d == dim);
        let gamma = |dim: Dim| {
            se.inv_lengthscales
                .iter()
                .find(|&&(d, _)| d == dim)
                .map(|&(_, g)| g)
        };
        Ok(Self {
            gamma_soc: gamma(Dim::Soc),
            gamma_current: gamma(Dim::Current),
            soc_axis: axis(Dim::Soc),
            current_axis: axis(Dim::Current),
            grid,
            se,
            wv,
            exp,
            gram,
        })
    }

    /// Number of smooth states: a (value, derivative) pair per grid point.
    pub fn smooth_dim(&self) -> usize {
        2 * self.grid.len()
    }

    /// SE gram matrix over the grid points.
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    fn soc_of(&self, k: usize) -> f64 {
        self.soc_axis.map_or(0.0, |a| self.grid.coords[k][a])
    }

    /// SE factor over the current dimension at a query current, per point.
    fn current_factor(&self, i_now: f64) -> DVector<f64> {
        let n = self.grid.len();
        match (self.current_axis, self.gamma_current) {
            (Some(a), Some(g)) => DVector::from_fn(n, |k, _| {
                let d = i_now - self.grid.coords[k][a];
                (-0.5 * g * d * d).exp()
            }),
            _ => DVector::from_element(n, 1.0),
        }
    }
}

/// Initial covariance of one field's states: the Kronecker product of the
/// SE gram with the truncated WV covariance for the smooth block, and the
/// stationary variance for the noise channel.
pub fn init_field_cov(field: &GpField) -> (DMatrix<f64>, f64) {
    let smooth = field.gram.kronecker(&field.wv.initial_cov());
    (smooth, field.exp.magnitude_sq)
}

/// Filtered belief about one field, as slices of the joint state.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldBelief {
    /// Mean of each grid point's value state.
    pub values: DVector<f64>,
    /// Variance of each grid point's value state.
    pub value_vars: DVector<f64>,
    pub noise_mean: f64,
    pub noise_var: f64,
}

/// Off-grid prediction of one field at a possibly uncertain state of
/// charge and an exactly known current.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldEval {
    /// Dimensionless GP estimate (smooth part plus noise state).
    pub mean: f64,
    /// Total predictive variance (smooth part plus noise state).
    pub var: f64,
    /// Sensitivity of the mean to each value state.
    pub weights: DVector<f64>,
    /// Sensitivity of the mean to the state-of-charge mean.
    pub dmean_dsoc: f64,
}

/// Regression weights onto the grid value states at an exactly known
/// operating point: `k(x*, U) (K_uu + diag(P))^-1`.
pub fn regression_weights(
    field: &GpField,
    x_star: &[(Dim, f64)],
    state_cov_diag: &[f64],
) -> Result<DVector<f64>> {
    let n = field.grid.len();
    if state_cov_diag.len() != n {
        return Err(Error::InvalidInput(
            "state variance diagonal does not match grid size".into(),
        ));
    }
    let mut kx = DVector::zeros(n);
    for k in 0..n {
        kx[k] = se_cov(x_star, &field.grid.point(k), &field.se)?;
    }
    let mut kmat = field.gram.clone();
    for k in 0..n {
        kmat[(k, k)] += state_cov_diag[k];
    }
    let chol = chol_jittered(kmat, "regression weights")?;
    Ok(chol.solve(&kx))
}

/// Predict one field at soc ~ N(mu_z, var_z) and known current.
///
/// The smooth-part moments integrate the SE kernel against the Gaussian
/// soc in closed form; current distances enter as exact multiplicative
/// factors. With `var_z = 0` this reduces to the standard predictive
/// equations on `K_uu + diag(P)`. The exponential noise channel adds its
/// state mean and variance on top.
pub fn predict_uncertain_input(
    field: &GpField,
    mu_z: f64,
    var_z: f64,
    i_now: f64,
    belief: &FieldBelief,
) -> Result<FieldEval> {
    if var_z < 0.0 {
        return Err(Error::Negative("soc variance"));
    }
    let n = field.grid.len();
    if belief.values.len() != n || belief.value_vars.len() != n {
        return Err(Error::InvalidInput("belief does not match grid size".into()));
    }

    let sig2 = field.se.magnitude_sq;
    let ef = field.current_factor(i_now);

    // Gaussian-smoothed kernel vector l and second-moment matrix L over soc
    let (l, lmat) = match field.gamma_soc {
        Some(g) => {
            let c1 = g * var_z + 1.0;
            let l = DVector::from_fn(n, |k, _| {
                let d = mu_z - field.soc_of(k);
                sig2 / c1.sqrt() * (-0.5 * g * d * d / c1).exp() * ef[k]
            });
            let c2 = 2.0 * g * var_z + 1.0;
            let lmat = DMatrix::from_fn(n, n, |j, k, | {
                let uj = field.soc_of(j);
                let uk = field.soc_of(k);
                let du = uj - uk;
                let dm = mu_z - 0.5 * (uj + uk);
                sig2 * sig2 * ef[j] * ef[k] / c2.sqrt()
                    * (-0.25 * g * du * du - g * dm * dm / c2).exp()
            });
            (l, lmat)
        }
        None => {
            let l = DVector::from_fn(n, |k, _| sig2 * ef[k]);
            let lmat = &l * l.transpose();
            (l, lmat)
        }
    };

    let mut kmat = field.gram.clone();
    for k in 0..n {
        kmat[(k, k)] += belief.value_vars[k];
    }
    let chol = chol_jittered(kmat, "uncertain-input prediction")?;

    let delta = chol.solve(&belief.values);
    let weights = chol.solve(&l);
    let mean_smooth = l.dot(&delta);

    let kinv_l = chol.solve(&lmat);
    let quad = delta.dot(&(&lmat * &delta));
    let var_smooth = (sig2 - kinv_l.trace() + quad - mean_smooth * mean_smooth).max(0.0);

    let dmean_dsoc = match field.gamma_soc {
        Some(g) => {
            let c1 = g * var_z + 1.0;
            (0..n)
                .map(|k| -g * (mu_z - field.soc_of(k)) / c1 * l[k] * delta[k])
                .sum()
        }
        None => 0.0,
    };

    Ok(FieldEval {
        mean: mean_smooth + belief.noise_mean,
        var: var_smooth + belief.noise_var,
        weights,
        dmean_dsoc,
    })
}

/// Mean and covariance of one field's own states (smooth block interleaved
/// as value, derivative pairs, plus the noise channel).
#[derive(Clone, Debug, PartialEq)]
pub struct FieldState {
    pub smooth_mean: DVector<f64>,
    pub smooth_cov: DMatrix<f64>,
    pub noise_mean: f64,
    pub noise_var: f64,
}

impl FieldState {
    /// Zero-mean state with the initial covariance of the field.
    pub fn prior(field: &GpField) -> Self {
        let (smooth_cov, noise_var) = init_field_cov(field);
        Self {
            smooth_mean: DVector::zeros(field.smooth_dim()),
            smooth_cov,
            noise_mean: 0.0,
            noise_var,
        }
    }
}

/// Advance one field's states over a lifetime step.
pub fn propagate_field(field: &GpField, state: &FieldState, delta_zeta: f64) -> Result<FieldState> {
    let (a, q) = wv_discrete(delta_zeta, &field.wv)?;
    let (ae, qe) = exp_discrete(delta_zeta, &field.exp)?;
    let n = field.grid.len();
    debug_assert_eq!(state.smooth_mean.len(), 2 * n);

    let mut mean = state.smooth_mean.clone();
    for k in 0..n {
        mean[2 * k] += delta_zeta * mean[2 * k + 1];
    }

    let big_a = DMatrix::identity(n, n).kronecker(&a);
    let mut cov = &big_a * &state.smooth_cov * big_a.transpose();
    cov += field.gram.kronecker(&q);

    Ok(FieldState {
        smooth_mean: mean,
        smooth_cov: cov,
        noise_mean: ae * state.noise_mean,
        noise_var: ae * ae * state.noise_var + qe,
    })
}

/// Plain batch Gaussian process regression, used as the independent
/// algebraic route against which the recursive estimator is checked.
pub struct BatchGp {
    /// Training inputs, one row per observation.
    pub inputs: Vec<Vec<f64>>,
    pub targets: DVector<f64>,
    pub kernel: Box<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>,
    pub noise_sq: f64,
}

impl core::fmt::Debug for BatchGp {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("BatchGp")
            .field("n", &self.inputs.len())
            .field("noise_sq", &self.noise_sq)
            .finish()
    }
}

impl BatchGp {
    fn system(&self) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        let n = self.inputs.len();
        let mut kmat = DMatrix::from_fn(n, n, |j, k| (self.kernel)(&self.inputs[j], &self.inputs[k]));
        for k in 0..n {
            kmat[(k, k)] += self.noise_sq;
        }
        chol_jittered(kmat, "batch GP gram")
    }

    /// Posterior mean and variance at a test input.
    pub fn posterior(&self, x_star: &[f64]) -> Result<(f64, f64)> {
        let n = self.inputs.len();
        let k_ss = (self.kernel)(x_star, x_star);
        if n == 0 {
            return Ok((0.0, k_ss));
        }
        if self.targets.len() != n {
            return Err(Error::InvalidInput("targets do not match inputs".into()));
        }
        let chol = self.system()?;
        let ks = DVector::from_fn(n, |j, _| (self.kernel)(x_star, &self.inputs[j]));
        let alpha = chol.solve(&self.targets);
        let v = chol.solve(&ks);
        Ok((ks.dot(&alpha), k_ss - ks.dot(&v)))
    }

    /// Negative log marginal likelihood of the training data.
    pub fn nlml(&self) -> Result<f64> {
        let n = self.inputs.len();
        if self.targets.len() != n {
            return Err(Error::InvalidInput("targets do not match inputs".into()));
        }
        if n == 0 {
            return Ok(0.0);
        }
        let chol = self.system()?;
        let alpha = chol.solve(&self.targets);
        let logdet: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        Ok(0.5 * self.targets.dot(&alpha)
            + 0.5 * logdet
            + 0.5 * n as f64 * (2.0 * core::f64::consts::PI).ln())
    }
}

/// Jitter scale shared by every gram factorisation, re-exported for tests.
pub const GRAM_JITTER_REL: f64 = JITTER_REL;
