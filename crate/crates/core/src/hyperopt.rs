//! Maximum-likelihood hyperparameter estimation.
//!
//! The likelihood of a hyperparameter vector is the NLML accumulated by
//! the filter over every cell in the fit set. Estimation is split in two:
//! operating-point hyperparameters (SE magnitudes, length scales and
//! measurement noise) come from a beginning-of-life cycle per cell with
//! the lifetime kernels at benign placeholders, then the lifetime
//! hyperparameters (WV magnitudes and the fluctuation channel) are fitted
//! on the full down-selected dataset with the first block frozen.
//!
//! All parameters are optimised in log10 space inside box constraints so
//! positivity holds by construction. Gradients are central finite
//! differences; the stencil never leaves the box.

use crate::battery::{OcvCurve, ThermalParams};
use crate::field::{Grid, GpField};
use crate::filter::{
    run_lifetime, AffineConstants, CycleSegment, MeasurementNoise, ModelSpec,
};
use crate::kernels::{solve_zeta0, Dim, ExpKernelParams, SeKernelParams, WvKernelParams};
use crate::{Error, Result};
use alloc::vec;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[cfg(feature = "parallel")]
use rayon::prelude::*;
#[cfg(not(feature = "std"))]
use num_traits::Float;

/// Map over items, in parallel when the `parallel` feature is on. Results
/// keep the input order either way, so fits stay deterministic.
fn ordered_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// The twelve free hyperparameters after the sharing scheme: alpha and
/// beta share their SE block, the WV magnitudes group into one value for
/// inverse capacity and one for the operating-point fields, and one
/// exponential fluctuation channel serves all four parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HyperParams {
    /// SE magnitude (std) of the inverse-capacity GP.
    pub sigma_q: f64,
    /// Shared SE magnitude of the RC-pair GPs.
    pub sigma_ab: f64,
    /// SE magnitude of the series-resistance GP.
    pub sigma_r0: f64,
    /// Shared inverse squared length scale of the RC-pair GPs over soc.
    pub gamma_ab_soc: f64,
    pub gamma_r0_soc: f64,
    pub gamma_r0_current: f64,
    /// Voltage measurement noise std, volts.
    pub sigma_noise_v: f64,
    /// Temperature measurement noise std.
    pub sigma_noise_t: f64,
    /// WV magnitude (std) for the inverse-capacity GP.
    pub wv_sigma_q: f64,
    /// WV magnitude (std) shared by the operating-point fields.
    pub wv_sigma_params: f64,
    /// Fluctuation-channel magnitude (std).
    pub exp_sigma: f64,
    /// Fluctuation-channel decay rate, 1/Ah.
    pub exp_gamma: f64,
}

pub const N_HYPERS: usize = 12;
/// Operating-point block fitted in the first stage.
pub const STAGE1_PARAMS: [usize; 8] = [0, 1, 2, 3, 4, 5, 6, 7];
/// Lifetime block fitted in the second stage.
pub const STAGE2_PARAMS: [usize; 4] = [8, 9, 10, 11];

impl HyperParams {
    /// Benign starting point: moderate magnitudes, mid-range length
    /// scales, and a lifetime block that leaves the operating-point fit
    /// unaffected over a single cycle.
    pub fn benign_default() -> Self {
        Self {
            sigma_q: 0.1,
            sigma_ab: 0.3,
            sigma_r0: 0.3,
            gamma_ab_soc: 10.0,
            gamma_r0_soc: 5.0,
            gamma_r0_current: 0.1,
            sigma_noise_v: 0.01,
            sigma_noise_t: 0.1,
            wv_sigma_q: 1.0,
            wv_sigma_params: 1.0,
            exp_sigma: 1e-3,
            exp_gamma: 1.0,
        }
    }

    pub fn to_array(&self) -> [f64; N_HYPERS] {
        [
            self.sigma_q,
            self.sigma_ab,
            self.sigma_r0,
            self.gamma_ab_soc,
            self.gamma_r0_soc,
            self.gamma_r0_current,
            self.sigma_noise_v,
            self.sigma_noise_t,
            self.wv_sigma_q,
            self.wv_sigma_params,
            self.exp_sigma,
            self.exp_gamma,
        ]
    }

    pub fn from_array(a: [f64; N_HYPERS]) -> Self {
        Self {
            sigma_q: a[0],
            sigma_ab: a[1],
            sigma_r0: a[2],
            gamma_ab_soc: a[3],
            gamma_r0_soc: a[4],
            gamma_r0_current: a[5],
            sigma_noise_v: a[6],
            sigma_noise_t: a[7],
            wv_sigma_q: a[8],
            wv_sigma_params: a[9],
            exp_sigma: a[10],
            exp_gamma: a[11],
        }
    }

    fn with_log10(&self, params: &[usize], x: &[f64]) -> Self {
        let mut a = self.to_array();
        for (&p, &v) in params.iter().zip(x) {
            a[p] = 10f64.powf(v);
        }
        Self::from_array(a)
    }

    fn log10_of(&self, params: &[usize]) -> Vec<f64> {
        let a = self.to_array();
        params.iter().map(|&p| a[p].log10()).collect()
    }
}

/// Box constraints in log10 space, one interval per hyperparameter.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HyperBox {
    pub lo: [f64; N_HYPERS],
    pub hi: [f64; N_HYPERS],
}

impl Default for HyperBox {
    /// Magnitudes span 1e-3..10, inverse length scales 1e-2..1e3, voltage
    /// noise 0.1 mV..0.1 V and temperature noise 0.01..1 K. The magnitude
    /// floor doubles as the required minimum on the fluctuation channel.
    fn default() -> Self {
        let mut lo = [-3.0; N_HYPERS];
        let mut hi = [1.0; N_HYPERS];
        for k in [3, 4, 5, 11] {
            lo[k] = -2.0;
            hi[k] = 3.0;
        }
        lo[6] = -4.0;
        hi[6] = -1.0;
        lo[7] = -2.0;
        hi[7] = 0.0;
        Self { lo, hi }
    }
}

impl HyperBox {
    fn slice(&self, params: &[usize]) -> (Vec<f64>, Vec<f64>) {
        (
            params.iter().map(|&p| self.lo[p]).collect(),
            params.iter().map(|&p| self.hi[p]).collect(),
        )
    }

    pub fn contains(&self, theta: &HyperParams) -> bool {
        let a = theta.to_array();
        (0..N_HYPERS).all(|k| {
            let l = a[k].log10();
            l >= self.lo[k] - 1e-12 && l <= self.hi[k] + 1e-12
        })
    }
}

/// Model structure shared by every likelihood evaluation: grids, affine
/// constants, the OCV curve, thermal constants and the filter's fixed
/// covariances. Hyperparameters are layered on top per evaluation.
#[derive(Clone, Debug)]
pub struct FitSetup {
    pub soc_grid: Vec<f64>,
    pub r0_soc_grid: Vec<f64>,
    pub r0_current_grid: Vec<f64>,
    pub c: AffineConstants,
    pub ocv: OcvCurve,
    pub thermal: ThermalParams,
    pub q_batt: [f64; 3],
    pub p_batt0: [f64; 3],
}

/// Assemble the filter model for a hyperparameter vector.
///
/// Each field's WV truncation offset is re-solved so the WV factor is one
/// at beginning of life, keeping the parameter prior variance equal to the
/// SE magnitude regardless of the lifetime block. That is what lets the
/// first stage fix the SE block before the WV magnitudes are known.
pub fn build_model(setup: &FitSetup, theta: &HyperParams) -> Result<ModelSpec> {
    let sq = |x: f64| x * x;
    let wv_of = |sigma: f64| -> Result<WvKernelParams> {
        let mag = sq(sigma);
        WvKernelParams::new(mag, solve_zeta0(1.0, mag)?)
    };
    let exp = ExpKernelParams::new(sq(theta.exp_sigma), theta.exp_gamma)?;
    let wv_q = wv_of(theta.wv_sigma_q)?;
    let wv_p = wv_of(theta.wv_sigma_params)?;

    let q_inv = GpField::new(Grid::scalar(), SeKernelParams::constant(sq(theta.sigma_q))?, wv_q, exp)?;
    let se_ab = SeKernelParams::new(sq(theta.sigma_ab), vec![(Dim::Soc, theta.gamma_ab_soc)])?;
    let alpha = GpField::new(Grid::over_soc(&setup.soc_grid)?, se_ab.clone(), wv_p, exp)?;
    let beta = GpField::new(Grid::over_soc(&setup.soc_grid)?, se_ab, wv_p, exp)?;
    let r0 = GpField::new(
        Grid::soc_current(&setup.r0_soc_grid, &setup.r0_current_grid)?,
        SeKernelParams::new(
            sq(theta.sigma_r0),
            vec![
                (Dim::Soc, theta.gamma_r0_soc),
                (Dim::Current, theta.gamma_r0_current),
            ],
        )?,
        wv_p,
        exp,
    )?;
    Ok(ModelSpec {
        q_inv,
        alpha,
        beta,
        r0,
        c: setup.c,
        ocv: setup.ocv.clone(),
        thermal: setup.thermal,
        q_batt: setup.q_batt,
        p_batt0: setup.p_batt0,
        noise: MeasurementNoise {
            sigma_v: theta.sigma_noise_v,
            sigma_t: theta.sigma_noise_t,
        },
    })
}

/// Summed NLML over all cells; conditioning failures surface as infinity
/// so the optimiser simply avoids that region.
pub fn nlml(setup: &FitSetup, cells: &[Vec<CycleSegment>], theta: &HyperParams) -> f64 {
    let model = match build_model(setup, theta) {
        Ok(m) => m,
        Err(_) => return f64::INFINITY,
    };
    let mut total = 0.0;
    for cell in cells {
        match run_lifetime(&model, cell) {
            Ok(run) if run.phi.is_finite() => total += run.phi,
            _ => return f64::INFINITY,
        }
    }
    total
}

/// Central-difference gradient of the NLML in log10 space over the chosen
/// parameter subset. Stencil points shift one-sided near the box faces.
pub fn nlml_gradient(
    setup: &FitSetup,
    cells: &[Vec<CycleSegment>],
    theta: &HyperParams,
    params: &[usize],
    bounds: &HyperBox,
    step: f64,
) -> Result<Vec<f64>> {
    let x = theta.log10_of(params);
    let (lo, hi) = bounds.slice(params);
    let f = |v: &[f64]| nlml(setup, cells, &theta.with_log10(params, v));
    let (g, _) = fd_gradient(&f, &x, &lo, &hi, step);
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite objective at stencil point".into()));
    }
    Ok(g)
}

fn fd_gradient<F>(f: &F, x: &[f64], lo: &[f64], hi: &[f64], h: f64) -> (Vec<f64>, usize)
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let probes: Vec<(usize, f64, f64)> = (0..x.len())
        .map(|j| {
            let up = (hi[j] - x[j]).min(h).max(0.0);
            let dn = (x[j] - lo[j]).min(h).max(0.0);
            (j, up, dn)
        })
        .collect();
    let evals: Vec<(f64, f64)> = ordered_map(&probes, |&(j, up, dn)| {
        let mut xp = x.to_vec();
        xp[j] += up;
        let fp = f(&xp);
        xp[j] = x[j] - dn;
        let fm = f(&xp);
        (fp, fm)
    });
    let mut g = vec![0.0; x.len()];
    for (k, &(j, up, dn)) in probes.iter().enumerate() {
        let span = up + dn;
        g[j] = if span > 0.0 { (evals[k].0 - evals[k].1) / span } else { 0.0 };
    }
    (g, 2 * x.len())
}

/// Options of the box-constrained quasi-Newton refinement.
#[derive(Clone, Copy, Debug)]
pub struct OptimOptions {
    pub max_iter: usize,
    /// Stop when the objective improves by less than this fraction.
    pub f_tol_rel: f64,
    /// Stop when the projected-gradient infinity norm falls below this.
    pub g_tol: f64,
    /// Finite-difference step in log10 space.
    pub fd_step: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            f_tol_rel: 1e-6,
            g_tol: 1e-4,
            fd_step: 1e-4,
        }
    }
}

/// Outcome of one minimisation.
#[derive(Clone, Debug)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub fx: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Coordinates that finished pressed against a box face; a flag here
    /// usually means the data cannot identify that parameter.
    pub at_bound: Vec<bool>,
    pub evals: usize,
}

fn clamp_vec(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for j in 0..x.len() {
        x[j] = x[j].clamp(lo[j], hi[j]);
    }
}

fn projected_grad_norm(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    let mut m = 0.0f64;
    for j in 0..x.len() {
        let blocked = (x[j] <= lo[j] && g[j] > 0.0) || (x[j] >= hi[j] && g[j] < 0.0);
        if !blocked {
            m = m.max(g[j].abs());
        }
    }
    m
}

/// BFGS with box projection: directions come from the inverse-Hessian
/// approximation, iterates clamp to the box, and curvature pairs that the
/// projection spoils are skipped.
pub fn minimize_box<F>(
    f: &F,
    x0: &[f64],
    lo: &[f64],
    hi: &[f64],
    opts: &OptimOptions,
    mut on_iter: impl FnMut(usize, f64, &[f64]),
) -> OptimResult
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let d = x0.len();
    let mut x = x0.to_vec();
    clamp_vec(&mut x, lo, hi);
    let mut fx = f(&x);
    let mut evals = 1;
    let (mut g, ge) = fd_gradient(f, &x, lo, hi, opts.fd_step);
    evals += ge;
    let mut hinv = vec![0.0; d * d];
    for j in 0..d {
        hinv[j * d + j] = 1.0;
    }
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..opts.max_iter {
        iterations = iter + 1;
        if projected_grad_norm(&x, &g, lo, hi) < opts.g_tol {
            converged = true;
            break;
        }
        // d = -H g, with bound-blocked coordinates released to steepest descent
        let mut dir = vec![0.0; d];
        for r in 0..d {
            let mut s = 0.0;
            for c in 0..d {
                s += hinv[r * d + c] * g[c];
            }
            dir[r] = -s;
        }
        for j in 0..d {
            let blocked = (x[j] <= lo[j] && dir[j] < 0.0) || (x[j] >= hi[j] && dir[j] > 0.0);
            if blocked {
                dir[j] = 0.0;
            }
        }
        if dir.iter().map(|v| v * v).sum::<f64>() < 1e-30 {
            converged = true;
            break;
        }
        if dir.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() >= 0.0 {
            // not a descent direction, reset curvature
            for v in hinv.iter_mut() {
                *v = 0.0;
            }
            for j in 0..d {
                hinv[j * d + j] = 1.0;
                dir[j] = -g[j];
            }
        }

        // backtracking line search on the clamped path
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut xn: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + t * di).collect();
            clamp_vec(&mut xn, lo, hi);
            let step: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
            if step.iter().map(|v| v * v).sum::<f64>() < 1e-30 {
                break;
            }
            let fn_ = f(&xn);
            evals += 1;
            let slope: f64 = g.iter().zip(&step).map(|(a, b)| a * b).sum();
            if fn_.is_finite() && fn_ <= fx + 1e-4 * slope.min(0.0) {
                accepted = Some((xn, fn_, step));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fn_, step)) = accepted else {
            converged = true;
            break;
        };

        let (gn, ge) = fd_gradient(f, &xn, lo, hi, opts.fd_step);
        evals += ge;
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = step.iter().zip(&y).map(|(a, b)| a * b).sum();
        let ss: f64 = step.iter().map(|v| v * v).sum::<f64>().sqrt();
        let yy: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if sy > 1e-10 * ss * yy && sy.is_finite() {
            // H <- (I - s y'/sy) H (I - y s'/sy) + s s'/sy
            let mut hy = vec![0.0; d];
            for r in 0..d {
                hy[r] = (0..d).map(|c| hinv[r * d + c] * y[c]).sum();
            }
            let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
            for r in 0..d {
                for c in 0..d {
                    hinv[r * d + c] += -(step[r] * hy[c] + hy[r] * step[c]) / sy
                        + (1.0 + yhy / sy) * step[r] * step[c] / sy;
                }
            }
        }

        let df = fx - fn_;
        x = xn;
        fx = fn_;
        g = gn;
        on_iter(iter, fx, &x);
        if df.abs() < opts.f_tol_rel * fx.abs().max(1e-30) {
            converged = true;
            break;
        }
    }

    let at_bound = (0..d)
        .map(|j| x[j] <= lo[j] + 1e-9 || x[j] >= hi[j] - 1e-9)
        .collect();
    OptimResult {
        x,
        fx,
        iterations,
        converged,
        at_bound,
        evals,
    }
}

/// One record of the fit trace, streamed out by the command-line driver.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TraceRecord {
    /// Which multi-start run the record belongs to.
    pub start: usize,
    pub iteration: usize,
    pub phi: f64,
    pub theta: HyperParams,
}

/// Result of one fitting stage.
#[derive(Clone, Debug)]
pub struct FitResult {
    pub theta: HyperParams,
    pub phi: f64,
    /// Per-parameter bound flags of the winning refinement, over the
    /// stage's active subset.
    pub at_bound: Vec<bool>,
    pub converged: bool,
    pub evals: usize,
    pub trace: Vec<TraceRecord>,
}

/// Multi-start options of the first stage.
#[derive(Clone, Copy, Debug)]
pub struct Stage1Options {
    pub seed: u64,
    /// Random hyperparameter draws scanned before refinement.
    pub n_random: usize,
    /// Lowest-NLML draws kept for quasi-Newton refinement.
    pub n_refine: usize,
    pub optim: OptimOptions,
}

impl Default for Stage1Options {
    fn default() -> Self {
        Self {
            seed: 0,
            n_random: 1000,
            n_refine: 25,
            optim: OptimOptions::default(),
        }
    }
}

/// Fit the operating-point hyperparameters on one beginning-of-life cycle
/// per cell. Lifetime kernels sit at the benign defaults of
/// [`HyperParams::benign_default`] and the lifetime coordinate is frozen
/// at zero, so only the SE block and the noise levels matter.
pub fn fit_stage1(
    setup: &FitSetup,
    first_cycles: &[CycleSegment],
    bounds: &HyperBox,
    opts: &Stage1Options,
) -> Result<FitResult> {
    if first_cycles.is_empty() {
        return Err(Error::InvalidInput("stage 1 needs at least one cycle".into()));
    }
    if opts.n_random == 0 || opts.n_refine == 0 {
        return Err(Error::InvalidInput("stage 1 needs random draws and refinements".into()));
    }
    // freeze lifetime at zero: one segment per cell, at beginning of life
    let cells: Vec<Vec<CycleSegment>> = first_cycles
        .iter()
        .map(|seg| {
            let mut s = seg.clone();
            s.zeta = 0.0;
            vec![s]
        })
        .collect();

    let base = HyperParams::benign_default();
    let params = &STAGE1_PARAMS[..];
    let (lo, hi) = bounds.slice(params);
    let objective = |x: &[f64]| nlml(setup, &cells, &base.with_log10(params, x));

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let draws: Vec<Vec<f64>> = (0..opts.n_random)
        .map(|_| {
            (0..params.len())
                .map(|j| rng.gen_range(lo[j]..=hi[j]))
                .collect()
        })
        .collect();
    let scores = ordered_map(&draws, |x| objective(x));
    let mut order: Vec<usize> = (0..draws.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(core::cmp::Ordering::Equal));
    if !scores[order[0]].is_finite() {
        return Err(Error::Conditioning("every random start failed to filter"));
    }
    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&k| scores[k].is_finite())
        .take(opts.n_refine)
        .collect();

    let refined: Vec<(OptimResult, Vec<TraceRecord>)> = ordered_map(&keep, |&start| {
        let mut trace = Vec::new();
        let res = minimize_box(&objective, &draws[start], &lo, &hi, &opts.optim, |it, phi, x| {
            trace.push(TraceRecord {
                start,
                iteration: it,
                phi,
                theta: base.with_log10(params, x),
            });
        });
        (res, trace)
    });

    let best_scan = keep.iter().map(|&k| scores[k]).fold(f64::INFINITY, f64::min);
    let mut best = 0;
    for k in 1..refined.len() {
        if refined[k].0.fx < refined[best].0.fx {
            best = k;
        }
    }
    let (res, _) = &refined[best];
    debug_assert!(res.fx <= best_scan + 1e-9, "refinement must not lose to its start");
    let evals = opts.n_random + refined.iter().map(|(r, _)| r.evals).sum::<usize>();
    let trace = refined.iter().flat_map(|(_, t)| t.iter().cloned()).collect();
    Ok(FitResult {
        theta: base.with_log10(params, &res.x),
        phi: res.fx,
        at_bound: res.at_bound.clone(),
        converged: res.converged,
        evals,
        trace,
    })
}

/// Grid-search lattice of the second stage, natural-space values per axis.
#[derive(Clone, Debug)]
pub struct Stage2Grid {
    pub wv_sigma_q: Vec<f64>,
    pub wv_sigma_params: Vec<f64>,
    pub exp_sigma: Vec<f64>,
    pub exp_gamma: Vec<f64>,
}

impl Default for Stage2Grid {
    fn default() -> Self {
        Self {
            wv_sigma_q: vec![0.01, 0.1, 1.0],
            wv_sigma_params: vec![0.01, 0.1, 1.0],
            exp_sigma: vec![0.01, 0.1],
            exp_gamma: vec![0.1, 10.0],
        }
    }
}

/// Fit the lifetime hyperparameters on the full dataset with the
/// operating-point block fixed. A lattice search supplies the single
/// starting point for the quasi-Newton refinement.
pub fn fit_stage2(
    setup: &FitSetup,
    cells: &[Vec<CycleSegment>],
    theta_x: &HyperParams,
    grid: &Stage2Grid,
    bounds: &HyperBox,
    optim: &OptimOptions,
) -> Result<FitResult> {
    if cells.iter().all(|c| c.is_empty()) {
        return Err(Error::InvalidInput("stage 2 needs data".into()));
    }
    let params = &STAGE2_PARAMS[..];
    let (lo, hi) = bounds.slice(params);
    let objective = |x: &[f64]| nlml(setup, cells, &theta_x.with_log10(params, x));

    let mut lattice = Vec::new();
    for &a in &grid.wv_sigma_q {
        for &b in &grid.wv_sigma_params {
            for &c in &grid.exp_sigma {
                for &d in &grid.exp_gamma {
                    let mut x = vec![a.log10(), b.log10(), c.log10(), d.log10()];
                    clamp_vec(&mut x, &lo, &hi);
                    lattice.push(x);
                }
            }
        }
    }
    let scores = ordered_map(&lattice, |x| objective(x));
    let mut start = 0;
    for k in 1..lattice.len() {
        if scores[k] < scores[start] {
            start = k;
        }
    }
    if !scores[start].is_finite() {
        return Err(Error::Conditioning("every lattice point failed to filter"));
    }

    let mut trace = Vec::new();
    let res = minimize_box(&objective, &lattice[start], &lo, &hi, optim, |it, phi, x| {
        trace.push(TraceRecord {
            start,
            iteration: it,
            phi,
            theta: theta_x.with_log10(params, x),
        });
    });
    debug_assert!(res.fx <= scores[start] + 1e-9);
    Ok(FitResult {
        theta: theta_x.with_log10(params, &res.x),
        phi: res.fx,
        at_bound: res.at_bound.clone(),
        converged: res.converged,
        evals: lattice.len() + res.evals,
        trace,
    })
}

/// Observed current span across segments, for grid placement.
pub fn current_span(segments: &[CycleSegment]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for seg in segments {
        for &i in &seg.current {
            lo = lo.min(i);
            hi = hi.max(i);
        }
    }
    (lo, hi)
}

/// Approximate state-of-charge span across segments: each segment starts
/// at the inverted rest voltage and is coulomb counted with the prior
/// inverse capacity. Good enough to place grids before any filtering.
pub fn soc_span(segments: &[CycleSegment], ocv: &OcvCurve, c_q_inv: f64) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for seg in segments {
        let (mut z, _) = ocv.inverse(seg.voltage[0]);
        lo = lo.min(z);
        hi = hi.max(z);
        for &i in &seg.current {
            z += i * seg.dt * c_q_inv / 3600.0;
            lo = lo.min(z);
            hi = hi.max(z);
        }
    }
    (lo, hi)
}
