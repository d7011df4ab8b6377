//! Joint extended Kalman filter over battery and GP states.
//!
//! One filter pass walks an ordered list of lifetime segments. GP states
//! advance only at segment boundaries (lifetime moves slowly compared to
//! the 1 Hz sampling, so the within-cycle step is folded into one
//! transition per segment); battery states are re-initialised from the
//! rest sample opening each segment. Within a segment the filter runs the
//! usual propagate/update recursion, accumulating the negative log
//! marginal likelihood from the innovations. A fixed-interval smoother
//! over the per-segment GP checkpoints then yields the lifetime posterior.

use crate::battery::{
    affine, guarded_affine, lambda_terms, output, step_dynamics, step_partials, BatteryState,
    EcmParams, OcvCurve, ParamEstimate, ThermalParams,
};
use crate::field::{init_field_cov, predict_uncertain_input, FieldBelief, FieldEval, GpField};
use crate::kernels::{exp_discrete, wv_discrete};
use crate::linalg::{chol_jittered, symmetrize};
use crate::{Error, Result};
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{Cholesky, DMatrix, DVector};
#[cfg(not(feature = "std"))]
use num_traits::Float;

/// Battery states at the front of the joint vector: soc, v1, temperature.
pub const N_BATT: usize = 3;

/// The four circuit-parameter fields, in joint-state order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum FieldId {
    QInv,
    Alpha,
    Beta,
    R0,
}

impl FieldId {
    pub const ALL: [FieldId; 4] = [FieldId::QInv, FieldId::Alpha, FieldId::Beta, FieldId::R0];

    pub fn index(self) -> usize {
        match self {
            FieldId::QInv => 0,
            FieldId::Alpha => 1,
            FieldId::Beta => 2,
            FieldId::R0 => 3,
        }
    }
}

/// Measurement noise standard deviations.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MeasurementNoise {
    /// Terminal voltage, volts.
    pub sigma_v: f64,
    /// Cell temperature, kelvin-equivalent.
    pub sigma_t: f64,
}

/// Prior-mean constants of the affine parameter transforms.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AffineConstants {
    pub q_inv: f64,
    pub alpha: f64,
    pub beta: f64,
    pub r0: f64,
}

/// Everything the filter needs to run over one cell.
#[derive(Debug)]
pub struct ModelSpec {
    pub q_inv: GpField,
    pub alpha: GpField,
    pub beta: GpField,
    pub r0: GpField,
    pub c: AffineConstants,
    pub ocv: OcvCurve,
    pub thermal: ThermalParams,
    /// Battery process-noise diagonal (soc, v1, temperature).
    pub q_batt: [f64; 3],
    /// Battery initial covariance diagonal at each segment start.
    pub p_batt0: [f64; 3],
    pub noise: MeasurementNoise,
}

impl ModelSpec {
    pub fn field(&self, id: FieldId) -> &GpField {
        match id {
            FieldId::QInv => &self.q_inv,
            FieldId::Alpha => &self.alpha,
            FieldId::Beta => &self.beta,
            FieldId::R0 => &self.r0,
        }
    }

    pub fn c_of(&self, id: FieldId) -> f64 {
        match id {
            FieldId::QInv => self.c.q_inv,
            FieldId::Alpha => self.c.alpha,
            FieldId::Beta => self.c.beta,
            FieldId::R0 => self.c.r0,
        }
    }

    fn fields(&self) -> [&GpField; 4] {
        [&self.q_inv, &self.alpha, &self.beta, &self.r0]
    }

    pub fn layout(&self) -> ModelLayout {
        ModelLayout {
            gp: GpLayout::new(&self.fields()),
        }
    }
}

/// Index bookkeeping for a list of GP fields packed as
/// `[smooth blocks (value, derivative interleaved) | one noise state each]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct GpLayout {
    smooth_start: Vec<usize>,
    n_points: Vec<usize>,
    noise_start: usize,
    total: usize,
}

impl GpLayout {
    pub(crate) fn new(fields: &[&GpField]) -> Self {
        let mut smooth_start = Vec::with_capacity(fields.len());
        let mut n_points = Vec::with_capacity(fields.len());
        let mut at = 0;
        for f in fields {
            smooth_start.push(at);
            n_points.push(f.grid.len());
            at += f.smooth_dim();
        }
        Self {
            smooth_start,
            n_points,
            noise_start: at,
            total: at + fields.len(),
        }
    }

    fn value(&self, f: usize, k: usize) -> usize {
        self.smooth_start[f] + 2 * k
    }

    fn noise(&self, f: usize) -> usize {
        self.noise_start + f
    }
}

/// Named index map over the joint state vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelLayout {
    gp: GpLayout,
}

impl ModelLayout {
    /// Full joint dimension: battery states plus GP states.
    pub fn total(&self) -> usize {
        N_BATT + self.gp.total
    }

    /// Dimension of the GP block alone.
    pub fn gp_dim(&self) -> usize {
        self.gp.total
    }

    /// Joint index of grid point `k`'s value state for a field.
    pub fn value_index(&self, id: FieldId, k: usize) -> usize {
        N_BATT + self.gp.value(id.index(), k)
    }

    /// Joint index of grid point `k`'s lifetime-derivative state.
    pub fn deriv_index(&self, id: FieldId, k: usize) -> usize {
        self.value_index(id, k) + 1
    }

    /// Joint index of a field's exponential noise state.
    pub fn noise_index(&self, id: FieldId) -> usize {
        N_BATT + self.gp.noise(id.index())
    }

    pub fn points(&self, id: FieldId) -> usize {
        self.gp.n_points[id.index()]
    }
}

/// Joint filter state: mean, covariance and the index map that names the
/// blocks. Covariance is re-symmetrised after every step.
#[derive(Clone, Debug, PartialEq)]
pub struct JointState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub layout: ModelLayout,
}

impl JointState {
    pub fn battery(&self) -> BatteryState {
        BatteryState {
            soc: self.mean[0],
            v1: self.mean[1],
            temp: self.mean[2],
        }
    }

    fn belief(&self, model: &ModelSpec, id: FieldId) -> FieldBelief {
        let n = self.layout.points(id);
        let values = DVector::from_fn(n, |k, _| self.mean[self.layout.value_index(id, k)]);
        let value_vars = DVector::from_fn(n, |k, _| {
            let v = self.layout.value_index(id, k);
            self.cov[(v, v)]
        });
        let ni = self.layout.noise_index(id);
        let _ = model;
        FieldBelief {
            values,
            value_vars,
            noise_mean: self.mean[ni],
            noise_var: self.cov[(ni, ni)],
        }
    }
}

/// Counters for guard activations during a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunDiag {
    /// State of charge left [0, 1] and was clamped.
    pub soc_clamped: usize,
    /// Affine-transformed alpha or inverse capacity hit the positivity floor.
    pub params_floored: usize,
    /// Alpha non-positive; forward-Euler fallback used for v1.
    pub degenerate_alpha: usize,
}

impl RunDiag {
    fn absorb(&mut self, other: RunDiag) {
        self.soc_clamped += other.soc_clamped;
        self.params_floored += other.params_floored;
        self.degenerate_alpha += other.degenerate_alpha;
    }
}

/// One down-selected discharge cycle of uniformly sampled telemetry.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CycleSegment {
    /// Applied current, amperes, charging positive.
    pub current: Vec<f64>,
    /// Terminal voltage, volts.
    pub voltage: Vec<f64>,
    /// Cell temperature.
    pub temp: Vec<f64>,
    /// Ambient temperature.
    pub t_amb: Vec<f64>,
    /// Lifetime coordinate (cumulative |Ah| throughput) at segment start.
    pub zeta: f64,
    pub cycle_index: usize,
    /// Sample spacing in seconds.
    pub dt: f64,
    /// Absolute time of the first sample, seconds, for provenance.
    pub t_start: f64,
}

impl CycleSegment {
    pub fn len(&self) -> usize {
        self.current.len()
    }

    pub fn is_empty(&self) -> bool {
        self.current.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::InvalidInput("empty segment".into()));
        }
        if self.voltage.len() != n || self.temp.len() != n || self.t_amb.len() != n {
            return Err(Error::InvalidInput("segment arrays differ in length".into()));
        }
        if !(self.dt > 0.0) || self.zeta < 0.0 {
            return Err(Error::InvalidInput("segment dt/zeta out of range".into()));
        }
        Ok(())
    }

    /// Throughput of this segment itself, in Ah.
    pub fn throughput(&self) -> f64 {
        self.current.iter().map(|i| i.abs()).sum::<f64>() * self.dt / 3600.0
    }
}

/// Per-sample filter output over one segment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SegmentResult {
    /// Innovations (voltage, temperature), one per sample.
    pub residuals: Vec<[f64; 2]>,
    /// Innovation covariance entries (s_vv, s_vt, s_tt), one per sample.
    pub innovation_covs: Vec<[f64; 3]>,
    /// Filtered battery states after each update.
    pub battery_states: Vec<BatteryState>,
    /// This segment's contribution to the NLML.
    pub phi: f64,
}

/// GP-block snapshot around one segment, the smoother's raw material.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterCheckpoint {
    /// Lifetime coordinate at segment start.
    pub zeta: f64,
    /// Lifetime step applied at the segment boundary; the transition
    /// actually used is rebuilt from this value.
    pub delta_zeta: f64,
    /// Predicted GP block right after the boundary transition.
    pub pre_mean: DVector<f64>,
    pub pre_cov: DMatrix<f64>,
    /// Filtered GP block after the segment's last update.
    pub post_mean: DVector<f64>,
    pub post_cov: DMatrix<f64>,
}

/// Output of a full filter pass over one cell.
#[derive(Debug)]
pub struct LifetimeRun {
    /// Accumulated negative log marginal likelihood.
    pub phi: f64,
    pub checkpoints: Vec<FilterCheckpoint>,
    pub segments: Vec<SegmentResult>,
    pub diag: RunDiag,
    pub final_state: Option<JointState>,
}

/// Record of one filter step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub residual: [f64; 2],
    /// Innovation covariance (s_vv, s_vt, s_tt).
    pub innovation_cov: [f64; 3],
    pub phi_increment: f64,
}

struct ParamEvals {
    q_inv: FieldEval,
    alpha: FieldEval,
    beta: FieldEval,
    r0: FieldEval,
    snapshot: EcmParams,
    floored: usize,
}

fn eval_params(model: &ModelSpec, state: &JointState, i_now: f64) -> Result<ParamEvals> {
    let mu_z = state.mean[0];
    let var_z = state.cov[(0, 0)].max(0.0);
    let eval = |id: FieldId| -> Result<FieldEval> {
        predict_uncertain_input(
            model.field(id),
            mu_z,
            var_z,
            i_now,
            &state.belief(model, id),
        )
    };
    let q_inv = eval(FieldId::QInv)?;
    let alpha = eval(FieldId::Alpha)?;
    let beta = eval(FieldId::Beta)?;
    let r0 = eval(FieldId::R0)?;

    let gp = |e: &FieldEval| ParamEstimate {
        mean: e.mean,
        var: e.var,
    };
    let (q_phys, q_floor) = guarded_affine(model.c.q_inv, gp(&q_inv));
    let (a_phys, a_floor) = guarded_affine(model.c.alpha, gp(&alpha));
    let snapshot = EcmParams {
        q_inv: q_phys,
        alpha: a_phys,
        beta: affine(model.c.beta, gp(&beta)),
        r0: affine(model.c.r0, gp(&r0)),
    };
    Ok(ParamEvals {
        q_inv,
        alpha,
        beta,
        r0,
        snapshot,
        floored: usize::from(q_floor) + usize::from(a_floor),
    })
}

/// The three battery rows of the transition Jacobian, over the full joint
/// state. All other rows of the transition are identity within a segment.
fn assemble_transition_rows(
    model: &ModelSpec,
    layout: &ModelLayout,
    ev: &ParamEvals,
    batt: BatteryState,
    i_app: f64,
    dt: f64,
) -> DMatrix<f64> {
    let sp = step_partials(batt, i_app, dt, &ev.snapshot, &model.thermal);
    let mut w = DMatrix::zeros(N_BATT, layout.total());

    w[(0, 0)] = 1.0 + sp.dsoc_dqinv * model.c.q_inv * ev.q_inv.dmean_dsoc;
    scatter_field(&mut w, 0, layout, FieldId::QInv, &ev.q_inv, sp.dsoc_dqinv * model.c.q_inv);

    w[(1, 0)] = sp.dv1_dalpha * model.c.alpha * ev.alpha.dmean_dsoc
        + sp.dv1_dbeta * model.c.beta * ev.beta.dmean_dsoc;
    w[(1, 1)] = sp.dv1_dv1;
    scatter_field(&mut w, 1, layout, FieldId::Alpha, &ev.alpha, sp.dv1_dalpha * model.c.alpha);
    scatter_field(&mut w, 1, layout, FieldId::Beta, &ev.beta, sp.dv1_dbeta * model.c.beta);

    w[(2, 0)] = sp.dtemp_dr0 * model.c.r0 * ev.r0.dmean_dsoc;
    w[(2, 1)] = sp.dtemp_dv1;
    w[(2, 2)] = sp.dtemp_dtemp;
    scatter_field(&mut w, 2, layout, FieldId::R0, &ev.r0, sp.dtemp_dr0 * model.c.r0);

    w
}

/// Scatter `scale * d(param)/d(states)` of one field into a Jacobian row:
/// value states carry the regression weights, derivative states have no
/// instantaneous effect, the noise state enters with unit weight.
fn scatter_field(
    m: &mut DMatrix<f64>,
    row: usize,
    layout: &ModelLayout,
    id: FieldId,
    eval: &FieldEval,
    scale: f64,
) {
    for k in 0..layout.points(id) {
        m[(row, layout.value_index(id, k))] = scale * eval.weights[k];
    }
    m[(row, layout.noise_index(id))] = scale;
}

fn assemble_observation(
    model: &ModelSpec,
    layout: &ModelLayout,
    r0_eval: &FieldEval,
    mu_z: f64,
    i_now: f64,
) -> DMatrix<f64> {
    let mut h = DMatrix::zeros(2, layout.total());
    h[(0, 0)] = model.ocv.slope(mu_z) + i_now * model.c.r0 * r0_eval.dmean_dsoc;
    h[(0, 1)] = 1.0;
    scatter_field(&mut h, 0, layout, FieldId::R0, r0_eval, i_now * model.c.r0);
    h[(1, 2)] = 1.0;
    h
}

/// Transition and observation Jacobians at a joint state, with soc
/// uncertainty taken from the state covariance.
pub fn linearize(
    model: &ModelSpec,
    state: &JointState,
    i_app: f64,
    dt: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let ev = eval_params(model, state, i_app)?;
    let w = assemble_transition_rows(model, &state.layout, &ev, state.battery(), i_app, dt);
    let mut g = DMatrix::identity(state.layout.total(), state.layout.total());
    g.view_mut((0, 0), (N_BATT, state.layout.total())).copy_from(&w);
    let h = assemble_observation(model, &state.layout, &ev.r0, state.mean[0], i_app);
    Ok((g, h))
}

/// Joint mean map over one zero-order-hold step: battery states advance,
/// GP states are frozen within a segment.
pub fn propagate_mean(
    model: &ModelSpec,
    state: &JointState,
    i_app: f64,
    t_amb: f64,
    dt: f64,
) -> Result<DVector<f64>> {
    let ev = eval_params(model, state, i_app)?;
    let (next, _) = step_dynamics(state.battery(), i_app, t_amb, dt, &ev.snapshot, &model.thermal)?;
    let mut mean = state.mean.clone();
    mean[0] = next.soc;
    mean[1] = next.v1;
    mean[2] = next.temp;
    Ok(mean)
}

/// Predicted voltage and temperature at a joint state.
pub fn observe_mean(model: &ModelSpec, state: &JointState, i_now: f64) -> Result<[f64; 2]> {
    let ev = eval_params(model, state, i_now)?;
    let (v, t) = output(&state.battery(), i_now, &model.ocv, ev.snapshot.r0.mean);
    Ok([v, t])
}

/// Fresh joint state from the rest sample opening the first segment:
/// soc from the inverted OCV, zero RC voltage, ambient temperature, and
/// the zero-mean GP prior with block-diagonal covariance.
pub fn init_joint(model: &ModelSpec, first_voltage: f64, t_amb: f64) -> Result<JointState> {
    let layout = model.layout();
    let (z0, clamped) = model.ocv.inverse(first_voltage);
    if clamped {
        return Err(Error::InvalidInput(alloc::format!(
            "rest voltage {first_voltage} outside the OCV range"
        )));
    }
    let n = layout.total();
    let mut mean = DVector::zeros(n);
    mean[0] = z0;
    mean[2] = t_amb;

    let mut cov = DMatrix::zeros(n, n);
    for k in 0..N_BATT {
        cov[(k, k)] = model.p_batt0[k];
    }
    for id in FieldId::ALL {
        let field = model.field(id);
        let (smooth, noise_var) = init_field_cov(field);
        let s = layout.value_index(id, 0);
        let d = field.smooth_dim();
        cov.view_mut((s, s), (d, d)).copy_from(&smooth);
        let ni = layout.noise_index(id);
        cov[(ni, ni)] = noise_var;
    }
    Ok(JointState { mean, cov, layout })
}

fn gp_transition_mean(model: &ModelSpec, layout: &ModelLayout, dz: f64, mean: &mut DVector<f64>) -> Result<()> {
    for id in FieldId::ALL {
        for k in 0..layout.points(id) {
            let v = layout.value_index(id, k);
            mean[v] += dz * mean[v + 1];
        }
        let (ae, _) = exp_discrete(dz, &model.field(id).exp)?;
        let ni = layout.noise_index(id);
        mean[ni] *= ae;
    }
    Ok(())
}

/// In-place `A P A^T` for the block-diagonal GP transition, acting on the
/// full joint covariance so battery cross terms transform consistently.
fn gp_transition_cov(model: &ModelSpec, layout: &ModelLayout, dz: f64, cov: &mut DMatrix<f64>) -> Result<()> {
    let n = cov.nrows();
    // row pass
    for id in FieldId::ALL {
        for k in 0..layout.points(id) {
            let v = layout.value_index(id, k);
            for c in 0..n {
                let add = dz * cov[(v + 1, c)];
                cov[(v, c)] += add;
            }
        }
        let (ae, _) = exp_discrete(dz, &model.field(id).exp)?;
        let ni = layout.noise_index(id);
        for c in 0..n {
            cov[(ni, c)] *= ae;
        }
    }
    // column pass
    for id in FieldId::ALL {
        for k in 0..layout.points(id) {
            let v = layout.value_index(id, k);
            for r in 0..n {
                let add = dz * cov[(r, v + 1)];
                cov[(r, v)] += add;
            }
        }
        let (ae, _) = exp_discrete(dz, &model.field(id).exp)?;
        let ni = layout.noise_index(id);
        for r in 0..n {
            cov[(r, ni)] *= ae;
        }
    }
    Ok(())
}

fn gp_add_process_noise(model: &ModelSpec, layout: &ModelLayout, dz: f64, cov: &mut DMatrix<f64>) -> Result<()> {
    for id in FieldId::ALL {
        let field = model.field(id);
        let (_, qwv) = wv_discrete(dz, &field.wv)?;
        let gram = field.gram();
        for j in 0..layout.points(id) {
            let rj = layout.value_index(id, j);
            for k in 0..layout.points(id) {
                let ck = layout.value_index(id, k);
                for a in 0..2 {
                    for b in 0..2 {
                        cov[(rj + a, ck + b)] += gram[(j, k)] * qwv[(a, b)];
                    }
                }
            }
        }
        let (_, qe) = exp_discrete(dz, &field.exp)?;
        let ni = layout.noise_index(id);
        cov[(ni, ni)] += qe;
    }
    Ok(())
}

/// Dense GP-block transition matrix for a lifetime step, used by the
/// smoother's gain computation.
fn gp_transition_matrix(model: &ModelSpec, layout: &ModelLayout, dz: f64) -> Result<DMatrix<f64>> {
    let g = layout.gp_dim();
    let mut a = DMatrix::identity(g, g);
    for id in FieldId::ALL {
        for k in 0..layout.points(id) {
            let v = layout.value_index(id, k) - N_BATT;
            a[(v, v + 1)] = dz;
        }
        let (ae, _) = exp_discrete(dz, &model.field(id).exp)?;
        let ni = layout.noise_index(id) - N_BATT;
        a[(ni, ni)] = ae;
    }
    Ok(a)
}

/// Advance the GP block over the lifetime gap since the previous segment,
/// then re-initialise the battery block from this segment's first sample.
/// Battery-GP cross covariance resets to zero: the boundary covariance is
/// block diagonal by construction.
pub fn begin_segment(
    model: &ModelSpec,
    state: &mut JointState,
    delta_zeta: f64,
    first_voltage: f64,
    t_amb: f64,
) -> Result<()> {
    if delta_zeta < 0.0 {
        return Err(Error::Negative("lifetime step"));
    }
    let layout = state.layout.clone();
    gp_transition_mean(model, &layout, delta_zeta, &mut state.mean)?;
    gp_transition_cov(model, &layout, delta_zeta, &mut state.cov)?;
    gp_add_process_noise(model, &layout, delta_zeta, &mut state.cov)?;

    let (z0, clamped) = model.ocv.inverse(first_voltage);
    if clamped {
        return Err(Error::InvalidInput(alloc::format!(
            "rest voltage {first_voltage} outside the OCV range"
        )));
    }
    state.mean[0] = z0;
    state.mean[1] = 0.0;
    state.mean[2] = t_amb;
    let n = layout.total();
    for k in 0..N_BATT {
        for c in 0..n {
            state.cov[(k, c)] = 0.0;
            state.cov[(c, k)] = 0.0;
        }
        state.cov[(k, k)] = model.p_batt0[k];
    }
    symmetrize(&mut state.cov);
    Ok(())
}

/// Joseph-form Kalman update shared by the joint filter and the scalar GP
/// regression driver. Returns the innovation covariance and the NLML
/// increment `e' S^-1 e / 2 + ln|2 pi S| / 2`.
fn kalman_update(
    mean: &mut DVector<f64>,
    cov: &mut DMatrix<f64>,
    h: &DMatrix<f64>,
    innovation: &DVector<f64>,
    r: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, f64)> {
    let a = h * &*cov; // H P
    let hpht = &a * h.transpose();
    let s = &hpht + r + lambda;
    let chol_s = Cholesky::new(s.clone()).ok_or(Error::Conditioning("innovation covariance"))?;

    let gain = chol_s.solve(&a).transpose(); // P H' S^-1
    *mean += &gain * innovation;

    let b = &hpht + r;
    let ka = &gain * &a;
    *cov -= &ka;
    *cov -= ka.transpose();
    *cov += &gain * b * gain.transpose();
    symmetrize(cov);

    let m = innovation.len() as f64;
    let quad = innovation.dot(&chol_s.solve(innovation));
    let logdet: f64 = chol_s.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    let phi = 0.5 * quad + 0.5 * (logdet + m * (2.0 * core::f64::consts::PI).ln());
    Ok((s, phi))
}

/// One filter step: optional zero-order-hold propagation from the previous
/// sample, then the measurement update. The first sample of a segment is
/// update-only (`prev = None`), so a segment yields one residual per row.
pub fn ekf_step(
    model: &ModelSpec,
    state: &mut JointState,
    prev: Option<(f64, f64, f64)>,
    sample: (f64, f64, f64),
    diag: &mut RunDiag,
) -> Result<StepRecord> {
    let layout = state.layout.clone();
    if let Some((i_prev, t_amb_prev, dt)) = prev {
        let ev = eval_params(model, state, i_prev)?;
        diag.params_floored += ev.floored;

        let batt = state.battery();
        let w = assemble_transition_rows(model, &layout, &ev, batt, i_prev, dt);
        let lam = lambda_terms(batt, i_prev, dt, &ev.snapshot, &model.thermal)?;

        // G P G': replace the first three columns of P with P W', then the
        // first three rows with W (P W')-patched matrix.
        let t_cols = &state.cov * w.transpose();
        let mut p = state.cov.clone();
        p.view_mut((0, 0), (layout.total(), N_BATT)).copy_from(&t_cols);
        let top = &w * &p;
        p.view_mut((0, 0), (N_BATT, layout.total())).copy_from(&top);
        for k in 0..N_BATT {
            p[(k, k)] += model.q_batt[k];
        }
        p[(1, 1)] += lam.v1;
        p[(2, 2)] += lam.temp;
        symmetrize(&mut p);
        state.cov = p;

        let (next, flags) =
            step_dynamics(batt, i_prev, t_amb_prev, dt, &ev.snapshot, &model.thermal)?;
        state.mean[0] = next.soc;
        state.mean[1] = next.v1;
        state.mean[2] = next.temp;
        diag.soc_clamped += usize::from(flags.soc_clamped);
        diag.degenerate_alpha += usize::from(flags.degenerate_alpha);
    }

    let (i_now, v_meas, t_meas) = sample;
    let mu_z = state.mean[0];
    let var_z = state.cov[(0, 0)].max(0.0);
    let r0_eval = predict_uncertain_input(
        &model.r0,
        mu_z,
        var_z,
        i_now,
        &state.belief(model, FieldId::R0),
    )?;
    let r0_phys = affine(model.c.r0, ParamEstimate { mean: r0_eval.mean, var: r0_eval.var });

    let (v_pred, t_pred) = output(&state.battery(), i_now, &model.ocv, r0_phys.mean);
    let innovation = DVector::from_vec(vec![v_meas - v_pred, t_meas - t_pred]);

    let h = assemble_observation(model, &layout, &r0_eval, mu_z, i_now);
    let r = DMatrix::from_diagonal(&DVector::from_vec(vec![
        model.noise.sigma_v * model.noise.sigma_v,
        model.noise.sigma_t * model.noise.sigma_t,
    ]));
    let mut lambda = DMatrix::zeros(2, 2);
    lambda[(0, 0)] = r0_phys.var * i_now * i_now;

    let (s, phi) = kalman_update(&mut state.mean, &mut state.cov, &h, &innovation, &r, &lambda)?;

    if !(0.0..=1.0).contains(&state.mean[0]) {
        diag.soc_clamped += 1;
        state.mean[0] = state.mean[0].clamp(-0.05, 1.05);
    }

    Ok(StepRecord {
        residual: [innovation[0], innovation[1]],
        innovation_cov: [s[(0, 0)], s[(0, 1)], s[(1, 1)]],
        phi_increment: phi,
    })
}

fn gp_block_of(state: &JointState) -> (DVector<f64>, DMatrix<f64>) {
    let g = state.layout.gp_dim();
    (
        DVector::from(state.mean.rows(N_BATT, g)),
        DMatrix::from(state.cov.view((N_BATT, N_BATT), (g, g))),
    )
}

/// Run the filter over an ordered list of segments, accumulating the NLML
/// and recording one GP checkpoint per segment for the smoother.
pub fn run_lifetime(model: &ModelSpec, segments: &[CycleSegment]) -> Result<LifetimeRun> {
    let mut run = LifetimeRun {
        phi: 0.0,
        checkpoints: Vec::with_capacity(segments.len()),
        segments: Vec::with_capacity(segments.len()),
        diag: RunDiag::default(),
        final_state: None,
    };
    if segments.is_empty() {
        return Ok(run);
    }
    if segments.windows(2).any(|w| w[1].zeta < w[0].zeta) {
        return Err(Error::InvalidInput("segments must be ordered by lifetime".into()));
    }

    let mut state = init_joint(model, segments[0].voltage[0], segments[0].t_amb[0])?;
    let mut prev_zeta = 0.0;
    for (si, seg) in segments.iter().enumerate() {
        seg.validate().map_err(|e| e.in_segment(si))?;
        let dz = seg.zeta - prev_zeta;
        begin_segment(model, &mut state, dz, seg.voltage[0], seg.t_amb[0])
            .map_err(|e| e.in_segment(si))?;
        let (pre_mean, pre_cov) = gp_block_of(&state);

        let mut seg_res = SegmentResult::default();
        let mut diag = RunDiag::default();
        for t in 0..seg.len() {
            let prev = (t > 0).then(|| (seg.current[t - 1], seg.t_amb[t - 1], seg.dt));
            let rec = ekf_step(
                model,
                &mut state,
                prev,
                (seg.current[t], seg.voltage[t], seg.temp[t]),
                &mut diag,
            )
            .map_err(|e| e.in_segment(si))?;
            seg_res.residuals.push(rec.residual);
            seg_res.innovation_covs.push(rec.innovation_cov);
            seg_res.battery_states.push(state.battery());
            seg_res.phi += rec.phi_increment;
        }
        run.diag.absorb(diag);
        run.phi += seg_res.phi;
        run.segments.push(seg_res);

        let (post_mean, post_cov) = gp_block_of(&state);
        run.checkpoints.push(FilterCheckpoint {
            zeta: seg.zeta,
            delta_zeta: dz,
            pre_mean,
            pre_cov,
            post_mean,
            post_cov,
        });
        prev_zeta = seg.zeta;
    }
    run.final_state = Some(state);
    Ok(run)
}

/// RTS-smoothed GP posterior over the lifetime checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothedPosterior {
    pub zetas: Vec<f64>,
    /// Smoothed GP-block means, one per checkpoint.
    pub means: Vec<DVector<f64>>,
    /// Smoothed GP-block covariances, one per checkpoint.
    pub covs: Vec<DMatrix<f64>>,
}

/// Fixed-interval smoothing of the linear GP subsystem across segments.
/// The last checkpoint keeps its filtered value; earlier ones gain the
/// influence of later data through the standard backward gain.
pub fn rts_smooth(model: &ModelSpec, checkpoints: &[FilterCheckpoint]) -> Result<SmoothedPosterior> {
    if checkpoints.is_empty() {
        return Err(Error::InvalidInput("no checkpoints to smooth".into()));
    }
    let layout = model.layout();
    let n = checkpoints.len();
    let mut means = vec![DVector::zeros(0); n];
    let mut covs = vec![DMatrix::zeros(0, 0); n];
    means[n - 1] = checkpoints[n - 1].post_mean.clone();
    covs[n - 1] = checkpoints[n - 1].post_cov.clone();

    for k in (0..n - 1).rev() {
        let next = &checkpoints[k + 1];
        let a = gp_transition_matrix(model, &layout, next.delta_zeta)?;
        let chol = chol_jittered(next.pre_cov.clone(), "smoother predicted covariance")?;
        let x = &a * &checkpoints[k].post_cov; // A P+, transpose of P+ A'
        let gain = chol.solve(&x).transpose(); // P+ A' (P-)^-1

        means[k] = &checkpoints[k].post_mean + &gain * (&means[k + 1] - &next.pre_mean);
        let dcov = &covs[k + 1] - &next.pre_cov;
        let mut cov = &checkpoints[k].post_cov + &gain * dcov * gain.transpose();
        symmetrize(&mut cov);
        covs[k] = cov;
    }
    Ok(SmoothedPosterior {
        zetas: checkpoints.iter().map(|c| c.zeta).collect(),
        means,
        covs,
    })
}

impl SmoothedPosterior {
    /// GP block propagated to an arbitrary lifetime coordinate. Uses the
    /// latest checkpoint at or before `zeta` and predicts forward; the WV
    /// mean extrapolates along its last slope while the noise channel
    /// decays toward zero. Coordinates before the first checkpoint
    /// evaluate at the first checkpoint.
    pub fn state_at(&self, model: &ModelSpec, zeta: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let layout = model.layout();
        let base = match self.zetas.iter().rposition(|&z| z <= zeta) {
            Some(k) => k,
            None => 0,
        };
        let dz = (zeta - self.zetas[base]).max(0.0);
        let mut mean = self.means[base].clone();
        let mut cov = self.covs[base].clone();
        if dz > 0.0 {
            // reuse the joint-block helpers by faking the battery offset
            let a = gp_transition_matrix(model, &layout, dz)?;
            mean = &a * mean;
            cov = &a * cov * a.transpose();
            let mut padded = DMatrix::zeros(layout.total(), layout.total());
            padded
                .view_mut((N_BATT, N_BATT), (layout.gp_dim(), layout.gp_dim()))
                .copy_from(&cov);
            gp_add_process_noise(model, &layout, dz, &mut padded)?;
            cov = DMatrix::from(padded.view((N_BATT, N_BATT), (layout.gp_dim(), layout.gp_dim())));
        }
        Ok((mean, cov))
    }

    /// Physical parameter estimate at `(zeta, soc, current)`. The noise
    /// channel is included when `include_noise` is set; validation against
    /// slow reference measurements usually strips it.
    pub fn param_at(
        &self,
        model: &ModelSpec,
        id: FieldId,
        zeta: f64,
        soc: f64,
        current: f64,
        include_noise: bool,
    ) -> Result<ParamEstimate> {
        let (mean, cov) = self.state_at(model, zeta)?;
        let layout = model.layout();
        let npts = layout.points(id);
        let vi = |k: usize| layout.value_index(id, k) - N_BATT;
        let ni = layout.noise_index(id) - N_BATT;
        let belief = FieldBelief {
            values: DVector::from_fn(npts, |k, _| mean[vi(k)]),
            value_vars: DVector::from_fn(npts, |k, _| cov[(vi(k), vi(k))]),
            noise_mean: if include_noise { mean[ni] } else { 0.0 },
            noise_var: if include_noise { cov[(ni, ni)] } else { 0.0 },
        };
        let eval = predict_uncertain_input(model.field(id), soc, 0.0, current, &belief)?;
        Ok(affine(
            model.c_of(id),
            ParamEstimate { mean: eval.mean, var: eval.var },
        ))
    }
}

/// Parameter estimates extrapolated beyond the smoothed horizon.
pub fn forecast(
    model: &ModelSpec,
    smoothed: &SmoothedPosterior,
    id: FieldId,
    zeta_star: f64,
    queries: &[(f64, f64)],
    include_noise: bool,
) -> Result<Vec<ParamEstimate>> {
    queries
        .iter()
        .map(|&(soc, current)| smoothed.param_at(model, id, zeta_star, soc, current, include_noise))
        .collect()
}

/// Scalar recursive GP regression over lifetime: one constant-kernel grid
/// point observed directly through `y = value + noise_state + e`. Exercises
/// the same transition, update, likelihood and smoothing code as the joint
/// filter, and must agree with batch GP regression on the kernel
/// `se_magnitude_sq * wv(z + z0, z' + z0) + exp(z, z')`.
#[derive(Debug)]
pub struct ScalarGpModel {
    pub se_magnitude_sq: f64,
    pub wv: crate::kernels::WvKernelParams,
    pub exp: crate::kernels::ExpKernelParams,
    pub noise_sq: f64,
}

#[derive(Debug)]
pub struct ScalarGpRun {
    pub phi: f64,
    /// Smoothed latent function value (mean, variance) at each input.
    pub smoothed: Vec<(f64, f64)>,
}

impl ScalarGpModel {
    fn as_model(&self) -> Result<ModelSpec> {
        let field = GpField::new(
            crate::field::Grid::scalar(),
            crate::kernels::SeKernelParams::constant(self.se_magnitude_sq)?,
            self.wv,
            self.exp,
        )?;
        Ok(ModelSpec {
            q_inv: field.clone(),
            alpha: field.clone(),
            beta: field.clone(),
            r0: field,
            c: AffineConstants { q_inv: 1.0, alpha: 1.0, beta: 1.0, r0: 1.0 },
            ocv: OcvCurve::polynomial(vec![3.0, 1.0]).unwrap(),
            thermal: ThermalParams::new(1.0, 1.0).unwrap(),
            q_batt: [0.0; 3],
            p_batt0: [0.0; 3],
            noise: MeasurementNoise { sigma_v: self.noise_sq.sqrt(), sigma_t: 1.0 },
        })
    }
}

/// Filter + smooth a scalar GP over strictly increasing inputs.
///
/// Only the first of the four replicated fields is observed; the other
/// three ride along untouched, which keeps the code path identical to the
/// joint estimator's GP subsystem.
pub fn run_scalar_gp(model: &ScalarGpModel, data: &[(f64, f64)]) -> Result<ScalarGpRun> {
    if data.is_empty() {
        return Ok(ScalarGpRun { phi: 0.0, smoothed: Vec::new() });
    }
    if data.windows(2).any(|w| w[1].0 < w[0].0) || data[0].0 < 0.0 {
        return Err(Error::InvalidInput("inputs must be nonnegative and sorted".into()));
    }
    let spec = model.as_model()?;
    let layout = spec.layout();
    let gdim = layout.gp_dim();

    let mut mean = DVector::zeros(layout.total());
    let mut cov = DMatrix::zeros(layout.total(), layout.total());
    for id in FieldId::ALL {
        let (smooth, nv) = init_field_cov(spec.field(id));
        let s = layout.value_index(id, 0);
        cov.view_mut((s, s), (2, 2)).copy_from(&smooth);
        let ni = layout.noise_index(id);
        cov[(ni, ni)] = nv;
    }

    let vi = layout.value_index(FieldId::QInv, 0);
    let ni = layout.noise_index(FieldId::QInv);
    let mut h = DMatrix::zeros(1, layout.total());
    h[(0, vi)] = 1.0;
    h[(0, ni)] = 1.0;
    let r = DMatrix::from_element(1, 1, model.noise_sq);
    let lambda = DMatrix::zeros(1, 1);

    let mut phi = 0.0;
    let mut checkpoints = Vec::with_capacity(data.len());
    let mut prev_z = 0.0;
    for &(z, y) in data {
        let dz = z - prev_z;
        gp_transition_mean(&spec, &layout, dz, &mut mean)?;
        gp_transition_cov(&spec, &layout, dz, &mut cov)?;
        gp_add_process_noise(&spec, &layout, dz, &mut cov)?;
        let pre_mean = DVector::from(mean.rows(N_BATT, gdim));
        let pre_cov = DMatrix::from(cov.view((N_BATT, N_BATT), (gdim, gdim)));

        let pred = mean[vi] + mean[ni];
        let innovation = DVector::from_element(1, y - pred);
        let (_, dphi) = kalman_update(&mut mean, &mut cov, &h, &innovation, &r, &lambda)?;
        phi += dphi;

        checkpoints.push(FilterCheckpoint {
            zeta: z,
            delta_zeta: dz,
            pre_mean,
            pre_cov,
            post_mean: DVector::from(mean.rows(N_BATT, gdim)),
            post_cov: DMatrix::from(cov.view((N_BATT, N_BATT), (gdim, gdim))),
        });
        prev_z = z;
    }

    let smoothed = rts_smooth(&spec, &checkpoints)?;
    let out = smoothed
        .zetas
        .iter()
        .enumerate()
        .map(|(k, _)| {
            let m = &smoothed.means[k];
            let p = &smoothed.covs[k];
            let (v, n) = (vi - N_BATT, ni - N_BATT);
            (m[v] + m[n], p[(v, v)] + p[(n, n)] + 2.0 * p[(v, n)])
        })
        .collect();
    Ok(ScalarGpRun { phi, smoothed: out })
}
