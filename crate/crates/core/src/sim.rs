//! Ground-truth simulation for recovery and ageing studies.
//!
//! Generates seeded drive-cycle-like current profiles, integrates the
//! electro-thermal model with parameter functions evaluated at the true
//! instantaneous state, and injects measurement noise. The noise-free
//! latent states always ride along for estimator-error measurement; they
//! never feed the estimator.

use crate::battery::{step_dynamics, BatteryState, EcmParams, OcvCurve, ParamEstimate, ThermalParams};
use crate::filter::CycleSegment;
use crate::{Error, Result};
use alloc::boxed::Box;
use alloc::format;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
#[cfg(not(feature = "std"))]
use num_traits::Float;

type SocFn = Box<dyn Fn(f64) -> f64 + Send + Sync>;
type SocCurrentFn = Box<dyn Fn(f64, f64) -> f64 + Send + Sync>;
type DriftFn = Box<dyn Fn(f64) -> f64 + Send + Sync>;

/// True parameter functions and noise levels backing a simulation.
pub struct GroundTruth {
    pub alpha: SocFn,
    pub beta: SocFn,
    pub r0: SocCurrentFn,
    /// Inverse capacity, 1/Ah.
    pub q_inv: f64,
    pub thermal: ThermalParams,
    pub ocv: OcvCurve,
    pub noise_v: f64,
    pub noise_t: f64,
}

impl core::fmt::Debug for GroundTruth {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("GroundTruth")
            .field("q_inv", &self.q_inv)
            .field("noise_v", &self.noise_v)
            .field("noise_t", &self.noise_t)
            .finish()
    }
}

/// `asinh(|i|) / |i|` with the removable singularity filled at zero.
fn asinh_over(i: f64) -> f64 {
    let x = i.abs();
    if x < 1e-4 {
        1.0 - x * x / 6.0
    } else {
        x.asinh() / x
    }
}

/// The built-in reference parameter set used by the recovery study.
pub fn reference_truth() -> GroundTruth {
    GroundTruth {
        alpha: Box::new(|z| 0.015 - 0.09 * (0.05 - z).powi(3)),
        beta: Box::new(|z| 0.002 * (1.0 - (z - 0.5) * (z - 0.5))),
        r0: Box::new(|z, i| 0.05 * asinh_over(i) + 0.04 * (z - 1.0) * (z - 1.0)),
        q_inv: 1.2,
        thermal: ThermalParams::new(5.5, 15.7).unwrap(),
        ocv: OcvCurve::polynomial(alloc::vec![3.64, 0.55, -0.72, 0.75]).unwrap(),
        noise_v: 0.005,
        noise_t: 0.1,
    }
}

/// Seeded 1 Hz current profile.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CurrentProfile {
    /// Amperes at 1 Hz, charging positive.
    pub current: Vec<f64>,
    /// Generator seed when synthesised, absent for imported traces.
    pub seed: Option<u64>,
}

/// Drive-cycle-like excitation: smoothed random pulses with a net
/// discharge bias, a rest head for state initialisation, and a hard
/// amplitude clamp. Bit-reproducible from the seed.
pub fn synth_profile(seed: u64, duration_s: usize, i_max: f64) -> Result<CurrentProfile> {
    if duration_s < 60 {
        return Err(Error::InvalidInput("profile must cover at least 60 s".into()));
    }
    if i_max <= 0.0 {
        return Err(Error::NonPositive("current limit"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rest_head = 30.min(duration_s / 4);
    let mut raw = Vec::with_capacity(duration_s);
    raw.resize(rest_head, 0.0);
    while raw.len() < duration_s {
        let hold = rng.gen_range(4..=30usize);
        let level = if rng.gen_bool(0.18) {
            0.0
        } else {
            // discharge-heavy so state of charge sweeps a wide range
            rng.gen_range(-i_max..0.45 * i_max)
        };
        for _ in 0..hold {
            if raw.len() == duration_s {
                break;
            }
            raw.push(level);
        }
    }
    // first-order smoothing keeps the trace band limited
    let mut current = Vec::with_capacity(duration_s);
    let mut y = 0.0;
    for (k, &x) in raw.iter().enumerate() {
        y = if k < rest_head { 0.0 } else { 0.55 * y + 0.45 * x };
        current.push(y.clamp(-i_max, i_max));
    }
    Ok(CurrentProfile { current, seed: Some(seed) })
}

/// Noise-free internal states and clean outputs of a simulated cycle.
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LatentStates {
    pub soc: Vec<f64>,
    pub v1: Vec<f64>,
    pub temp: Vec<f64>,
    pub voltage_clean: Vec<f64>,
    pub temp_clean: Vec<f64>,
}

/// Simulated telemetry plus its latent truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SimOutput {
    pub segment: CycleSegment,
    pub latent: LatentStates,
}

struct Scaled<'a> {
    truth: &'a GroundTruth,
    q: f64,
    a: f64,
    b: f64,
    r: f64,
}

impl Scaled<'_> {
    fn params(&self, z: f64, i: f64) -> EcmParams {
        EcmParams {
            q_inv: ParamEstimate::exact(self.truth.q_inv * self.q),
            alpha: ParamEstimate::exact((self.truth.alpha)(z) * self.a),
            beta: ParamEstimate::exact((self.truth.beta)(z) * self.b),
            r0: ParamEstimate::exact((self.truth.r0)(z, i) * self.r),
        }
    }
}

fn simulate_scaled(
    scaled: &Scaled,
    profile: &CurrentProfile,
    z_init: f64,
    t_amb: f64,
    noise_seed: u64,
    zeta: f64,
    cycle_index: usize,
) -> Result<SimOutput> {
    let truth = scaled.truth;
    let n = profile.current.len();
    if n == 0 {
        return Err(Error::InvalidInput("empty current profile".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise_v = Normal::new(0.0, truth.noise_v).map_err(|_| Error::Negative("voltage noise"))?;
    let noise_t = Normal::new(0.0, truth.noise_t).map_err(|_| Error::Negative("temperature noise"))?;

    let mut state = BatteryState { soc: z_init, v1: 0.0, temp: t_amb };
    let mut latent = LatentStates::default();
    let mut seg = CycleSegment {
        current: profile.current.clone(),
        voltage: Vec::with_capacity(n),
        temp: Vec::with_capacity(n),
        t_amb: alloc::vec![t_amb; n],
        zeta,
        cycle_index,
        dt: 1.0,
        t_start: 0.0,
    };

    for t in 0..n {
        if !(0.02..=0.98).contains(&state.soc) {
            return Err(Error::InvalidInput(format!(
                "state of charge {:.4} out of simulation bounds at sample {t}",
                state.soc
            )));
        }
        let i_now = profile.current[t];
        let p = scaled.params(state.soc, i_now);
        let v_clean = truth.ocv.voltage(state.soc) + state.v1 + p.r0.mean * i_now;

        latent.soc.push(state.soc);
        latent.v1.push(state.v1);
        latent.temp.push(state.temp);
        latent.voltage_clean.push(v_clean);
        latent.temp_clean.push(state.temp);

        seg.voltage.push(v_clean + noise_v.sample(&mut rng));
        seg.temp.push(state.temp + noise_t.sample(&mut rng));

        if t + 1 < n {
            let (next, _) = step_dynamics(state, i_now, t_amb, 1.0, &p, &truth.thermal)?;
            state = next;
        }
    }
    Ok(SimOutput { segment: seg, latent })
}

/// Integrate one cycle at 1 Hz and add measurement noise.
pub fn simulate(
    truth: &GroundTruth,
    profile: &CurrentProfile,
    z_init: f64,
    t_amb: f64,
    noise_seed: u64,
) -> Result<SimOutput> {
    let scaled = Scaled { truth, q: 1.0, a: 1.0, b: 1.0, r: 1.0 };
    simulate_scaled(&scaled, profile, z_init, t_amb, noise_seed, 0.0, 0)
}

/// Multiplicative parameter drift over lifetime, applied per cycle.
pub struct DriftModel {
    pub q_inv: DriftFn,
    pub alpha: DriftFn,
    pub beta: DriftFn,
    pub r0: DriftFn,
}

impl core::fmt::Debug for DriftModel {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str("DriftModel")
    }
}

impl DriftModel {
    /// No ageing: every multiplier is one.
    pub fn none() -> Self {
        Self {
            q_inv: Box::new(|_| 1.0),
            alpha: Box::new(|_| 1.0),
            beta: Box::new(|_| 1.0),
            r0: Box::new(|_| 1.0),
        }
    }
}

/// Setup of a multi-cycle ageing dataset.
#[derive(Clone, Copy, Debug)]
pub struct AgingStudy {
    pub n_cycles: usize,
    /// Lifetime spacing between selected cycles, Ah; the gap stands in for
    /// the cycling that happens between down-selected cycles.
    pub cycle_spacing_ah: f64,
    pub profile_duration_s: usize,
    pub i_max: f64,
    pub z_init: f64,
    pub t_amb: f64,
    pub profile_seed: u64,
    pub noise_seed: u64,
}

/// Simulate `n_cycles` down-selected cycles with the truth scaled by the
/// drift multipliers at each cycle's lifetime coordinate
/// `zeta_k = k * cycle_spacing_ah`.
pub fn simulate_aging(
    truth: &GroundTruth,
    drift: &DriftModel,
    study: &AgingStudy,
) -> Result<Vec<SimOutput>> {
    if study.cycle_spacing_ah < 0.0 {
        return Err(Error::Negative("cycle spacing"));
    }
    let mut out = Vec::with_capacity(study.n_cycles);
    for k in 0..study.n_cycles {
        let zeta = k as f64 * study.cycle_spacing_ah;
        let scaled = Scaled {
            truth,
            q: (drift.q_inv)(zeta),
            a: (drift.alpha)(zeta),
            b: (drift.beta)(zeta),
            r: (drift.r0)(zeta),
        };
        let profile = synth_profile(
            study.profile_seed.wrapping_add(k as u64),
            study.profile_duration_s,
            study.i_max,
        )?;
        let sim = simulate_scaled(
            &scaled,
            &profile,
            study.z_init,
            study.t_amb,
            study.noise_seed.wrapping_add(k as u64),
            zeta,
            k,
        )?;
        out.push(sim);
    }
    Ok(out)
}
