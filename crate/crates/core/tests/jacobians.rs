//! Analytic transition and observation Jacobians against central finite
//! differences of the actual mean maps, over random joint states.

mod common;

use gpecm_core::battery::{OcvCurve, ThermalParams};
use gpecm_core::field::{Grid, GpField};
use gpecm_core::filter::{
    init_joint, linearize, observe_mean, propagate_mean, AffineConstants, FieldId,
    MeasurementNoise, ModelSpec,
};
use gpecm_core::kernels::{solve_zeta0, Dim, ExpKernelParams, SeKernelParams, WvKernelParams};
use gpecm_core::linspace;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn test_model() -> ModelSpec {
    let wv = WvKernelParams::new(1.0, solve_zeta0(1.0, 1.0).unwrap()).unwrap();
    let exp = ExpKernelParams::new(0.01, 1.0).unwrap();
    let se_ab = SeKernelParams::new(0.09, vec![(Dim::Soc, 10.0)]).unwrap();
    ModelSpec {
        q_inv: GpField::new(Grid::scalar(), SeKernelParams::constant(0.04).unwrap(), wv, exp)
            .unwrap(),
        alpha: GpField::new(Grid::over_soc(&linspace(0.2, 0.9, 4)).unwrap(), se_ab.clone(), wv, exp)
            .unwrap(),
        beta: GpField::new(Grid::over_soc(&linspace(0.2, 0.9, 4)).unwrap(), se_ab, wv, exp)
            .unwrap(),
        r0: GpField::new(
            Grid::soc_current(&linspace(0.2, 0.9, 3), &linspace(-4.0, 1.0, 3)).unwrap(),
            SeKernelParams::new(0.09, vec![(Dim::Soc, 8.0), (Dim::Current, 0.25)]).unwrap(),
            wv,
            exp,
        )
        .unwrap(),
        c: AffineConstants { q_inv: 1.09, alpha: 0.01, beta: 0.0007, r0: 0.04 },
        ocv: OcvCurve::polynomial(vec![3.64, 0.55, -0.72, 0.75]).unwrap(),
        thermal: ThermalParams::new(5.5, 15.7).unwrap(),
        q_batt: [1e-12, 1e-6, 1e-4],
        p_batt0: [1e-3, 1e-4, 0.1],
        noise: MeasurementNoise { sigma_v: 0.005, sigma_t: 0.1 },
    }
}

// absolute floor sized to the finite-difference roundoff: outputs reach
// ~25 (temperature), so eps * |f| / h is a few 1e-10 at h = 1e-5
fn agreement(analytic: f64, fd: f64) -> bool {
    (analytic - fd).abs() <= 1e-5 * analytic.abs().max(fd.abs()) + 5e-9
}

#[test]
fn transition_and_observation_jacobians_match_finite_differences() {
    let model = test_model();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dt = 1.0;
    let t_amb = 25.0;

    for trial in 0..100 {
        let v0 = model.ocv.voltage(rng.gen_range(0.35..0.8));
        let mut state = init_joint(&model, v0, t_amb).unwrap();
        state.mean[1] = rng.gen_range(-0.02..0.02);
        state.mean[2] = rng.gen_range(23.0..28.0);
        for k in 3..state.layout.total() {
            state.mean[k] = rng.gen_range(-0.2..0.2);
        }
        let i_app = rng.gen_range(-4.0..1.5);

        let (g, h) = linearize(&model, &state, i_app, dt).unwrap();

        let n = state.layout.total();
        for j in 0..n {
            let hstep = 1e-5 * state.mean[j].abs().max(1.0);
            let mut up = state.clone();
            up.mean[j] += hstep;
            let mut dn = state.clone();
            dn.mean[j] -= hstep;

            let fup = propagate_mean(&model, &up, i_app, t_amb, dt).unwrap();
            let fdn = propagate_mean(&model, &dn, i_app, t_amb, dt).unwrap();
            for r in 0..3 {
                let fd = (fup[r] - fdn[r]) / (2.0 * hstep);
                assert!(
                    agreement(g[(r, j)], fd),
                    "trial {trial}: G[{r},{j}] analytic {} vs fd {fd}",
                    g[(r, j)]
                );
            }

            let oup = observe_mean(&model, &up, i_app).unwrap();
            let odn = observe_mean(&model, &dn, i_app).unwrap();
            for r in 0..2 {
                let fd = (oup[r] - odn[r]) / (2.0 * hstep);
                assert!(
                    agreement(h[(r, j)], fd),
                    "trial {trial}: H[{r},{j}] analytic {} vs fd {fd}",
                    h[(r, j)]
                );
            }
        }

        // GP rows of the transition are exactly identity within a segment
        for r in 3..n {
            for j in 0..n {
                let expect = if r == j { 1.0 } else { 0.0 };
                assert_eq!(g[(r, j)], expect);
            }
        }
    }
}

#[test]
fn observation_row_structure() {
    let model = test_model();
    let state = init_joint(&model, model.ocv.voltage(0.6), 25.0).unwrap();
    let i_app = 2.0;
    let (_, h) = linearize(&model, &state, i_app, 1.0).unwrap();

    assert_eq!(h[(0, 1)], 1.0);
    assert_eq!(h[(1, 2)], 1.0);
    // voltage sensitivity to the series-resistance noise state is i * c
    let ni = state.layout.noise_index(FieldId::R0);
    assert!((h[(0, ni)] - i_app * model.c.r0).abs() < 1e-12);
    assert_eq!(h[(1, ni)], 0.0);
    // temperature row touches nothing else
    for j in 0..state.layout.total() {
        if j != 2 {
            assert_eq!(h[(1, j)], 0.0);
        }
    }
}
