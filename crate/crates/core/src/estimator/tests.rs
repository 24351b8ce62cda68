use approx::assert_abs_diff_eq;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::*;
use crate::data::{Dataset, EstimationData, InstrumentSpec};
use crate::error::SmmError;
use crate::moments::{ModelKind, MomentModel};
use crate::numerics::linalg::SquareMatrix;
use crate::testutil::{random_data, random_dataset, rng};

fn estimation(ds: &Dataset) -> EstimationData {
    EstimationData::new(ds, &InstrumentSpec::indicators(ds.levels())).unwrap()
}

#[test]
fn objective_identity_weight_is_squared_norm() {
    let data = random_data(&mut rng(1), 40, 3, false);
    let model = MomentModel::new(ModelKind::Additive, &data).unwrap();
    let theta = [0.3, 0.1];
    let g = model.mean_moments(&data, &theta).unwrap();
    let obj = gmm_objective(&model, &data, &theta, &SquareMatrix::identity(3)).unwrap();
    assert_abs_diff_eq!(obj, g.norm_squared(), epsilon = 1e-15);
}

#[test]
fn objective_matches_double_loop() {
    let ds = random_dataset(&mut rng(2), 10, 3, false);
    let data = estimation(&ds);
    let model = MomentModel::new(ModelKind::MultMmom0, &data).unwrap();
    let theta = [0.4, 0.3];
    let w = model.initial_weight(&data);
    let obj = gmm_objective(&model, &data, &theta, &SquareMatrix::new(w.clone()).unwrap()).unwrap();

    let winv = w.try_inverse().unwrap();
    let mut gbar = [0.0; 3];
    for i in 0..ds.n() {
        let e = ds.y()[i] * (-theta[0] * ds.x()[i]).exp() - theta[1];
        let s = [1.0, f64::from(ds.z()[i] == 1), f64::from(ds.z()[i] == 2)];
        for a in 0..3 {
            gbar[a] += e * s[a] / ds.n() as f64;
        }
    }
    let mut brute = 0.0;
    for a in 0..3 {
        for b in 0..3 {
            brute += gbar[a] * winv[(a, b)] * gbar[b];
        }
    }
    assert_abs_diff_eq!(obj, brute, epsilon = 1e-12);
}

#[test]
fn wald_ratio_for_binary_instrument() {
    // level means: ΔY = 0.25, ΔX = 0.5
    let z = vec![0, 0, 0, 0, 1, 1, 1, 1];
    let x = vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0];
    let y = vec![0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
    let ds = Dataset::from_levels(y, x, z, vec![0.0, 1.0]).unwrap();
    let data = estimation(&ds);
    let fit = fit_model(ModelKind::Additive, &data, 1).unwrap();
    assert_abs_diff_eq!(fit.psi0(), 0.5, epsilon = 1e-12);
    let tsls = fit_2sls_additive(&data).unwrap();
    assert_abs_diff_eq!(tsls.psi0(), 0.5, epsilon = 1e-12);
}

#[test]
fn one_step_additive_equals_tsls() {
    let mut r = rng(3);
    for trial in 0..50 {
        let levels = 2 + trial % 4;
        let data = random_data(&mut r, 80 + trial, levels, trial % 2 == 0);
        let gmm = fit_model(ModelKind::Additive, &data, 1).unwrap();
        let tsls = fit_2sls_additive(&data).unwrap();
        for j in 0..2 {
            assert_abs_diff_eq!(gmm.theta[j], tsls.theta[j], epsilon = 1e-10);
        }
    }
}

#[test]
fn tsls_with_exposure_as_own_instrument_is_ols() {
    let mut r = rng(4);
    let n = 50;
    let x: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let y: Vec<f64> = x.iter().map(|&v| 0.3 + 1.7 * v + r.random_range(-0.5..0.5)).collect();
    let reg = DMatrix::from_fn(n, 2, |i, j| if j == 0 { x[i] } else { 1.0 });
    let yv = DVector::from_vec(y);
    let b = tsls_general(&reg, &reg, &yv).unwrap();
    let ols = (reg.transpose() * &reg).try_inverse().unwrap() * reg.transpose() * &yv;
    assert_abs_diff_eq!(b[0], ols[0], epsilon = 1e-12);
    assert_abs_diff_eq!(b[1], ols[1], epsilon = 1e-12);
}

#[test]
fn just_identified_fits_solve_exactly() {
    let mut r = rng(5);
    let data = random_data(&mut r, 300, 2, false);
    for kind in [ModelKind::Additive, ModelKind::MultMmom0, ModelKind::MultMmom1, ModelKind::MultMmomc, ModelKind::MultExpanded] {
        let model = MomentModel::new(kind, &data).unwrap();
        assert_eq!(model.over_id_df(), 0, "{kind}");
        let one = fit_model(kind, &data, 1).unwrap();
        let two = fit_model(kind, &data, 2).unwrap();
        let g = model.mean_moments(&data, one.theta.as_slice()).unwrap();
        assert!(g.amax() <= 1e-8, "{kind}: {}", g.amax());
        assert!(one.objective <= 1e-12);
        assert!(one.j_test.is_none() && two.j_test.is_none());
        assert!(matches!(hansen_j(&two, &model, &data), Err(SmmError::NotOverIdentified)));
        for j in 0..one.theta.len() {
            assert_abs_diff_eq!(one.theta[j], two.theta[j], epsilon = 1e-8);
        }
    }
}

#[test]
fn multiplicative_variants_share_the_root_with_one_instrument() {
    let data = random_data(&mut rng(6), 400, 2, false);
    let psi: Vec<f64> = [ModelKind::MultMmom0, ModelKind::MultMmom1, ModelKind::MultMmomc]
        .iter()
        .map(|&k| fit_model(k, &data, 1).unwrap().psi0())
        .collect();
    assert_abs_diff_eq!(psi[0], psi[1], epsilon = 1e-9);
    assert_abs_diff_eq!(psi[0], psi[2], epsilon = 1e-9);
}

/// Refines a lattice around the best point; returns the minimiser.
fn grid_search(model: &MomentModel, data: &EstimationData, centre: [f64; 2], half_width: f64) -> [f64; 2] {
    let winv = model.initial_weight(data).try_inverse().unwrap();
    let obj = |t: [f64; 2]| {
        model
            .mean_moments(data, &t)
            .map(|g| (g.transpose() * &winv * &g)[(0, 0)])
            .unwrap_or(f64::INFINITY)
    };
    let points = 2001;
    let mut best = centre;
    let mut width = half_width;
    for _ in 0..3 {
        let step = 2.0 * width / (points - 1) as f64;
        let origin = best;
        let mut best_val = f64::INFINITY;
        for a in 0..points {
            for b in 0..points {
                let t = [origin[0] - width + a as f64 * step, origin[1] - width + b as f64 * step];
                let v = obj(t);
                if v < best_val {
                    best_val = v;
                    best = t;
                }
            }
        }
        width = 2.0 * step;
    }
    best
}

#[test]
fn gauss_newton_matches_grid_search() {
    let data = random_data(&mut rng(7), 20, 3, false);
    let fit = fit_model(ModelKind::Additive, &data, 1).unwrap();
    let model = MomentModel::new(ModelKind::Additive, &data).unwrap();
    let grid = grid_search(&model, &data, [0.0, 0.0], 3.0);
    for j in 0..2 {
        assert_abs_diff_eq!(fit.theta[j], grid[j], epsilon = 1e-6);
    }
}

#[test]
fn scaling_outcome_scales_intercept_only() {
    let mut r = rng(8);
    let ds = random_dataset(&mut r, 500, 3, false);
    let data = estimation(&ds);
    let base = fit_model(ModelKind::MultMmom0, &data, 1).unwrap();
    let scaled = estimation(&ds.with_outcome(ds.y().iter().map(|v| 3.5 * v).collect()).unwrap());
    let fit = fit_model(ModelKind::MultMmom0, &scaled, 1).unwrap();
    assert_abs_diff_eq!(fit.psi0(), base.psi0(), epsilon = 1e-8);
    assert_abs_diff_eq!(fit.theta[1], 3.5 * base.theta[1], epsilon = 1e-8);
}

#[test]
fn j_invariant_to_instrument_reparameterisation() {
    let ds = random_dataset(&mut rng(9), 800, 3, false);
    let a = EstimationData::new(&ds, &InstrumentSpec::indicators(3)).unwrap();
    let spec = InstrumentSpec { reference_level: 2, ..InstrumentSpec::indicators(3) };
    let b = EstimationData::new(&ds, &spec).unwrap();
    let mut c = a.clone();
    c.s.swap_columns(1, 2);
    for kind in [ModelKind::Additive, ModelKind::MultMmomc] {
        let ja = fit_model(kind, &a, 2).unwrap().j_test.unwrap();
        let jb = fit_model(kind, &b, 2).unwrap().j_test.unwrap();
        let jc = fit_model(kind, &c, 2).unwrap().j_test.unwrap();
        assert_abs_diff_eq!(ja.statistic, jb.statistic, epsilon = 1e-8);
        assert_abs_diff_eq!(ja.statistic, jc.statistic, epsilon = 1e-8);
        assert_eq!(ja.df, 1);
    }
}

#[test]
fn two_step_covariance_not_larger_than_one_step() {
    let mut r = rng(10);
    for _ in 0..10 {
        let data = random_data(&mut r, 1000, 4, false);
        for kind in [ModelKind::Additive, ModelKind::MultMmom0] {
            let model = MomentModel::new(kind, &data).unwrap();
            let one = fit_model(kind, &data, 1).unwrap();
            // both covariances evaluated at the one-step solution
            let (_, c) = model.mean_moments_and_jacobian(&data, one.theta.as_slice()).unwrap();
            let omega = model.outer_product(&data, one.theta.as_slice()).unwrap();
            let eff = (c.transpose() * omega.clone().try_inverse().unwrap() * &c).try_inverse().unwrap();
            let w = model.initial_weight(&data);
            let f = crate::numerics::Factorized::new(&w).unwrap();
            let sand = super::gmm::sandwich(&c, &f, &omega, 1).unwrap();
            let diff = sand - eff;
            // Loewner order: the difference is positive semi-definite
            let eig = diff.symmetric_eigenvalues();
            assert!(eig.iter().all(|&e| e >= -1e-6 * diff.amax().max(1.0)), "{kind}: {eig}");
        }
    }
}

#[test]
fn multiplicative_one_step_is_linear_tsls_in_inverse_ratio() {
    let mut r = rng(11);
    for _ in 0..10 {
        let ds = random_dataset(&mut r, 600, 3, false);
        let data = estimation(&ds);
        let fit = fit_model(ModelKind::MultMmom0, &data, 1).unwrap();
        let n = ds.n();
        let lhs = DVector::from_fn(n, |i, _| ds.y()[i] * (ds.x()[i] - 1.0));
        let reg = DMatrix::from_fn(n, 2, |i, j| if j == 0 { ds.y()[i] * ds.x()[i] } else { 1.0 });
        let b = tsls_general(&data.s, &reg, &lhs).unwrap();
        assert_abs_diff_eq!((-fit.psi0()).exp(), b[0], epsilon = 1e-10);
        assert_abs_diff_eq!(fit.theta[1], -b[1], epsilon = 1e-10);
    }
}

#[test]
fn duplicated_instrument_gives_singular_weight() {
    let mut data = random_data(&mut rng(12), 100, 2, false);
    let extra = data.s.column(1).into_owned();
    data.s = data.s.clone().insert_column(2, 0.0);
    data.s.set_column(2, &extra);
    let err = fit_model(ModelKind::Additive, &data, 2).unwrap_err();
    assert!(matches!(err, SmmError::SingularWeight { index: 2, .. }), "{err:?}");
}

#[test]
fn constant_exposure_mean_is_degenerate() {
    let z = vec![0, 0, 1, 1, 2, 2];
    let x = vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0];
    let y = vec![0.0, 1.0, 1.0, 0.0, 1.0, 1.0];
    let data = estimation(&Dataset::from_levels(y, x, z, vec![0.0, 1.0, 2.0]).unwrap());
    for kind in [ModelKind::Additive, ModelKind::MultMmom0] {
        assert!(matches!(fit_model(kind, &data, 1), Err(SmmError::DegenerateInstrument(_))));
    }
    assert!(matches!(fit_2sls_additive(&data), Err(SmmError::DegenerateInstrument(_))));
}

#[test]
fn confidence_intervals_and_standard_errors_consistent() {
    let data = random_data(&mut rng(13), 500, 3, false);
    let fit = fit_model(ModelKind::MultMmomc, &data, 2).unwrap();
    for j in 0..fit.theta.len() {
        assert_eq!(fit.standard_errors[j], fit.covariance[(j, j)].sqrt());
        let (lo, hi) = fit.conf_intervals_95[j];
        assert_abs_diff_eq!(lo, fit.theta[j] - Z_975 * fit.standard_errors[j], epsilon = 1e-15);
        assert_abs_diff_eq!(hi, fit.theta[j] + Z_975 * fit.standard_errors[j], epsilon = 1e-15);
    }
    assert!(fit.covariance.is_symmetric(1e-10));
    assert!(fit.converged);
}

#[test]
fn logistic_paths() {
    let data = random_data(&mut rng(14), 3000, 3, false);
    let joint = fit_model(ModelKind::LogisticJoint, &data, 2).unwrap();
    let two = fit_2sgmm_logistic(&data, 2).unwrap();
    let naive = fit_logistic_plugin(&data, 2).unwrap();
    assert!(joint.converged && two.converged && naive.converged);
    assert_eq!(two.label, "logistic_2sgmm");
    assert_eq!(naive.se_note, Some(PLUGIN_SE_NOTE));
    assert!(two.se_note.is_none());
    assert_ne!(two.psi0_se(), naive.psi0_se());
    assert_eq!(joint.j_test.unwrap().df, 1);
    assert_eq!(two.j_test.unwrap().df, 1);
    // association sub-moments vanish at the MLE
    let model = MomentModel::new(ModelKind::LogisticJoint, &data).unwrap();
    let mut theta = default_start(&model, &data).unwrap();
    theta[6] = 0.4;
    let g = model.mean_moments(&data, theta.as_slice()).unwrap();
    assert!(g.rows(0, 6).amax() < 1e-10);
}

#[test]
fn saturation_failure_names_the_cell() {
    let z = vec![0, 0, 1, 1, 2];
    let x = vec![0.0, 1.0, 0.0, 1.0, 0.0];
    let y = vec![0.0, 1.0, 1.0, 0.0, 1.0];
    let data = estimation(&Dataset::from_levels(y, x, z, vec![0.0, 1.0, 2.0]).unwrap());
    let err = fit_2sgmm_logistic(&data, 1).unwrap_err();
    assert!(matches!(err, SmmError::SaturationFailure { x: 1, level: 2 }), "{err:?}");
}

#[test]
fn logistic_needs_binary_outcome() {
    let mut data = random_data(&mut rng(15), 100, 2, false);
    data.y[0] = 2.0;
    assert!(matches!(fit_model(ModelKind::LogisticJoint, &data, 1), Err(SmmError::InvalidInput(_))));
}

#[test]
fn combination_projection_is_least_squares() {
    let data = random_data(&mut rng(16), 700, 3, false);
    let model = MomentModel::new(ModelKind::MultMmom0, &data).unwrap();
    let fit = fit_model(ModelKind::MultMmom0, &data, 1).unwrap();
    let comb = efficient_combination(&model, &data, &fit).unwrap();
    let resid = &comb.b - &comb.projection_one_step;
    assert!((data.s.transpose() * resid).amax() < 1e-9);
    // b column is YX e^{-psi} for binary data
    let v = (-fit.psi0()).exp();
    for i in 0..data.n() {
        let expect = if data.y[i] * data.x[i] == 1.0 { v } else { 0.0 };
        assert_abs_diff_eq!(comb.b[(i, 1)], expect, epsilon = 1e-15);
    }
}

#[test]
fn combination_homoskedastic_two_step_is_proportional() {
    // residuals of exactly ±1 in every level give ν² ≡ 1
    let z = vec![0, 0, 0, 0, 1, 1, 1, 1];
    let x = vec![0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
    let y: Vec<f64> = x.iter().zip([1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0]).map(|(x, e)| 0.5 + 2.0 * x + e).collect();
    let data = estimation(&Dataset::from_levels(y, x, z, vec![0.0, 1.0]).unwrap());
    let model = MomentModel::new(ModelKind::Additive, &data).unwrap();
    let fit = fit_model(ModelKind::Additive, &data, 1).unwrap();
    assert_abs_diff_eq!(fit.psi0(), 2.0, epsilon = 1e-12);
    let comb = efficient_combination(&model, &data, &fit).unwrap();
    for lv in &comb.level_variance {
        assert_abs_diff_eq!(lv.mean_nu2, 1.0, epsilon = 1e-12);
    }
    let diff = &comb.projection_two_step - &comb.projection_one_step;
    assert!(diff.amax() < 1e-10);
}
