use repmut::asymptotics::{analytic_sweep, matched_pair, r_opt_given_s};
use repmut::experiments::{c_hat, calibration_csv, covariance_calibration, empirical_mse, rs_heatmap, Horizon, MseConfig, ReferenceMode};
use repmut::model::{admissible_s_range, system1};
use repmut::RsPair;

fn cfg(n_s: usize, seed: u64) -> MseConfig {
    MseConfig {
        n_s,
        dt: 2e-4,
        delta_d: 1e-3,
        horizon: Horizon::Adaptive { t_max: 4.0 },
        reference: ReferenceMode::PerRealization,
        checkpoints: 4,
        seed,
    }
}

#[test]
fn standard_error_scales_with_sample_count() {
    let model = system1();
    let rs = RsPair::new(1.0, 0.0).unwrap();
    let small = empirical_mse(&model, &rs, &cfg(1000, 3)).unwrap();
    let large = empirical_mse(&model, &rs, &cfg(2000, 3)).unwrap();
    let ratio = small.final_stderr() / large.final_stderr();
    assert!((ratio - 2f64.sqrt()).abs() < 0.15 * 2f64.sqrt(), "ratio {ratio}");
}

#[test]
fn zero_s_slice_is_minimised_near_optimal_r() {
    let model = system1();
    let r_grid: Vec<f64> = (0..300).map(|k| 10f64.powf(-2.0 + 5.0 * k as f64 / 299.0)).collect();
    let rows = analytic_sweep(&model, &r_grid, &[0.0]).unwrap();
    let k = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.stable)
        .min_by(|a, b| a.1.e_inf.total_cmp(&b.1.e_inf))
        .map(|(k, _)| k)
        .unwrap();
    let r_opt = r_opt_given_s(&model, 0.0).unwrap().r;
    let near = r_opt.iter().any(|r| (r.ln() - r_grid[k].ln()).abs() <= 5.0 / 299.0 * 10f64.ln() * 1.01);
    assert!(near, "argmin r {} vs r_opt {r_opt:?}", r_grid[k]);
}

#[test]
fn admissible_grid_has_no_masked_cells() {
    let model = system1();
    let r_grid = [0.5, 1.0, 2.0];
    let upper = r_grid.iter().map(|r| admissible_s_range(&model, *r).unwrap().upper).fold(f64::INFINITY, f64::min);
    let s_grid = [upper - 3.0, upper - 2.0, upper - 1.0];
    let sweep = rs_heatmap(&model, &r_grid, &s_grid, &cfg(200, 1)).unwrap();
    assert_eq!(sweep.masked_fraction(), 0.0);
    for c in &sweep.cells {
        assert!(c.stable && c.e_emp.is_finite() && c.e_inf.is_finite());
        assert!(c.horizon < 4.0, "{c:?}");
        assert!((c.e_emp - c.e_inf).abs() < 5.0 * c.stderr + 0.05 * c.e_inf, "{c:?}");
    }
}

#[test]
fn matched_pair_is_calibrated() {
    let model = system1();
    let pair = matched_pair(&model).unwrap();
    let candidates = [RsPair::new(pair.r, pair.s).unwrap(), RsPair::new(1.0, 0.0).unwrap()];
    let rows = covariance_calibration(&model, &candidates, &cfg(2000, 5)).unwrap();
    assert!(rows[0].gap_analytic < 1e-6, "{:?}", rows[0]);
    assert!(rows[0].gap_z < 3.0, "{:?}", rows[0]);
    // The exact filter underestimates its own error when the model is biased.
    assert!(rows[1].e_inf > 10.0 * rows[1].c_inf);
    assert!(rows[1].gap_z > 3.0);
}

#[test]
fn unbiased_exact_filter_matches_its_covariance() {
    let model = system1().without_bias();
    let rows = covariance_calibration(&model, &[RsPair::new(1.0, 0.0).unwrap()], &cfg(2000, 2)).unwrap();
    let c = c_hat(&model).unwrap();
    assert!((rows[0].c_inf - c).abs() < 1e-12 * c);
    assert!((rows[0].e_inf - c).abs() < 1e-9 * c);
    assert!(rows[0].gap_z < 3.0, "{:?}", rows[0]);
}

#[test]
fn outputs_are_reproducible() {
    let model = system1();
    let pairs = [RsPair::new(0.5, -1.0).unwrap()];
    let a = calibration_csv(&covariance_calibration(&model, &pairs, &cfg(300, 9)).unwrap()).to_bytes().unwrap();
    let b = calibration_csv(&covariance_calibration(&model, &pairs, &cfg(300, 9)).unwrap()).to_bytes().unwrap();
    assert_eq!(a, b);
    let c = calibration_csv(&covariance_calibration(&model, &pairs, &cfg(300, 10)).unwrap()).to_bytes().unwrap();
    assert_ne!(a, c);
}
