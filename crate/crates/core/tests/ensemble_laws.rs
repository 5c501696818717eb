use nalgebra::{DMatrix, DVector};

use repmut::ensemble::{
    run_ensemble, unbiasedness_test, DriveSeries, EnsembleState, EnsembleTrajectory, Innovation, UnbiasednessConfig, Variant,
};
use repmut::model::system1;
use repmut::moments::{integrate_ito, MomentTrajectory};
use repmut::pathgen::{self, IncrementTable, InitialState, NoiseScale};
use repmut::rng::tags;
use repmut::{LinearGaussianModel, RsPair, ScalarParams};

const DT: f64 = 1e-3;
const STEPS: usize = 500;
const EVERY: usize = 50;

fn model() -> LinearGaussianModel {
    let m = system1().without_bias();
    m.with_initial(DVector::from_element(1, 1.0), DMatrix::from_element(1, 1, 1.0)).unwrap()
}

fn observations(model: &LinearGaussianModel, j: u64) -> IncrementTable {
    let reference = pathgen::reference_trajectory_keyed(model, DT, STEPS, 11, j, &InitialState::Sample).unwrap();
    let noise = pathgen::brownian_increments_keyed(DT, STEPS, 1, 11, tags::OBSERVATION, j, NoiseScale::Standard);
    pathgen::ito_observation_increments(model, &reference, &noise).unwrap()
}

fn run(model: &LinearGaussianModel, variant: Variant, rs: RsPair, n: usize, seed: u64, dz: &IncrementTable) -> EnsembleTrajectory {
    let mut state = EnsembleState::sample(model, n, variant, rs, seed, 0).unwrap();
    run_ensemble(&mut state, model, DriveSeries::Increments(dz), EVERY).unwrap()
}

fn ode(model: &LinearGaussianModel, rs: RsPair, dz: &IncrementTable) -> MomentTrajectory {
    integrate_ito(model, &rs, model.m0(), model.c0(), dz, EVERY).unwrap()
}

/// Worst normalised moment gap over the recorded times.
fn gap(ens: &EnsembleTrajectory, ode: &MomentTrajectory) -> f64 {
    assert_eq!(ens.times.len(), ode.times.len());
    (0..ens.times.len())
        .map(|k| {
            let c = ode.covariances[k][(0, 0)];
            (ens.means[k][0] - ode.means[k][0]).abs() / c.sqrt() + (ens.covariances[k][(0, 0)] - c).abs() / c
        })
        .fold(0.0, f64::max)
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let num: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    num / den
}

#[test]
fn mean_field_error_shrinks_with_ensemble_size() {
    let model = model();
    let rs = RsPair::new(0.5, -1.0).unwrap();
    let sizes = [64usize, 256, 1024, 4096];
    let seeds = 8u64;
    let mut errors = Vec::new();
    for &n in &sizes {
        let mut total = 0.0;
        for j in 0..seeds {
            let dz = observations(&model, j);
            total += gap(&run(&model, Variant::Det, rs, n, 100 + j, &dz), &ode(&model, rs, &dz));
        }
        errors.push(total / seeds as f64);
    }
    let logs: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let logn: Vec<f64> = sizes.iter().map(|n| (*n as f64).ln()).collect();
    for w in 0..sizes.len() - 2 {
        let b = slope(&logn[w..w + 3], &logs[w..w + 3]);
        assert!(b < 0.0, "errors {errors:?}, window {w} slope {b}");
    }
    let b = slope(&logn, &logs);
    assert!((-0.8..-0.3).contains(&b), "errors {errors:?}, slope {b}");
}

#[test]
fn stochastic_and_deterministic_innovations_agree_in_law() {
    let model = model();
    let rs = RsPair::new(0.5, -1.0).unwrap();
    let n = 4096;
    let dz = observations(&model, 3);
    let reference = ode(&model, rs, &dz);
    let stoch = run(&model, Variant::Stoch, rs, n, 7, &dz);
    let det = run(&model, Variant::Det, rs, n, 7, &dz);
    let tol = 8.0 / (n as f64).sqrt();
    assert!(gap(&stoch, &reference) < tol, "stoch gap {}", gap(&stoch, &reference));
    assert!(gap(&det, &reference) < tol, "det gap {}", gap(&det, &reference));
}

fn assert_bitwise(a: &EnsembleTrajectory, b: &EnsembleTrajectory) {
    for k in 0..a.times.len() {
        assert_eq!(a.means[k][0].to_bits(), b.means[k][0].to_bits(), "mean at record {k}");
        assert_eq!(a.covariances[k][(0, 0)].to_bits(), b.covariances[k][(0, 0)].to_bits(), "cov at record {k}");
    }
}

#[test]
fn multiplicative_inflation_is_an_rs_pair() {
    let model = model();
    let dz = observations(&model, 0);
    let eps = 0.25;
    let a = run(&model, Variant::InflateMult { eps, innovation: Innovation::Deterministic }, RsPair::new(1.0, 0.0).unwrap(), 128, 5, &dz);
    let b = run(&model, Variant::Det, RsPair::new(1.0 + eps, 0.0).unwrap(), 128, 5, &dz);
    assert_bitwise(&a, &b);
}

#[test]
fn additive_inflation_is_an_rs_pair() {
    let model = model();
    let dz = observations(&model, 0);
    let eps = 0.125;
    let a = run(&model, Variant::InflateAdd { eps, innovation: Innovation::Stochastic }, RsPair::new(1.0, 0.0).unwrap(), 128, 5, &dz);
    let b = run(&model, Variant::Stoch, RsPair::new(1.0 - 2.0 * eps, -2.0 * eps).unwrap(), 128, 5, &dz);
    assert_bitwise(&a, &b);
}

#[test]
fn symmetric_system_is_unbiased() {
    let model = LinearGaussianModel::scalar(ScalarParams { g: 0.0, h: 1.0, sigma: 1.0, xi: 1.0, b: 0.0, m0: 1.0, c0: 1.0 }).unwrap();
    let cfg = UnbiasednessConfig { n_runs: 100, n_particles: 128, ..Default::default() };
    let report = unbiasedness_test(&model, Variant::Stoch, RsPair::new(1.0, 0.0).unwrap(), &cfg).unwrap();
    assert!(report.passed, "{report:?}");
    for c in &report.checkpoints {
        assert!((c.signal_mean - 1.0).abs() < 1e-12);
    }
}

#[test]
fn injected_bias_is_detected() {
    let model = LinearGaussianModel::scalar(ScalarParams { g: 0.0, h: 1.0, sigma: 1.0, xi: 1.0, b: 1.0, m0: 1.0, c0: 1.0 }).unwrap();
    let cfg = UnbiasednessConfig { n_runs: 100, n_particles: 128, ..Default::default() };
    let report = unbiasedness_test(&model, Variant::Det, RsPair::new(1.0, 0.0).unwrap(), &cfg).unwrap();
    assert!(!report.passed, "{report:?}");
    let z: Vec<f64> = report.checkpoints.iter().map(|c| c.z.abs()).collect();
    assert!(z.last().unwrap() > z.first().unwrap(), "{z:?}");
}
