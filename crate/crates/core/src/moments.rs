//! Mean and covariance of the generalized Kalman-Bucy filter:
//!
//! ```text
//! dm = Gm dt + (r−s) K (dZ − Hm dt),      K = C Hᵀ Ξ⁻¹
//! dC/dt = GC + CGᵀ + Σ − r C Hᵀ Ξ⁻¹ H C
//! ```

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::CsvTable;
use crate::linalg;
use crate::model::{LinearGaussianModel, RsPair};
use crate::pathgen::{IncrementTable, PiecewiseObservation};

pub fn covariance_rhs(c: &DMatrix<f64>, model: &LinearGaussianModel, r: f64) -> DMatrix<f64> {
    let gc = model.g() * c;
    &gc + gc.transpose() + model.sigma() - c * model.hxh() * c * r
}

fn check_spd(c: &DMatrix<f64>) -> Result<()> {
    let ok = if c.nrows() == 1 { c[(0, 0)] > 0.0 && c[(0, 0)].is_finite() } else { linalg::is_spd(c) };
    if ok {
        Ok(())
    } else {
        Err(Error::Stability("covariance lost positive definiteness; reduce dt".into()))
    }
}

/// One RK4 step of the covariance flow, symmetrized. The flow does not
/// depend on `s`.
pub fn step_covariance(c: &DMatrix<f64>, model: &LinearGaussianModel, rs: &RsPair, dt: f64) -> Result<DMatrix<f64>> {
    let next = rk4_cov(c, model, rs.r(), dt);
    check_spd(&next)?;
    Ok(next)
}

fn rk4_cov(c: &DMatrix<f64>, model: &LinearGaussianModel, r: f64, dt: f64) -> DMatrix<f64> {
    let k1 = covariance_rhs(c, model, r);
    let k2 = covariance_rhs(&(c + &k1 * (dt / 2.0)), model, r);
    let k3 = covariance_rhs(&(c + &k2 * (dt / 2.0)), model, r);
    let k4 = covariance_rhs(&(c + &k3 * dt), model, r);
    linalg::symmetrize(&(c + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)))
}

pub fn kalman_gain(c: &DMatrix<f64>, model: &LinearGaussianModel) -> DMatrix<f64> {
    c * model.h().transpose() * model.xi_inv()
}

/// Euler–Maruyama step of the mean driven by Ito increments `dz`.
pub fn step_mean_ito(
    m: &DVector<f64>,
    c: &DMatrix<f64>,
    model: &LinearGaussianModel,
    rs: &RsPair,
    dz: &DVector<f64>,
    dt: f64,
) -> DVector<f64> {
    let k = kalman_gain(c, model);
    m + model.g() * m * dt + k * (dz - model.h() * m * dt) * rs.gain_weight()
}

/// Euler step of the mean driven by a piecewise-constant rate `ξ`.
pub fn step_mean_smooth(
    m: &DVector<f64>,
    c: &DMatrix<f64>,
    model: &LinearGaussianModel,
    rs: &RsPair,
    rate: &DVector<f64>,
    dt: f64,
) -> DVector<f64> {
    let k = kalman_gain(c, model);
    m + (model.g() * m + k * (rate - model.h() * m) * rs.gain_weight()) * dt
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteadyStateMethod {
    ClosedForm,
    RiccatiFlow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyState {
    pub c_inf: DMatrix<f64>,
    /// Frobenius norm of the flow's right-hand side at `c_inf`.
    pub residual: f64,
    pub iterations: usize,
    pub method: SteadyStateMethod,
}

/// Scalar steady state `(G + √(G²+rH²Ξ⁻¹Σ)) / (rH²Ξ⁻¹)`.
pub fn scalar_c_inf(g: f64, a: f64, h2_xi: f64, r: f64) -> f64 {
    (g + (g * g + r * a).sqrt()) / (r * h2_xi)
}

/// Steady-state covariance: closed form for scalar models, Riccati flow
/// otherwise.
pub fn steady_state_cov(model: &LinearGaussianModel, r: f64) -> Result<SteadyState> {
    if !(r > 0.0) {
        return Err(Error::Parameter(format!("r must be positive, got {r}")));
    }
    if let Ok(p) = model.scalar_params() {
        if p.h != 0.0 {
            let c = scalar_c_inf(p.g, p.a(), p.h2_xi(), r);
            if c > 0.0 && c.is_finite() {
                let c_inf = linalg::scalar_matrix(c);
                let residual = covariance_rhs(&c_inf, model, r).norm();
                return Ok(SteadyState { c_inf, residual, iterations: 0, method: SteadyStateMethod::ClosedForm });
            }
        }
    }
    riccati_flow_steady_state(model, r, 1e-10, 2_000_000)
}

/// Integrate the covariance flow with RK4 until `‖dC/dt‖_F < tol`.
pub fn riccati_flow_steady_state(model: &LinearGaussianModel, r: f64, tol: f64, max_iter: usize) -> Result<SteadyState> {
    let m = model.dims().0;
    let mut c = if linalg::is_spd(model.c0()) { model.c0().clone() } else { DMatrix::identity(m, m) };
    let g_norm = model.g().norm();
    let hxh_norm = model.hxh().norm() * r;
    let mut residual = f64::INFINITY;
    for it in 0..max_iter {
        let rhs = covariance_rhs(&c, model, r);
        residual = rhs.norm();
        if residual < tol {
            return Ok(SteadyState { c_inf: c, residual, iterations: it, method: SteadyStateMethod::RiccatiFlow });
        }
        if !residual.is_finite() {
            break;
        }
        let dt = 0.25 / (2.0 * g_norm + 2.0 * hxh_norm * c.norm() + 1e-12);
        c = rk4_cov(&c, model, r, dt);
    }
    Err(Error::Convergence { iterations: max_iter, residual })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityInfo {
    pub a: DMatrix<f64>,
    /// Spectral abscissa of `A`.
    pub alpha: f64,
    /// Spectral abscissa of `A + Aᵀ`.
    pub alpha_sym: f64,
}

impl StabilityInfo {
    pub fn is_stable(&self) -> bool {
        self.alpha < 0.0 && self.alpha_sym < 0.0
    }
}

/// `A = G − (r−s) C Hᵀ Ξ⁻¹ H` and its spectral abscissas.
pub fn stability_matrix(model: &LinearGaussianModel, rs: &RsPair, c: &DMatrix<f64>) -> StabilityInfo {
    let a = model.g() - c * model.hxh() * rs.gain_weight();
    let alpha = linalg::spectral_abscissa(&a);
    let alpha_sym = linalg::max_sym_eigenvalue(&(&a + a.transpose()));
    StabilityInfo { a, alpha, alpha_sym }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MomentTrajectory {
    pub times: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
    pub gains: Vec<DMatrix<f64>>,
}

impl MomentTrajectory {
    fn record(&mut self, t: f64, m: &DVector<f64>, c: &DMatrix<f64>, model: &LinearGaussianModel) {
        self.times.push(t);
        self.means.push(m.clone());
        self.covariances.push(c.clone());
        self.gains.push(kalman_gain(c, model));
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn to_csv(&self) -> CsvTable {
        let (md, cd, kd) = match (self.means.first(), self.gains.first()) {
            (Some(m), Some(k)) => (m.len(), m.len() * m.len(), k.len()),
            _ => (0, 0, 0),
        };
        let mut header = vec!["t".to_string()];
        header.extend((0..md).map(|i| format!("m{i}")));
        header.extend((0..cd).map(|i| format!("C{}{}", i % md.max(1), i / md.max(1))));
        header.extend((0..kd).map(|i| format!("K{i}")));
        let mut t = CsvTable::new(&header);
        for i in 0..self.len() {
            let mut row = vec![self.times[i]];
            row.extend(self.means[i].iter());
            row.extend(self.covariances[i].iter());
            row.extend(self.gains[i].iter());
            t.push_floats(&row);
        }
        t
    }
}

/// Integrate mean and covariance with Ito increments; records every
/// `record_every` steps (and the initial state).
pub fn integrate_ito(
    model: &LinearGaussianModel,
    rs: &RsPair,
    m0: &DVector<f64>,
    c0: &DMatrix<f64>,
    dz: &IncrementTable,
    record_every: usize,
) -> Result<MomentTrajectory> {
    let dt = dz.dt();
    let mut traj = MomentTrajectory::default();
    let (mut m, mut c) = (m0.clone(), c0.clone());
    traj.record(0.0, &m, &c, model);
    for i in 0..dz.len() {
        let inc = DVector::from_column_slice(dz.step(i));
        let m_next = step_mean_ito(&m, &c, model, rs, &inc, dt);
        c = step_covariance(&c, model, rs, dt)?;
        m = m_next;
        if (i + 1) % record_every.max(1) == 0 {
            traj.record((i + 1) as f64 * dt, &m, &c, model);
        }
    }
    Ok(traj)
}

/// Integrate with a piecewise-constant rate, `steps_per_knot` Euler steps of
/// size `dt` per knot interval.
pub fn integrate_smooth(
    model: &LinearGaussianModel,
    rs: &RsPair,
    m0: &DVector<f64>,
    c0: &DMatrix<f64>,
    rates: &PiecewiseObservation,
    dt: f64,
    steps_per_knot: usize,
    record_every: usize,
) -> Result<MomentTrajectory> {
    let mut traj = MomentTrajectory::default();
    let (mut m, mut c) = (m0.clone(), c0.clone());
    traj.record(0.0, &m, &c, model);
    let mut step = 0usize;
    for k in 0..rates.n_intervals() {
        let rate = DVector::from_column_slice(rates.rate(k));
        for _ in 0..steps_per_knot {
            let m_next = step_mean_smooth(&m, &c, model, rs, &rate, dt);
            c = step_covariance(&c, model, rs, dt)?;
            m = m_next;
            step += 1;
            if step.is_multiple_of(record_every.max(1)) {
                traj.record(step as f64 * dt, &m, &c, model);
            }
        }
    }
    Ok(traj)
}

/// Covariance flow alone over `n_steps` steps.
pub fn integrate_covariance(model: &LinearGaussianModel, rs: &RsPair, c0: &DMatrix<f64>, dt: f64, n_steps: usize) -> Result<Vec<DMatrix<f64>>> {
    let mut out = Vec::with_capacity(n_steps + 1);
    let mut c = c0.clone();
    out.push(c.clone());
    for _ in 0..n_steps {
        c = step_covariance(&c, model, rs, dt)?;
        out.push(c.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ScalarParams, system1};

    fn scalar(g: f64, h: f64, sigma: f64, xi: f64) -> LinearGaussianModel {
        LinearGaussianModel::scalar(ScalarParams { g, h, sigma, xi, b: 0.0, m0: 0.0, c0: 1.0 }).unwrap()
    }

    fn rs(r: f64, s: f64) -> RsPair {
        RsPair::new(r, s).unwrap()
    }

    #[test]
    fn system1_kalman_steady_state() {
        let ss = steady_state_cov(&system1(), 1.0).unwrap();
        assert!((ss.c_inf[(0, 0)] - 0.31).abs() < 0.005);
        let rhs = covariance_rhs(&linalg::scalar_matrix(0.31), &system1(), 1.0)[(0, 0)];
        assert!(rhs.abs() < 1e-2 * 10.0, "{rhs}");
        assert!(ss.residual < 1e-12);
    }

    #[test]
    fn driftless_steady_state() {
        // G = 0, r = 1: C∞ = √(ΣΞ)/H.
        let c = steady_state_cov(&scalar(0.0, 2.0, 3.0, 5.0), 1.0).unwrap().c_inf[(0, 0)];
        assert!((c - (15f64).sqrt() / 2.0).abs() < 1e-14);
    }

    #[test]
    fn lyapunov_flow_without_noise_or_observation() {
        let model = scalar(0.3, 0.0, 0.0, 1.0);
        let c = DMatrix::from_element(1, 1, 2.0);
        let rhs = covariance_rhs(&c, &model, 1.0);
        assert!((rhs[(0, 0)] - 2.0 * 0.3 * 2.0).abs() < 1e-15);
    }

    #[test]
    fn covariance_independent_of_s() {
        let model = system1();
        let c0 = linalg::scalar_matrix(0.7);
        let a = integrate_covariance(&model, &rs(0.4, -2.0), &c0, 1e-4, 500).unwrap();
        let b = integrate_covariance(&model, &rs(0.4, 0.3), &c0, 1e-4, 500).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fixed_point_is_preserved() {
        let model = system1();
        let c_inf = steady_state_cov(&model, 0.13).unwrap().c_inf;
        let cs = integrate_covariance(&model, &rs(0.13, -1.18), &c_inf, 1e-4, 10_000).unwrap();
        assert!(cs.iter().all(|c| (c - &c_inf).norm() < 1e-8));
    }

    #[test]
    fn zero_innovation_is_pure_drift() {
        let model = system1();
        let m = DVector::from_element(1, 1.5);
        let c = linalg::scalar_matrix(0.3);
        let dz = model.h() * &m * 1e-3;
        let next = step_mean_ito(&m, &c, &model, &rs(1.0, 0.0), &dz, 1e-3);
        assert!((next[0] - 1.5 * (1.0 + 0.5e-3)).abs() < 1e-15);
        let rate = model.h() * &m;
        let next = step_mean_smooth(&m, &c, &model, &rs(0.2, -4.0), &rate, 1e-3);
        assert!((next[0] - 1.5 * (1.0 + 0.5e-3)).abs() < 1e-15);
    }

    #[test]
    fn kalman_mean_matches_classical_update() {
        let model = system1();
        let m = DVector::from_element(1, 0.2);
        let c = linalg::scalar_matrix(0.31);
        let dz = DVector::from_element(1, 0.01);
        let next = step_mean_ito(&m, &c, &model, &RsPair::KALMAN, &dz, 1e-4);
        let k = 0.31 * 8.5 / 6.3;
        let expect = 0.2 + 0.5 * 0.2 * 1e-4 + k * (0.01 - 8.5 * 0.2 * 1e-4);
        assert!((next[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn smooth_mean_relaxation() {
        // G = 0, constant rate: m_t → ξ/H at rate (r−s) K H.
        let model = scalar(0.0, 2.0, 1.0, 1.0);
        let pair = rs(1.0, 0.0);
        let c = steady_state_cov(&model, 1.0).unwrap().c_inf;
        let k = c[(0, 0)] * 2.0;
        let rate_c = k * 2.0;
        let xi = 3.0;
        let obs = PiecewiseObservation { delta_d: 0.01, dim: 1, rates: vec![xi; 100], seed: None };
        let traj = integrate_smooth(&model, &pair, &DVector::zeros(1), &c, &obs, 1e-4, 100, 10_000).unwrap();
        let exact = xi / 2.0 * (1.0 - (-rate_c * 1.0f64).exp());
        assert!((traj.means.last().unwrap()[0] - exact).abs() < 1e-3, "{} vs {exact}", traj.means.last().unwrap()[0]);
    }

    #[test]
    fn relaxation_rate_system1() {
        let model = system1();
        let pair = rs(0.13, -1.18);
        let c = steady_state_cov(&model, 0.13).unwrap().c_inf;
        let info = stability_matrix(&model, &pair, &c);
        let rate = pair.gain_weight() * kalman_gain(&c, &model)[(0, 0)] * 8.5;
        assert!((rate - (0.5 - info.a[(0, 0)])).abs() < 1e-12);
        // (0.13, -1.18) is the rounded optimal pair, hence 1% tolerances.
        assert!((rate - 17.2).abs() < 0.01 * 17.2, "{rate}");
        assert!((info.a[(0, 0)] + 16.70).abs() < 0.01 * 16.70);
        let mp = crate::asymptotics::matched_pair(&model).unwrap();
        let c = steady_state_cov(&model, mp.r).unwrap().c_inf;
        let exact = stability_matrix(&model, &rs(mp.r, mp.s), &c);
        assert!((0.5 - exact.a[(0, 0)] - 17.2).abs() < 0.01, "{}", exact.a[(0, 0)]);
    }

    #[test]
    fn scalar_stability_closed_form() {
        let model = system1();
        let p = model.scalar_params().unwrap();
        for &(r, s) in &[(1.0, 0.0), (0.13, -1.18), (3.0, 0.5)] {
            let c = steady_state_cov(&model, r).unwrap().c_inf;
            let info = stability_matrix(&model, &rs(r, s), &c);
            let expect = s / r * p.g - (r - s) / r * p.y(r);
            assert!((info.a[(0, 0)] - expect).abs() < 1e-12);
            assert!((info.alpha_sym - 2.0 * expect).abs() < 1e-12);
        }
        let c = steady_state_cov(&model, 1.0).unwrap().c_inf;
        assert!((stability_matrix(&model, &RsPair::KALMAN, &c).a[(0, 0)] + p.y(1.0)).abs() < 1e-12);
    }

    #[test]
    fn flow_limit_matches_closed_form() {
        for model in [system1(), crate::model::system2()] {
            for r in [0.1, 1.0, 7.0] {
                let closed = steady_state_cov(&model, r).unwrap().c_inf[(0, 0)];
                let flow = riccati_flow_steady_state(&model, r, 1e-12, 1_000_000).unwrap().c_inf[(0, 0)];
                assert!((closed - flow).abs() < 1e-8 * closed, "{closed} {flow}");
            }
        }
    }

    #[test]
    fn matrix_steady_state() {
        let g = DMatrix::from_row_slice(2, 2, &[0.2, 1.0, -0.5, -0.3]);
        let h = DMatrix::from_row_slice(1, 2, &[1.0, 0.5]);
        let model = LinearGaussianModel::new(
            g,
            h,
            DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]),
            linalg::scalar_matrix(0.4),
            DVector::zeros(2),
            DVector::zeros(2),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let ss = steady_state_cov(&model, 0.7).unwrap();
        assert_eq!(ss.method, SteadyStateMethod::RiccatiFlow);
        assert!(ss.residual < 1e-10);
        assert!(linalg::is_spd(&ss.c_inf));
        let info = stability_matrix(&model, &rs(0.7, 0.0), &ss.c_inf);
        assert!(info.alpha < 0.0);
    }

    #[test]
    fn trajectory_gain_consistency() {
        let model = system1();
        let dz = IncrementTable::from_data(1e-3, 1, vec![0.001; 200]).unwrap();
        let traj = integrate_ito(&model, &rs(0.5, -0.5), model.m0(), &linalg::scalar_matrix(1.0), &dz, 10).unwrap();
        assert_eq!(traj.len(), 21);
        for (c, k) in traj.covariances.iter().zip(&traj.gains) {
            assert!((k - kalman_gain(c, &model)).norm() == 0.0);
        }
        let csv = String::from_utf8(traj.to_csv().to_bytes().unwrap()).unwrap();
        assert!(csv.starts_with("t,m0,C00,K0\n"));
    }

    #[test]
    fn loss_of_definiteness_is_reported() {
        let model = scalar(0.0, 1.0, 0.0, 1.0);
        let c = linalg::scalar_matrix(1.0);
        assert!(matches!(step_covariance(&c, &model, &rs(1.0, 0.0), 1e3), Err(Error::Stability(_))));
    }
}
