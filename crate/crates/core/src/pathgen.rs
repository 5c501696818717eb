//! Brownian increments, piecewise-linear interpolants, reference signals and
//! the two observation constructions (piecewise-constant rate and Ito
//! increments) built from a shared Brownian draw.

use nalgebra::DVector;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::CsvTable;
use crate::model::{LinearGaussianModel, TimeGrid};
use crate::rng::{self, tags};

/// Scaling of generated increments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseScale {
    Standard,
    Zero,
    Scaled(f64),
}

impl NoiseScale {
    fn factor(self) -> f64 {
        match self {
            Self::Standard => 1.0,
            Self::Zero => 0.0,
            Self::Scaled(c) => c,
        }
    }
}

/// Increments on a fine grid, stored step-major.
#[derive(Debug, Clone, PartialEq)]
pub struct IncrementTable {
    dt: f64,
    dim: usize,
    data: Vec<f64>,
}

impl IncrementTable {
    pub fn from_data(dt: f64, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::Dimension(format!("{} values do not split into rows of {dim}", data.len())));
        }
        Ok(Self { dt, dim, data })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn step(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Sum of steps `[i0, i1)`.
    pub fn sum_range(&self, i0: usize, i1: usize) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        for i in i0..i1 {
            for (o, v) in out.iter_mut().zip(self.step(i)) {
                *o += v;
            }
        }
        out
    }

    /// Merge every `factor` consecutive steps (same Brownian path, coarser grid).
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.len().is_multiple_of(factor) {
            return Err(Error::Alignment(format!("{} steps do not split into blocks of {factor}", self.len())));
        }
        let mut data = Vec::with_capacity(self.data.len() / factor);
        for k in 0..self.len() / factor {
            data.extend(self.sum_range(k * factor, (k + 1) * factor).iter());
        }
        Ok(Self { dt: self.dt * factor as f64, dim: self.dim, data })
    }

    pub fn to_csv(&self) -> CsvTable {
        let mut header = vec!["t".to_string()];
        header.extend((0..self.dim).map(|j| format!("d{j}")));
        let mut t = CsvTable::new(&header);
        for i in 0..self.len() {
            let mut row = vec![i as f64 * self.dt];
            row.extend_from_slice(self.step(i));
            t.push_floats(&row);
        }
        t
    }
}

/// Standard Brownian increments (variance `dt` per step), stream
/// `(seed, OBSERVATION, 0)`.
pub fn brownian_increments(grid: &TimeGrid, dim: usize, seed: u64) -> IncrementTable {
    brownian_increments_keyed(grid.dt(), grid.n_steps(), dim, seed, tags::OBSERVATION, 0, NoiseScale::Standard)
}

pub fn brownian_increments_keyed(
    dt: f64,
    n_steps: usize,
    dim: usize,
    seed: u64,
    tag: u64,
    index: u64,
    scale: NoiseScale,
) -> IncrementTable {
    let c = scale.factor() * dt.sqrt();
    let mut rng = rng::stream(seed, tag, index);
    let data = (0..n_steps * dim).map(|_| c * rng::normal(&mut rng)).collect();
    IncrementTable { dt, dim, data }
}

/// Piecewise-constant per-interval values on the knot grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseObservation {
    pub delta_d: f64,
    pub dim: usize,
    /// Row-major, one row of `dim` values per knot interval.
    pub rates: Vec<f64>,
    pub seed: Option<u64>,
}

impl PiecewiseObservation {
    pub fn n_intervals(&self) -> usize {
        self.rates.len() / self.dim
    }
    pub fn knots(&self) -> Vec<f64> {
        (0..=self.n_intervals()).map(|k| k as f64 * self.delta_d).collect()
    }
    pub fn rate(&self, k: usize) -> &[f64] {
        &self.rates[k * self.dim..(k + 1) * self.dim]
    }
    /// Value of the interpolated path `∫₀ᵗ rate` (the path itself is
    /// continuous and piecewise linear).
    pub fn interpolant_at(&self, t: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        let n = self.n_intervals();
        for k in 0..n {
            let t0 = k as f64 * self.delta_d;
            if t <= t0 {
                break;
            }
            let w = (t - t0).min(self.delta_d);
            for (o, v) in out.iter_mut().zip(self.rate(k)) {
                *o += w * v;
            }
        }
        out
    }

    pub fn to_csv(&self) -> CsvTable {
        let mut header = vec!["t".to_string()];
        header.extend((0..self.dim).map(|j| format!("rate{j}")));
        let mut t = CsvTable::new(&header);
        for k in 0..self.n_intervals() {
            let mut row = vec![k as f64 * self.delta_d];
            row.extend_from_slice(self.rate(k));
            t.push_floats(&row);
        }
        t
    }
}

/// Derivative of the piecewise-linear interpolant of the path with the given
/// increments: `(B_{t_{i+1}} − B_{t_i})/δ_d` per knot interval.
pub fn piecewise_linear_path(increments: &IncrementTable, grid: &TimeGrid) -> Result<PiecewiseObservation> {
    if (increments.dt() - grid.dt()).abs() > 1e-12 * grid.dt() {
        return Err(Error::Alignment(format!("increment step {} differs from grid step {}", increments.dt(), grid.dt())));
    }
    let k = grid.steps_per_knot();
    if increments.is_empty() || !increments.len().is_multiple_of(k) {
        return Err(Error::Alignment(format!("{} increments are not a whole number of knots of {k} steps", increments.len())));
    }
    let n_int = increments.len() / k;
    let mut rates = Vec::with_capacity(n_int * increments.dim());
    for i in 0..n_int {
        rates.extend(increments.sum_range(i * k, (i + 1) * k).iter().map(|v| v / grid.delta_d()));
    }
    Ok(PiecewiseObservation { delta_d: grid.delta_d(), dim: increments.dim(), rates, seed: None })
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialState {
    /// `X0 ~ N(m0, C0)`.
    Sample,
    Fixed(DVector<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    pub dt: f64,
    pub dim: usize,
    /// Row-major states on the fine grid, `n_steps + 1` rows.
    pub states: Vec<f64>,
    pub bias_used: DVector<f64>,
}

impl ReferenceTrajectory {
    pub fn len(&self) -> usize {
        self.states.len() / self.dim
    }
    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }
    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|i| i as f64 * self.dt).collect()
    }

    pub fn to_csv(&self) -> CsvTable {
        let mut header = vec!["t".to_string()];
        header.extend((0..self.dim).map(|j| format!("x{j}")));
        let mut t = CsvTable::new(&header);
        for i in 0..self.len() {
            let mut row = vec![i as f64 * self.dt];
            row.extend_from_slice(self.state(i));
            t.push_floats(&row);
        }
        t
    }
}

/// Euler–Maruyama path of `dX = GX dt + b dt + Σ^{1/2} dW`.
pub fn reference_trajectory(model: &LinearGaussianModel, grid: &TimeGrid, seed: u64, init: &InitialState) -> Result<ReferenceTrajectory> {
    reference_trajectory_keyed(model, grid.dt(), grid.n_steps(), seed, 0, init)
}

pub fn reference_trajectory_keyed(
    model: &LinearGaussianModel,
    dt: f64,
    n_steps: usize,
    seed: u64,
    index: u64,
    init: &InitialState,
) -> Result<ReferenceTrajectory> {
    let (m, _) = model.dims();
    let x0 = match init {
        InitialState::Fixed(x) => {
            if x.len() != m {
                return Err(Error::Dimension(format!("x0 has length {}, model has {m}", x.len())));
            }
            x.clone()
        }
        InitialState::Sample => {
            let mut r = rng::stream(seed, tags::INITIAL, index);
            let z = DVector::from_fn(m, |_, _| rng::normal(&mut r));
            model.m0() + crate::linalg::sym_sqrt(model.c0()) * z
        }
    };
    let mut r = rng::stream(seed, tags::SIGNAL, index);
    let sq = dt.sqrt();
    let mut states = Vec::with_capacity((n_steps + 1) * m);
    states.extend(x0.iter());
    let (g, b, sig) = (model.g(), model.b(), model.sigma_sqrt());
    let mut x: Vec<f64> = x0.iter().copied().collect();
    let mut w = vec![0.0; m];
    let mut next = vec![0.0; m];
    for _ in 0..n_steps {
        for v in w.iter_mut() {
            *v = sq * rng::normal(&mut r);
        }
        for i in 0..m {
            let mut drift = b[i];
            let mut noise = 0.0;
            for j in 0..m {
                drift += g[(i, j)] * x[j];
                noise += sig[(i, j)] * w[j];
            }
            next[i] = x[i] + drift * dt + noise;
        }
        std::mem::swap(&mut x, &mut next);
        states.extend_from_slice(&x);
    }
    Ok(ReferenceTrajectory { dt, dim: m, states, bias_used: model.b().clone() })
}

/// Piecewise-constant observation rate
/// `ξ_i = H x*_{t_i} + Ξ^{1/2} (B_{t_{i+1}} − B_{t_i})/δ_d`, with the state
/// taken at the left knot.
pub fn synth_observation(
    model: &LinearGaussianModel,
    reference: &ReferenceTrajectory,
    noise: &PiecewiseObservation,
    grid: &TimeGrid,
) -> Result<PiecewiseObservation> {
    let (m, n) = model.dims();
    if noise.dim != n || reference.dim != m {
        return Err(Error::Dimension(format!("noise dim {} / state dim {} vs model ({m}, {n})", noise.dim, reference.dim)));
    }
    let k = grid.steps_per_knot();
    let n_int = noise.n_intervals();
    if (n_int > 0 && reference.len() <= (n_int - 1) * k) || (noise.delta_d - grid.delta_d()).abs() > 1e-12 * grid.delta_d() {
        return Err(Error::Alignment("reference path and noise do not share the grid".into()));
    }
    let mut rates = Vec::with_capacity(n_int * n);
    for i in 0..n_int {
        let x = DVector::from_column_slice(reference.state(i * k));
        let xi = model.h() * x + model.xi_sqrt() * DVector::from_column_slice(noise.rate(i));
        rates.extend(xi.iter());
    }
    Ok(PiecewiseObservation { delta_d: grid.delta_d(), dim: n, rates, seed: noise.seed })
}

/// Fine-grid observation increments `dZ = H x*_{t} dt + Ξ^{1/2} dB`.
pub fn ito_observation_increments(
    model: &LinearGaussianModel,
    reference: &ReferenceTrajectory,
    noise: &IncrementTable,
) -> Result<IncrementTable> {
    let (m, n) = model.dims();
    if noise.dim() != n || reference.dim != m {
        return Err(Error::Dimension("noise or reference dimension mismatch".into()));
    }
    if reference.len() < noise.len() {
        return Err(Error::Alignment(format!("reference has {} states for {} increments", reference.len(), noise.len())));
    }
    let dt = noise.dt();
    let mut data = Vec::with_capacity(noise.len() * n);
    for i in 0..noise.len() {
        let x = DVector::from_column_slice(reference.state(i));
        let dz = model.h() * x * dt + model.xi_sqrt() * DVector::from_column_slice(noise.step(i));
        data.extend(dz.iter());
    }
    Ok(IncrementTable { dt, dim: n, data })
}

/// Both observation constructions from one Brownian draw.
#[derive(Debug, Clone)]
pub struct CoupledObservations {
    pub noise: IncrementTable,
    pub rates: PiecewiseObservation,
    pub dz: IncrementTable,
}

pub fn coupled_observations(
    model: &LinearGaussianModel,
    reference: &ReferenceTrajectory,
    grid: &TimeGrid,
    seed: u64,
) -> Result<CoupledObservations> {
    let noise = brownian_increments(grid, model.dims().1, seed);
    let mut raw = piecewise_linear_path(&noise, grid)?;
    raw.seed = Some(seed);
    let rates = synth_observation(model, reference, &raw, grid)?;
    let dz = ito_observation_increments(model, reference, &noise)?;
    Ok(CoupledObservations { noise, rates, dz })
}

pub fn write_csv(table: &CsvTable, path: &Path) -> Result<()> {
    table.write(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ScalarParams, system1};

    fn static_model(h: f64, xi: f64) -> LinearGaussianModel {
        LinearGaussianModel::scalar(ScalarParams { g: 0.0, h, sigma: 0.0, xi, b: 0.0, m0: 0.0, c0: 0.0 }).unwrap()
    }

    fn fixed(x: f64) -> InitialState {
        InitialState::Fixed(DVector::from_element(1, x))
    }

    #[test]
    fn zero_override_gives_zero_increments() {
        let t = brownian_increments_keyed(1e-3, 100, 2, 1, tags::OBSERVATION, 0, NoiseScale::Zero);
        assert!(t.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn increment_variance() {
        let grid = TimeGrid::new(10.0, 1e-4, 1e-4).unwrap();
        let t = brownian_increments(&grid, 1, 3);
        let n = t.len() as f64;
        let mean = t.as_slice().iter().sum::<f64>() / n;
        let var = t.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - 1e-4).abs() < 3.0 * 2f64.sqrt() * 1e-4 / n.sqrt(), "var {var}");
    }

    #[test]
    fn increments_are_deterministic() {
        let grid = TimeGrid::new(1.0, 1e-3, 1e-2).unwrap();
        assert_eq!(brownian_increments(&grid, 2, 9), brownian_increments(&grid, 2, 9));
        assert_ne!(brownian_increments(&grid, 2, 9), brownian_increments(&grid, 2, 10));
    }

    #[test]
    fn unit_increments_give_constant_derivative() {
        let grid = TimeGrid::new(2.0, 0.25, 0.5).unwrap();
        let t = IncrementTable::from_data(0.25, 1, vec![1.0; 8]).unwrap();
        let p = piecewise_linear_path(&t, &grid).unwrap();
        assert_eq!(p.n_intervals(), 4);
        assert!(p.rates.iter().all(|&v| v == 4.0));
        // Steps of 0.5 length with increment 1 each.
        let grid = TimeGrid::new(2.0, 0.5, 0.5).unwrap();
        let t = IncrementTable::from_data(0.5, 1, vec![1.0; 4]).unwrap();
        assert!(piecewise_linear_path(&t, &grid).unwrap().rates.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn single_interval_derivative() {
        let grid = TimeGrid::new(0.3, 0.3, 0.3).unwrap();
        let t = IncrementTable::from_data(0.3, 1, vec![0.7]).unwrap();
        let p = piecewise_linear_path(&t, &grid).unwrap();
        assert!((p.rates[0] - 0.7 / 0.3).abs() < 1e-15);
    }

    #[test]
    fn misaligned_increments_rejected() {
        let grid = TimeGrid::new(1.0, 0.1, 0.5).unwrap();
        let t = IncrementTable::from_data(0.1, 1, vec![0.0; 7]).unwrap();
        assert!(matches!(piecewise_linear_path(&t, &grid), Err(Error::Alignment(_))));
    }

    #[test]
    fn interpolant_matches_path_at_knots() {
        let grid = TimeGrid::new(1.0, 1e-3, 1e-1).unwrap();
        let t = brownian_increments(&grid, 1, 4);
        let p = piecewise_linear_path(&t, &grid).unwrap();
        for k in 0..=10 {
            let b = t.sum_range(0, k * 100)[0];
            assert!((p.interpolant_at(k as f64 * 0.1)[0] - b).abs() < 1e-12);
        }
    }

    #[test]
    fn interval_derivative_variance() {
        let grid = TimeGrid::new(20.0, 1e-3, 2e-3).unwrap();
        let t = brownian_increments(&grid, 1, 5);
        let p = piecewise_linear_path(&t, &grid).unwrap();
        let n = p.rates.len() as f64;
        let var = p.rates.iter().map(|v| v * v).sum::<f64>() / n;
        let target = 1.0 / 2e-3;
        assert!((var - target).abs() < 4.0 * 2f64.sqrt() * target / n.sqrt(), "{var}");
    }

    #[test]
    fn constant_and_drift_paths() {
        let grid = TimeGrid::new(2.0, 1e-3, 1e-2).unwrap();
        let p = reference_trajectory(&static_model(1.0, 1.0), &grid, 1, &fixed(5.0)).unwrap();
        assert!(p.states.iter().all(|&v| v == 5.0));
        let drift = static_model(1.0, 1.0).with_bias(DVector::from_element(1, 1.0)).unwrap();
        let p = reference_trajectory(&drift, &grid, 1, &fixed(5.0)).unwrap();
        assert!((p.state(p.len() - 1)[0] - 7.0).abs() < 1e-9);
    }

    #[test]
    fn system1_path_mean() {
        // E[X_1] = e^G m0 + G⁻¹(e^G − 1) b with m0 = 0.
        let model = system1();
        let p = model.scalar_params().unwrap();
        let n_paths = 10_000;
        let dt = 1e-3;
        let mut xs = Vec::with_capacity(n_paths);
        for j in 0..n_paths {
            let tr = reference_trajectory_keyed(&model, dt, 1000, 11, j as u64, &InitialState::Sample).unwrap();
            xs.push(tr.state(1000)[0]);
        }
        let n = n_paths as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let exact = (p.g.exp() - 1.0) / p.g * p.b;
        assert!((mean - exact).abs() < 3.0 * sd / n.sqrt() + 0.01, "{mean} vs {exact}");
    }

    #[test]
    fn noiseless_rate_is_hx() {
        let model = static_model(2.0, 1.0);
        let grid = TimeGrid::new(1.0, 1e-3, 1e-1).unwrap();
        let r = reference_trajectory(&model, &grid, 0, &fixed(5.0)).unwrap();
        let zero = brownian_increments_keyed(grid.dt(), grid.n_steps(), 1, 0, tags::OBSERVATION, 0, NoiseScale::Zero);
        let obs = synth_observation(&model, &r, &piecewise_linear_path(&zero, &grid).unwrap(), &grid).unwrap();
        assert!(obs.rates.iter().all(|&v| v == 10.0));
        let dz = ito_observation_increments(&model, &r, &zero).unwrap();
        assert!(dz.as_slice().iter().all(|&v| v == 10.0 * 1e-3));
    }

    #[test]
    fn figure1_rate_formula() {
        let model = static_model(2.0, 1.0);
        let grid = TimeGrid::new(0.5, 1e-4, 5e-2).unwrap();
        let r = reference_trajectory(&model, &grid, 0, &fixed(5.0)).unwrap();
        let obs = coupled_observations(&model, &r, &grid, 21).unwrap();
        for i in 0..grid.n_knots() {
            let db = obs.noise.sum_range(i * 500, (i + 1) * 500)[0];
            assert!((obs.rates.rate(i)[0] - (10.0 + db / 5e-2)).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_state_rate_mean() {
        let model = static_model(2.0, 1.0);
        let grid = TimeGrid::new(10.0, 1e-4, 1e-3).unwrap();
        let r = reference_trajectory(&model, &grid, 0, &fixed(5.0)).unwrap();
        let obs = coupled_observations(&model, &r, &grid, 2).unwrap();
        let n = obs.rates.n_intervals() as f64;
        let mean = obs.rates.rates.iter().sum::<f64>() / n;
        assert!((mean - 10.0).abs() < 3.0 * (1.0f64 / 1e-3).sqrt() / 100.0);
    }

    #[test]
    fn observation_path_variance_without_signal() {
        let model = static_model(0.0, 2.5);
        let grid = TimeGrid::new(1.0, 1e-2, 1e-2).unwrap();
        let r = reference_trajectory(&model, &grid, 0, &fixed(1.0)).unwrap();
        let n_paths = 4000;
        let zs: Vec<f64> = (0..n_paths)
            .map(|j| {
                let noise = brownian_increments_keyed(grid.dt(), grid.n_steps(), 1, 8, tags::OBSERVATION, j, NoiseScale::Standard);
                ito_observation_increments(&model, &r, &noise).unwrap().sum_range(0, grid.n_steps())[0]
            })
            .collect();
        let var = zs.iter().map(|z| z * z).sum::<f64>() / n_paths as f64;
        assert!((var - 2.5).abs() < 4.0 * 2f64.sqrt() * 2.5 / (n_paths as f64).sqrt(), "{var}");
    }

    #[test]
    fn knot_consistency() {
        let model = static_model(2.0, 3.0);
        let grid = TimeGrid::new(1.0, 1e-3, 2e-2).unwrap();
        let r = reference_trajectory(&model, &grid, 0, &fixed(5.0)).unwrap();
        let obs = coupled_observations(&model, &r, &grid, 6).unwrap();
        let k = grid.steps_per_knot();
        for i in 0..grid.n_knots() {
            let db = obs.noise.sum_range(i * k, (i + 1) * k)[0];
            let lhs = grid.delta_d() * obs.rates.rate(i)[0] - 10.0 * grid.delta_d();
            assert!((lhs - 3f64.sqrt() * db).abs() < 1e-13, "{lhs}");
            // Coarse-graining the Ito increments reproduces the rate.
            let dz = obs.dz.sum_range(i * k, (i + 1) * k)[0];
            assert!((dz - grid.delta_d() * obs.rates.rate(i)[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn coarsen_preserves_sums() {
        let grid = TimeGrid::new(1.0, 1e-3, 1e-2).unwrap();
        let t = brownian_increments(&grid, 1, 2);
        let c = t.coarsen(10).unwrap();
        assert_eq!(c.len(), 100);
        assert!((c.sum_range(0, 100)[0] - t.sum_range(0, 1000)[0]).abs() < 1e-12);
        assert!(t.coarsen(7).is_err());
    }
}
