//! Monte Carlo harness for the misspecified filter: empirical mean-square
//! tracking error, (r, s) heatmaps and covariance calibration tables.
//!
//! The signal carries the bias `b`; the filter runs the bias-free mean
//! equation with the piecewise-constant observation rate and its covariance
//! held at `C∞(r)`. All (r, s) cells of a study share the same signal and
//! observation draws per realization index.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asymptotics::{self, asymptotic_bias_mse};
use crate::error::{Error, Result};
use crate::io::CsvTable;
use crate::linalg;
use crate::model::{admissible_s_range, LinearGaussianModel, RsPair};
use crate::moments;
use crate::rng::{self, tags};

/// Realizations per work unit; fixed so results do not depend on the pool size.
const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    /// One signal path shared by every realization.
    Frozen,
    /// An independent signal path per realization.
    PerRealization,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Horizon {
    Fixed { t: f64 },
    /// `T = ln(1e3)/|α(A∞)|`, capped at `t_max`.
    Adaptive { t_max: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseConfig {
    pub n_s: usize,
    pub dt: f64,
    pub delta_d: f64,
    pub horizon: Horizon,
    pub reference: ReferenceMode,
    /// Points on each recorded curve (the last is the horizon).
    pub checkpoints: usize,
    pub seed: u64,
}

impl Default for MseConfig {
    fn default() -> Self {
        Self {
            n_s: 5000,
            dt: 1e-4,
            delta_d: 1e-3,
            horizon: Horizon::Adaptive { t_max: 4.0 },
            reference: ReferenceMode::Frozen,
            checkpoints: 20,
            seed: 0,
        }
    }
}

impl MseConfig {
    fn steps_per_knot(&self) -> Result<usize> {
        let k = self.delta_d / self.dt;
        let kr = k.round();
        if !(kr >= 1.0) || (k - kr).abs() > 1e-9 * kr {
            return Err(Error::Alignment(format!("delta_d = {} is not a multiple of dt = {}", self.delta_d, self.dt)));
        }
        Ok(kr as usize)
    }

    fn horizon_for(&self, alpha: f64) -> f64 {
        match self.horizon {
            Horizon::Fixed { t } => t,
            Horizon::Adaptive { t_max } => {
                if alpha < 0.0 {
                    (1e3f64.ln() / alpha.abs()).min(t_max)
                } else {
                    t_max
                }
            }
        }
    }
}

/// One (r, s) cell prepared for simulation.
#[derive(Debug, Clone)]
struct CellPlan {
    /// Mean update over one knot interval: `m ← Φ m + Ψ ξ`.
    phi: Vec<f64>,
    psi: Vec<f64>,
    /// Knot indices (1-based counts) at which the error is recorded.
    record_at: Vec<usize>,
}

fn plan_cell(model: &LinearGaussianModel, rs: &RsPair, c_inf: &DMatrix<f64>, cfg: &MseConfig, k: usize, horizon_knots: usize) -> CellPlan {
    let m = model.dims().0;
    let gain = c_inf * model.h().transpose() * model.xi_inv() * rs.gain_weight();
    let step = DMatrix::identity(m, m) + (model.g() - &gain * model.h()) * cfg.dt;
    let mut phi = DMatrix::identity(m, m);
    let mut acc = DMatrix::zeros(m, m);
    for _ in 0..k {
        acc += &phi;
        phi = &step * &phi;
    }
    let psi = acc * gain * cfg.dt;
    let n_rec = cfg.checkpoints.max(1).min(horizon_knots);
    let record_at: Vec<usize> = (1..=n_rec).map(|i| (i * horizon_knots).div_ceil(n_rec)).collect();
    // Row-major copies for the inner loop.
    let to_rows = |a: &DMatrix<f64>| (0..a.nrows()).flat_map(|i| (0..a.ncols()).map(move |j| (i, j))).map(|(i, j)| a[(i, j)]).collect();
    CellPlan { phi: to_rows(&phi), psi: to_rows(&psi), record_at }
}

#[derive(Debug, Clone, Default)]
struct CellSums {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

/// Run `cells` over `n_s` realizations with shared draws.
fn simulate_cells(model: &LinearGaussianModel, cells: &[CellPlan], cfg: &MseConfig) -> Result<Vec<CellSums>> {
    let (m, n) = model.dims();
    let k = cfg.steps_per_knot()?;
    let max_knots = cells.iter().filter_map(|c| c.record_at.last().copied()).max().unwrap_or(0);
    let frozen = match cfg.reference {
        ReferenceMode::Frozen => Some(signal_knots(model, cfg, k, max_knots, 0)),
        ReferenceMode::PerRealization => None,
    };
    let n_chunks = cfg.n_s.div_ceil(CHUNK);
    let partial: Vec<Vec<CellSums>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut sums: Vec<CellSums> =
                cells.iter().map(|p| CellSums { sum: vec![0.0; p.record_at.len()], sum_sq: vec![0.0; p.record_at.len()] }).collect();
            let mut means = vec![0.0; cells.len() * m];
            let mut next = vec![0.0; m];
            let mut xi = vec![0.0; n];
            let mut db = vec![0.0; n];
            let mut hx = vec![0.0; n];
            let mut cursor = vec![0usize; cells.len()];
            for j in (c * CHUNK)..((c + 1) * CHUNK).min(cfg.n_s) {
                let owned;
                let xs: &[f64] = match &frozen {
                    Some(p) => p,
                    None => {
                        owned = signal_knots(model, cfg, k, max_knots, j as u64);
                        &owned
                    }
                };
                let mut obs = rng::stream(cfg.seed, tags::OBSERVATION, j as u64);
                for (ci, _) in cells.iter().enumerate() {
                    means[ci * m..(ci + 1) * m].copy_from_slice(model.m0().as_slice());
                }
                cursor.iter_mut().for_each(|v| *v = 0);
                let sqdt = cfg.dt.sqrt();
                for knot in 0..max_knots {
                    db.iter_mut().for_each(|v| *v = 0.0);
                    for _ in 0..k {
                        for v in db.iter_mut() {
                            *v += sqdt * rng::normal(&mut obs);
                        }
                    }
                    let x = &xs[knot * m..(knot + 1) * m];
                    for a in 0..n {
                        let mut s = 0.0;
                        for b in 0..m {
                            s += model.h()[(a, b)] * x[b];
                        }
                        hx[a] = s;
                    }
                    for a in 0..n {
                        let mut s = 0.0;
                        for b in 0..n {
                            s += model.xi_sqrt()[(a, b)] * db[b];
                        }
                        xi[a] = hx[a] + s / cfg.delta_d;
                    }
                    let x_next = &xs[(knot + 1) * m..(knot + 2) * m];
                    for (ci, plan) in cells.iter().enumerate() {
                        if cursor[ci] >= plan.record_at.len() {
                            continue;
                        }
                        let mu = &mut means[ci * m..(ci + 1) * m];
                        for a in 0..m {
                            let mut s = 0.0;
                            for b in 0..m {
                                s += plan.phi[a * m + b] * mu[b];
                            }
                            for b in 0..n {
                                s += plan.psi[a * n + b] * xi[b];
                            }
                            next[a] = s;
                        }
                        mu.copy_from_slice(&next);
                        if plan.record_at[cursor[ci]] == knot + 1 {
                            let e2: f64 = mu.iter().zip(x_next).map(|(u, v)| (u - v).powi(2)).sum();
                            sums[ci].sum[cursor[ci]] += e2;
                            sums[ci].sum_sq[cursor[ci]] += e2 * e2;
                            cursor[ci] += 1;
                        }
                    }
                }
            }
            sums
        })
        .collect();
    let mut total: Vec<CellSums> = cells.iter().map(|p| CellSums { sum: vec![0.0; p.record_at.len()], sum_sq: vec![0.0; p.record_at.len()] }).collect();
    for chunk in partial {
        for (t, c) in total.iter_mut().zip(chunk) {
            for i in 0..t.sum.len() {
                t.sum[i] += c.sum[i];
                t.sum_sq[i] += c.sum_sq[i];
            }
        }
    }
    Ok(total)
}

/// Signal states at the knots `0..=n_knots` (row per knot), stepped with
/// Euler–Maruyama at `dt` from the `(seed, INITIAL/SIGNAL, index)` streams.
fn signal_knots(model: &LinearGaussianModel, cfg: &MseConfig, k: usize, n_knots: usize, index: u64) -> Vec<f64> {
    let m = model.dims().0;
    let mut init = rng::stream(cfg.seed, tags::INITIAL, index);
    let z = DVector::from_fn(m, |_, _| rng::normal(&mut init));
    let x0 = model.m0() + linalg::sym_sqrt(model.c0()) * z;
    let mut x: Vec<f64> = x0.iter().copied().collect();
    let mut out = Vec::with_capacity((n_knots + 1) * m);
    out.extend_from_slice(&x);
    let mut r = rng::stream(cfg.seed, tags::SIGNAL, index);
    let sq = cfg.dt.sqrt();
    let (g, b, sig) = (model.g(), model.b(), model.sigma_sqrt());
    let mut w = vec![0.0; m];
    let mut next = vec![0.0; m];
    for _ in 0..n_knots {
        for _ in 0..k {
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
                next[i] = x[i] + drift * cfg.dt + noise;
            }
            std::mem::swap(&mut x, &mut next);
        }
        out.extend_from_slice(&x);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseCurve {
    pub r: f64,
    pub s: f64,
    pub times: Vec<f64>,
    pub e: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n_s: usize,
    pub horizon: f64,
    pub e_inf: f64,
    pub c_inf: f64,
}

impl MseCurve {
    pub fn final_e(&self) -> f64 {
        *self.e.last().unwrap_or(&f64::NAN)
    }
    pub fn final_stderr(&self) -> f64 {
        *self.stderr.last().unwrap_or(&f64::NAN)
    }

    pub fn to_csv(&self) -> CsvTable {
        let mut t = CsvTable::new(&["t", "E", "stderr", "E_inf"]);
        for i in 0..self.times.len() {
            t.push_floats(&[self.times[i], self.e[i], self.stderr[i], self.e_inf]);
        }
        t
    }
}

fn finish_curve(rs: &RsPair, sums: &CellSums, plan: &CellPlan, cfg: &MseConfig, horizon: f64, e_inf: f64, c_inf: f64) -> MseCurve {
    let n = cfg.n_s as f64;
    let mut e = Vec::with_capacity(plan.record_at.len());
    let mut stderr = Vec::with_capacity(plan.record_at.len());
    for i in 0..plan.record_at.len() {
        let mean = sums.sum[i] / n;
        let var = ((sums.sum_sq[i] - n * mean * mean) / (n - 1.0)).max(0.0);
        e.push(mean);
        stderr.push((var / n).sqrt());
    }
    MseCurve {
        r: rs.r(),
        s: rs.s(),
        times: plan.record_at.iter().map(|&k| k as f64 * cfg.delta_d).collect(),
        e,
        stderr,
        n_s: cfg.n_s,
        horizon,
        e_inf,
        c_inf,
    }
}

struct PreparedCell {
    rs: RsPair,
    plan: CellPlan,
    horizon: f64,
    e_inf: f64,
    c_inf: f64,
}

fn prepare(model: &LinearGaussianModel, rs: &RsPair, cfg: &MseConfig) -> Result<PreparedCell> {
    let k = cfg.steps_per_knot()?;
    let info = asymptotic_bias_mse(model, rs)?;
    let horizon = cfg.horizon_for(info.alpha);
    let knots = ((horizon / cfg.delta_d).ceil() as usize).max(1);
    let plan = plan_cell(model, rs, &info.c_inf, cfg, k, knots);
    Ok(PreparedCell { rs: *rs, plan, horizon: knots as f64 * cfg.delta_d, e_inf: info.e_inf, c_inf: info.c_inf.trace() })
}

/// Empirical `E_t = (1/N_s) Σ_j ‖m_t^j − x*_t‖²` with standard errors.
pub fn empirical_mse(model: &LinearGaussianModel, rs: &RsPair, cfg: &MseConfig) -> Result<MseCurve> {
    if cfg.n_s < 2 {
        return Err(Error::Parameter("need N_s >= 2".into()));
    }
    let cell = prepare(model, rs, cfg)?;
    let sums = simulate_cells(model, std::slice::from_ref(&cell.plan), cfg)?;
    Ok(finish_curve(&cell.rs, &sums[0], &cell.plan, cfg, cell.horizon, cell.e_inf, cell.c_inf))
}

/// Several (r, s) pairs over the same draws.
pub fn empirical_mse_many(model: &LinearGaussianModel, pairs: &[RsPair], cfg: &MseConfig) -> Result<Vec<MseCurve>> {
    if cfg.n_s < 2 {
        return Err(Error::Parameter("need N_s >= 2".into()));
    }
    let cells: Vec<PreparedCell> = pairs.iter().map(|rs| prepare(model, rs, cfg)).collect::<Result<_>>()?;
    let plans: Vec<CellPlan> = cells.iter().map(|c| c.plan.clone()).collect();
    let sums = simulate_cells(model, &plans, cfg)?;
    Ok(cells.iter().zip(&sums).map(|(c, s)| finish_curve(&c.rs, s, &c.plan, cfg, c.horizon, c.e_inf, c.c_inf)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatCell {
    pub r: f64,
    pub s: f64,
    pub stable: bool,
    pub e_emp: f64,
    pub stderr: f64,
    pub e_inf: f64,
    pub c_inf: f64,
    pub horizon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub r_grid: Vec<f64>,
    pub s_grid: Vec<f64>,
    /// `r`-major: cell `(i, j)` is at `i * s_grid.len() + j`.
    pub cells: Vec<HeatCell>,
    pub n_s: usize,
    pub seed: u64,
    /// `s_opt(r)` per column when defined.
    pub s_opt: Vec<Option<f64>>,
    pub s_l: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnArgmin {
    pub r: f64,
    pub s_argmin: Option<f64>,
    pub s_opt: Option<f64>,
    pub within_one_cell: Option<bool>,
}

impl SweepResult {
    pub fn cell(&self, i: usize, j: usize) -> &HeatCell {
        &self.cells[i * self.s_grid.len() + j]
    }

    pub fn masked_fraction(&self) -> f64 {
        self.cells.iter().filter(|c| !c.stable).count() as f64 / self.cells.len().max(1) as f64
    }

    /// Empirical argmin over stable cells per `r` column, compared with the
    /// grid cell nearest to `s_opt(r)`.
    pub fn column_argmins(&self) -> Vec<ColumnArgmin> {
        let nearest = |s: f64| {
            self.s_grid
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - s).abs().total_cmp(&(b.1 - s).abs()))
                .map(|(j, _)| j)
        };
        (0..self.r_grid.len())
            .map(|i| {
                let best = (0..self.s_grid.len())
                    .filter(|&j| self.cell(i, j).stable && self.cell(i, j).e_emp.is_finite())
                    .min_by(|&a, &b| self.cell(i, a).e_emp.total_cmp(&self.cell(i, b).e_emp));
                let within = match (best, self.s_opt[i].and_then(nearest)) {
                    (Some(b), Some(o)) => Some(b.abs_diff(o) <= 1),
                    _ => None,
                };
                ColumnArgmin { r: self.r_grid[i], s_argmin: best.map(|j| self.s_grid[j]), s_opt: self.s_opt[i], within_one_cell: within }
            })
            .collect()
    }

    /// Fraction of columns (with a defined `s_opt`) whose argmin tracks it.
    pub fn tracking_fraction(&self) -> f64 {
        let cols: Vec<bool> = self.column_argmins().iter().filter_map(|c| c.within_one_cell).collect();
        cols.iter().filter(|&&b| b).count() as f64 / cols.len().max(1) as f64
    }

    pub fn to_csv(&self) -> CsvTable {
        let mut t = CsvTable::new(&["r", "s", "E_emp", "E_inf", "C_inf", "stderr", "stable"]);
        for c in &self.cells {
            t.push_floats(&[c.r, c.s, c.e_emp, c.e_inf, c.c_inf, c.stderr, if c.stable { 1.0 } else { 0.0 }]);
        }
        t
    }
}

/// Empirical MSE at each cell's horizon over an `r × s` grid. Cells with
/// `s` outside the admissible range are masked and not simulated.
pub fn rs_heatmap(model: &LinearGaussianModel, r_grid: &[f64], s_grid: &[f64], cfg: &MseConfig) -> Result<SweepResult> {
    if r_grid.is_empty() || s_grid.is_empty() {
        return Err(Error::Parameter("empty r or s grid".into()));
    }
    let mut prepared = Vec::new();
    let mut cells = Vec::with_capacity(r_grid.len() * s_grid.len());
    let mut cell_cfg = cfg.clone();
    cell_cfg.checkpoints = 1;
    for &r in r_grid {
        let range = admissible_s_range(model, r)?;
        for &s in s_grid {
            let cell = if range.contains(s) {
                RsPair::new(r, s).ok().and_then(|rs| prepare(model, &rs, &cell_cfg).ok())
            } else {
                None
            };
            match &cell {
                Some(p) => cells.push(HeatCell { r, s, stable: true, e_emp: f64::NAN, stderr: f64::NAN, e_inf: p.e_inf, c_inf: p.c_inf, horizon: p.horizon }),
                None => cells.push(HeatCell { r, s, stable: false, e_emp: f64::NAN, stderr: f64::NAN, e_inf: f64::NAN, c_inf: f64::NAN, horizon: 0.0 }),
            }
            prepared.push(cell);
        }
    }
    let plans: Vec<CellPlan> = prepared.iter().flatten().map(|p| p.plan.clone()).collect();
    let sums = simulate_cells(model, &plans, &cell_cfg)?;
    let mut it = sums.iter();
    for (cell, p) in cells.iter_mut().zip(&prepared) {
        if let Some(p) = p {
            let curve = finish_curve(&p.rs, it.next().expect("one sum per plan"), &p.plan, &cell_cfg, p.horizon, p.e_inf, p.c_inf);
            cell.e_emp = curve.final_e();
            cell.stderr = curve.final_stderr();
        }
    }
    let s_opt = r_grid.iter().map(|&r| asymptotics::s_opt_given_r(model, r).ok().filter(|o| o.admissible).map(|o| o.s)).collect();
    let s_l = model
        .scalar_params()
        .ok()
        .and_then(|sp| asymptotics::cubic_a_star(model).ok().map(|c| asymptotics::s_lower(&sp, c.a_star)));
    Ok(SweepResult { r_grid: r_grid.to_vec(), s_grid: s_grid.to_vec(), cells, n_s: cfg.n_s, seed: cfg.seed, s_opt, s_l })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub r: f64,
    pub s: f64,
    pub c_inf: f64,
    pub e_inf: f64,
    pub e_emp: f64,
    pub stderr: f64,
    /// `|C∞ − E∞|`.
    pub gap_analytic: f64,
    /// `|C∞ − E_emp| / stderr`.
    pub gap_z: f64,
}

pub fn covariance_calibration(model: &LinearGaussianModel, candidates: &[RsPair], cfg: &MseConfig) -> Result<Vec<CalibrationRow>> {
    let curves = empirical_mse_many(model, candidates, cfg)?;
    Ok(curves
        .iter()
        .map(|c| {
            let (e, se) = (c.final_e(), c.final_stderr());
            CalibrationRow {
                r: c.r,
                s: c.s,
                c_inf: c.c_inf,
                e_inf: c.e_inf,
                e_emp: e,
                stderr: se,
                gap_analytic: (c.c_inf - c.e_inf).abs(),
                gap_z: (c.c_inf - e).abs() / se,
            }
        })
        .collect())
}

pub fn calibration_csv(rows: &[CalibrationRow]) -> CsvTable {
    let mut t = CsvTable::new(&["r", "s", "C_inf", "E_inf", "E_emp", "stderr", "gap_analytic", "gap_z"]);
    for r in rows {
        t.push_floats(&[r.r, r.s, r.c_inf, r.e_inf, r.e_emp, r.stderr, r.gap_analytic, r.gap_z]);
    }
    t
}

/// Steady-state covariance of the exact filter, `Ĉ∞ = C∞(1)`.
pub fn c_hat(model: &LinearGaussianModel) -> Result<f64> {
    Ok(moments::steady_state_cov(model, 1.0)?.c_inf.trace())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangleConfig {
    pub t_end: f64,
    pub dt: f64,
    pub steps_per_knot: usize,
    pub nx: usize,
    pub n_particles: usize,
    pub checkpoints: usize,
    pub seed: u64,
}

impl Default for TriangleConfig {
    fn default() -> Self {
        Self { t_end: 1.0, dt: 5e-5, steps_per_knot: 200, nx: 1501, n_particles: 4096, checkpoints: 5, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrianglePoint {
    pub t: f64,
    pub pde: (f64, f64),
    pub ode: (f64, f64),
    pub ensemble: (f64, f64),
}

impl TrianglePoint {
    /// Largest pairwise `|Δmean|` and `|ΔC|`.
    pub fn max_gaps(&self) -> (f64, f64) {
        let all = [self.pde, self.ode, self.ensemble];
        let mut dm: f64 = 0.0;
        let mut dc: f64 = 0.0;
        for a in 0..3 {
            for b in a + 1..3 {
                dm = dm.max((all[a].0 - all[b].0).abs());
                dc = dc.max((all[a].1 - all[b].1).abs());
            }
        }
        (dm, dc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriangleReport {
    pub r: f64,
    pub s: f64,
    pub c_inf: f64,
    pub points: Vec<TrianglePoint>,
}

impl TriangleReport {
    pub fn to_csv(&self) -> CsvTable {
        let mut t = CsvTable::new(&["t", "mean_pde", "cov_pde", "mean_ode", "cov_ode", "mean_ens", "cov_ens"]);
        for p in &self.points {
            t.push_floats(&[p.t, p.pde.0, p.pde.1, p.ode.0, p.ode.1, p.ensemble.0, p.ensemble.1]);
        }
        t
    }
}

/// Drive the Crow-Kimura density solver, the moment equations and a
/// deterministic smooth ensemble with one piecewise-constant observation
/// path and compare their means and variances (scalar models).
pub fn moment_triangle(model: &LinearGaussianModel, rs: &RsPair, cfg: &TriangleConfig) -> Result<TriangleReport> {
    use crate::densitypde::{self, DensityGrid, Scheme};
    use crate::ensemble::{Drive, EnsembleState, Variant};
    use crate::pathgen::{self, InitialState};
    use crate::model::TimeGrid;

    let p = model.scalar_params()?;
    let n_knots = ((cfg.t_end / (cfg.dt * cfg.steps_per_knot as f64)).round() as usize).max(1);
    let grid = TimeGrid::from_counts(cfg.dt, cfg.steps_per_knot, n_knots)?;
    let reference = pathgen::reference_trajectory(model, &grid, cfg.seed, &InitialState::Sample)?;
    let obs = pathgen::coupled_observations(model, &reference, &grid, cfg.seed)?;
    let filter = model.without_bias();
    let (lo, hi) = reference.states.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let (x_min, x_max) = densitypde::default_domain(&filter, lo, hi)?;
    // Finest grid the explicit scheme admits at this dt, if coarser than requested.
    let nx = if p.sigma > 0.0 {
        let dx_min = (cfg.dt * p.sigma / densitypde::CFL_SAFETY).sqrt() * (1.0 + 1e-9);
        cfg.nx.min(((x_max - x_min) / dx_min).floor() as usize + 1)
    } else {
        cfg.nx
    };
    let mut density = DensityGrid::gaussian(x_min, x_max, nx, p.m0, p.c0, Scheme::Ck)?;
    let mut ens = EnsembleState::sample(&filter, cfg.n_particles, Variant::DetSmooth, *rs, cfg.seed, 0)?;
    let (mut m, mut c) = (filter.m0().clone(), filter.c0().clone());
    let every = (n_knots / cfg.checkpoints.max(1)).max(1);
    let mut points = Vec::new();
    for k in 0..n_knots {
        let rate = obs.rates.rate(k);
        let rate_v = DVector::from_column_slice(rate);
        for _ in 0..cfg.steps_per_knot {
            density.ck_step_mut(&filter, rs, rate[0], cfg.dt)?;
            ens.step(&filter, Drive::Rate(rate), cfg.dt)?;
            let m_next = moments::step_mean_smooth(&m, &c, &filter, rs, &rate_v, cfg.dt);
            c = moments::step_covariance(&c, &filter, rs, cfg.dt)?;
            m = m_next;
        }
        if (k + 1) % every == 0 && points.len() < cfg.checkpoints {
            points.push(TrianglePoint {
                t: (k + 1) as f64 * grid.delta_d(),
                pde: densitypde::density_moments(&density)?,
                ode: (m[0], c[(0, 0)]),
                ensemble: (ens.mean()[0], ens.cov()[(0, 0)]),
            });
        }
    }
    let c_inf = moments::steady_state_cov(&filter, rs.r())?.c_inf[(0, 0)];
    Ok(TriangleReport { r: rs.r(), s: rs.s(), c_inf, points })
}
