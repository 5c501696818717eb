//! 1-D explicit finite-difference solvers for the unnormalized
//! Crow-Kimura replicator-mutator density and the Zakai equation.
//!
//! All three share the generator `L*μ = −∂x(Gxμ) + ½Σ∂²μ` (upwind
//! advection, central diffusion, zero Dirichlet boundaries) and differ in
//! the multiplicative (selection / likelihood) term:
//!
//! ```text
//! ck:          ∂μ = L*μ + (−(r/2) h²/Ξ + (r−s) h ξ/Ξ) μ          (piecewise-constant rate ξ)
//! zakai ito:   dq = L*q dt + q h/Ξ dZ                             (Euler–Maruyama)
//! zakai strat: dq = L*q dt − ½ h²/Ξ q dt + q h/Ξ ∘ dZ             (Heun)
//! ```
//!
//! with `h = Hx`. Only scalar models are supported.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::CsvTable;
use crate::model::{LinearGaussianModel, RsPair, ScalarParams, TimeGrid};
use crate::pathgen::{self, IncrementTable, InitialState};

pub const CFL_SAFETY: f64 = 0.4;

/// Values are rescaled when their maximum leaves `[RESCALE_LOW, RESCALE_HIGH]`.
const RESCALE_HIGH: f64 = 1e150;
const RESCALE_LOW: f64 = 1e-150;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Ck,
    ZakaiIto,
    ZakaiStrat,
}

/// Drift convention of the Euler–Maruyama Zakai step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItoForm {
    /// `dq = L*q dt + q h/Ξ dZ`, the Zakai equation itself.
    Zakai,
    /// Stratonovich drift `−½h²/Ξ` kept but the noise read in the Ito
    /// sense: the naive interpretation of the smooth-observation limit.
    StratDrift,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClipDiagnostics {
    pub clipped_steps: usize,
    pub clipped_nodes: usize,
    /// Most negative value seen before clipping, relative to the maximum.
    pub min_relative: f64,
    pub rescales: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub x_min: f64,
    pub x_max: f64,
    /// Nodal values; the represented density is `values · exp(log_scale)`.
    pub values: Vec<f64>,
    pub log_scale: f64,
    pub time: f64,
    pub scheme: Scheme,
    pub diagnostics: ClipDiagnostics,
    #[serde(skip)]
    scratch: Vec<f64>,
    #[serde(skip)]
    scratch2: Vec<f64>,
}

impl DensityGrid {
    pub fn new(x_min: f64, x_max: f64, values: Vec<f64>, scheme: Scheme) -> Result<Self> {
        if values.len() < 3 || !(x_max > x_min) {
            return Err(Error::Parameter(format!("grid needs nx >= 3 and x_max > x_min, got nx = {}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Parameter("initial density values must be finite and nonnegative".into()));
        }
        let n = values.len();
        Ok(Self {
            x_min,
            x_max,
            values,
            log_scale: 0.0,
            time: 0.0,
            scheme,
            diagnostics: ClipDiagnostics::default(),
            scratch: vec![0.0; n],
            scratch2: vec![0.0; n],
        })
    }

    /// Sample `f` at the nodes.
    pub fn from_fn(x_min: f64, x_max: f64, nx: usize, scheme: Scheme, f: impl Fn(f64) -> f64) -> Result<Self> {
        let dx = (x_max - x_min) / (nx.max(2) - 1) as f64;
        Self::new(x_min, x_max, (0..nx).map(|i| f(x_min + i as f64 * dx)).collect(), scheme)
    }

    /// Unnormalized Gaussian `exp(−(x−m)²/(2v))`.
    pub fn gaussian(x_min: f64, x_max: f64, nx: usize, mean: f64, var: f64, scheme: Scheme) -> Result<Self> {
        Self::from_fn(x_min, x_max, nx, scheme, |x| (-(x - mean).powi(2) / (2.0 * var)).exp())
    }

    pub fn nx(&self) -> usize {
        self.values.len()
    }
    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.nx() - 1) as f64
    }
    pub fn x(&self, i: usize) -> f64 {
        self.x_min + i as f64 * self.dx()
    }
    pub fn xs(&self) -> Vec<f64> {
        (0..self.nx()).map(|i| self.x(i)).collect()
    }

    /// Trapezoidal mass of the represented (scaled) density.
    pub fn mass(&self) -> f64 {
        trapezoid(&self.values, self.dx()) * self.log_scale.exp()
    }

    fn ensure_scratch(&mut self) {
        let n = self.values.len();
        if self.scratch.len() != n {
            self.scratch = vec![0.0; n];
            self.scratch2 = vec![0.0; n];
        }
    }

    fn finish_step(&mut self, dt: f64) {
        let n = self.values.len();
        self.values[0] = 0.0;
        self.values[n - 1] = 0.0;
        let (mut lo, mut hi) = (0.0f64, 0.0f64);
        for &v in &self.values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if lo < 0.0 {
            let rel = if hi > 0.0 { lo / hi } else { lo };
            self.diagnostics.clipped_steps += 1;
            self.diagnostics.min_relative = self.diagnostics.min_relative.min(rel);
            for v in self.values.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                    self.diagnostics.clipped_nodes += 1;
                }
            }
        }
        if hi > RESCALE_HIGH || (hi < RESCALE_LOW && hi > 0.0) {
            for v in self.values.iter_mut() {
                *v /= hi;
            }
            self.log_scale += hi.ln();
            self.diagnostics.rescales += 1;
        }
        self.time += dt;
    }
}

fn trapezoid(v: &[f64], dx: f64) -> f64 {
    let n = v.len();
    if n < 2 {
        return 0.0;
    }
    let inner: f64 = v[1..n - 1].iter().sum();
    dx * (inner + 0.5 * (v[0] + v[n - 1]))
}

/// `out = L* values` at interior nodes, zero at the boundary.
fn apply_generator(values: &[f64], out: &mut [f64], x_min: f64, dx: f64, g: f64, sigma: f64) {
    let n = values.len();
    out[0] = 0.0;
    out[n - 1] = 0.0;
    if g == 0.0 && sigma == 0.0 {
        out[1..n - 1].iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let inv_dx = 1.0 / dx;
    let diff = 0.5 * sigma * inv_dx * inv_dx;
    // Conservative upwind: face velocity G x_{i+1/2}, donor-cell flux.
    let flux = |i: usize| {
        let v = g * (x_min + (i as f64 + 0.5) * dx);
        if v >= 0.0 { v * values[i] } else { v * values[i + 1] }
    };
    let mut left = flux(0);
    for i in 1..n - 1 {
        let right = flux(i);
        let adv = -(right - left) * inv_dx;
        left = right;
        out[i] = adv + diff * (values[i + 1] - 2.0 * values[i] + values[i - 1]);
    }
}

fn scalar_model(model: &LinearGaussianModel) -> Result<ScalarParams> {
    model.scalar_params()
}

/// Check the explicit-scheme step restrictions for this grid.
pub fn check_cfl(grid: &DensityGrid, p: &ScalarParams, dt: f64) -> Result<()> {
    let dx = grid.dx();
    if p.sigma > 0.0 && dt * p.sigma / (dx * dx) > CFL_SAFETY {
        return Err(Error::Stability(format!(
            "diffusion CFL: dt = {dt:e} exceeds {CFL_SAFETY} dx^2/Sigma = {:e}",
            CFL_SAFETY * dx * dx / p.sigma
        )));
    }
    let vmax = p.g.abs() * grid.x_min.abs().max(grid.x_max.abs());
    if vmax > 0.0 && dt * vmax / dx > CFL_SAFETY {
        return Err(Error::Stability(format!("advection CFL: dt = {dt:e} exceeds {CFL_SAFETY} dx/max|Gx| = {:e}", CFL_SAFETY * dx / vmax)));
    }
    Ok(())
}

/// Selection coefficient at `x` and its bound.
fn check_reaction(grid: &DensityGrid, worst: f64, dt: f64) -> Result<()> {
    if 1.0 + dt * worst < 0.0 {
        return Err(Error::Stability(format!("selection term makes the Euler factor negative on [{}, {}] (dt = {dt:e})", grid.x_min, grid.x_max)));
    }
    Ok(())
}

impl DensityGrid {
    /// In-place explicit Euler step of the unnormalized Crow-Kimura
    /// equation with observation rate `rate`.
    pub fn ck_step_mut(&mut self, model: &LinearGaussianModel, rs: &RsPair, rate: f64, dt: f64) -> Result<()> {
        let p = scalar_model(model)?;
        check_cfl(self, &p, dt)?;
        self.ensure_scratch();
        let (x_min, dx) = (self.x_min, self.dx());
        let c2 = -0.5 * rs.r() * p.h * p.h / p.xi;
        let c1 = rs.gain_weight() * p.h * rate / p.xi;
        // c2 <= 0, so the selection term is concave and its minimum sits at an endpoint.
        let sel_at = |x: f64| x * (c2 * x + c1);
        check_reaction(self, sel_at(x_min).min(sel_at(self.x_max)), dt)?;
        apply_generator(&self.values, &mut self.scratch, x_min, dx, p.g, p.sigma);
        let n = self.values.len();
        for i in 1..n - 1 {
            let x = x_min + i as f64 * dx;
            let sel = x * (c2 * x + c1);
            self.values[i] += dt * (self.scratch[i] + sel * self.values[i]);
        }
        self.finish_step(dt);
        Ok(())
    }

    /// In-place Euler–Maruyama Zakai step with observation increment `dz`.
    pub fn zakai_ito_step_mut(&mut self, model: &LinearGaussianModel, dz: f64, dt: f64, form: ItoForm) -> Result<()> {
        let p = scalar_model(model)?;
        check_cfl(self, &p, dt)?;
        self.ensure_scratch();
        let (x_min, dx) = (self.x_min, self.dx());
        let drift2 = match form {
            ItoForm::Zakai => 0.0,
            ItoForm::StratDrift => -0.5 * p.h * p.h / p.xi,
        };
        let c1 = p.h * dz / p.xi;
        apply_generator(&self.values, &mut self.scratch, x_min, dx, p.g, p.sigma);
        let n = self.values.len();
        for i in 1..n - 1 {
            let x = x_min + i as f64 * dx;
            let q = self.values[i];
            self.values[i] = q + dt * (self.scratch[i] + drift2 * x * x * q) + c1 * x * q;
        }
        self.finish_step(dt);
        Ok(())
    }

    /// In-place Heun step of the Stratonovich Zakai equation: the predictor
    /// uses the current state; the corrector averages the noise coefficient
    /// at the current and predicted states.
    pub fn zakai_strat_step_mut(&mut self, model: &LinearGaussianModel, dz: f64, dt: f64) -> Result<()> {
        let p = scalar_model(model)?;
        check_cfl(self, &p, dt)?;
        self.ensure_scratch();
        let (x_min, dx) = (self.x_min, self.dx());
        let drift2 = -0.5 * p.h * p.h / p.xi;
        let c1 = p.h * dz / p.xi;
        apply_generator(&self.values, &mut self.scratch, x_min, dx, p.g, p.sigma);
        let n = self.values.len();
        // scratch2 holds the predictor.
        for i in 1..n - 1 {
            let x = x_min + i as f64 * dx;
            let q = self.values[i];
            let drift = self.scratch[i] + drift2 * x * x * q;
            self.scratch[i] = drift;
            self.scratch2[i] = q + dt * drift + c1 * x * q;
        }
        for i in 1..n - 1 {
            let x = x_min + i as f64 * dx;
            let q = self.values[i];
            self.values[i] = q + dt * self.scratch[i] + 0.5 * c1 * x * (q + self.scratch2[i]);
        }
        self.finish_step(dt);
        Ok(())
    }
}

pub fn ck_step(grid: &DensityGrid, model: &LinearGaussianModel, rs: &RsPair, rate: f64, dt: f64) -> Result<DensityGrid> {
    let mut out = grid.clone();
    out.ck_step_mut(model, rs, rate, dt)?;
    Ok(out)
}

pub fn zakai_ito_step(grid: &DensityGrid, model: &LinearGaussianModel, dz: f64, dt: f64, form: ItoForm) -> Result<DensityGrid> {
    let mut out = grid.clone();
    out.zakai_ito_step_mut(model, dz, dt, form)?;
    Ok(out)
}

pub fn zakai_strat_step(grid: &DensityGrid, model: &LinearGaussianModel, dz: f64, dt: f64) -> Result<DensityGrid> {
    let mut out = grid.clone();
    out.zakai_strat_step_mut(model, dz, dt)?;
    Ok(out)
}

/// Unit-mass copy and the mass it was divided by.
pub fn normalize(grid: &DensityGrid) -> Result<(DensityGrid, f64)> {
    let raw = trapezoid(&grid.values, grid.dx());
    if !(raw > 0.0) || !raw.is_finite() {
        return Err(Error::DegenerateDensity(raw * grid.log_scale.exp()));
    }
    let mut out = grid.clone();
    out.values.iter_mut().for_each(|v| *v /= raw);
    let mass = raw * grid.log_scale.exp();
    out.log_scale = 0.0;
    Ok((out, mass))
}

/// Trapezoidal mean and variance of the normalized density.
pub fn density_moments(grid: &DensityGrid) -> Result<(f64, f64)> {
    let (g, _) = normalize(grid)?;
    let dx = g.dx();
    let xs = g.xs();
    let m1: Vec<f64> = g.values.iter().zip(&xs).map(|(v, x)| v * x).collect();
    let mean = trapezoid(&m1, dx);
    let m2: Vec<f64> = g.values.iter().zip(&xs).map(|(v, x)| v * (x - mean).powi(2)).collect();
    Ok((mean, trapezoid(&m2, dx)))
}

/// Sup-norm distance between the normalized densities on a shared grid.
pub fn normalized_sup_distance(a: &DensityGrid, b: &DensityGrid) -> Result<f64> {
    if a.nx() != b.nx() || a.x_min != b.x_min || a.x_max != b.x_max {
        return Err(Error::Dimension("densities live on different grids".into()));
    }
    let (na, _) = normalize(a)?;
    let (nb, _) = normalize(b)?;
    Ok(na.values.iter().zip(&nb.values).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max))
}

pub fn snapshot_csv(grid: &DensityGrid) -> Result<CsvTable> {
    let (g, _) = normalize(grid)?;
    let mut t = CsvTable::new(&["x", "density"]);
    for (i, v) in g.values.iter().enumerate() {
        t.push_floats(&[g.x(i), *v]);
    }
    Ok(t)
}

/// Truncated domain `[min(m0, x*) − 10σ, max(m0, x*) + 10σ]` with
/// `σ = √max(C0, Ĉ∞)`.
pub fn default_domain(model: &LinearGaussianModel, x_lo: f64, x_hi: f64) -> Result<(f64, f64)> {
    let p = model.scalar_params()?;
    let c_hat = if p.h != 0.0 { crate::moments::scalar_c_inf(p.g, p.a(), p.h2_xi(), 1.0) } else { 0.0 };
    let sd = p.c0.max(c_hat).sqrt().max(1e-3);
    Ok((x_lo.min(p.m0) - 10.0 * sd, x_hi.max(p.m0) + 10.0 * sd))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Figure1Config {
    pub t_end: f64,
    pub dt: f64,
    /// `δ_d / dt`.
    pub delta_ratio: usize,
    pub nx: usize,
    pub x0_star: f64,
    pub seed: u64,
    pub ito_form: ItoForm,
    /// Explicit domain; defaults to [`default_domain`].
    pub domain: Option<(f64, f64)>,
}

impl Default for Figure1Config {
    fn default() -> Self {
        Self {
            t_end: 1.0,
            dt: 1e-4,
            delta_ratio: 500,
            nx: 1601,
            x0_star: crate::model::FIGURE1_X0,
            seed: 0,
            ito_form: ItoForm::StratDrift,
            domain: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Figure1Result {
    pub ck: DensityGrid,
    pub zakai_ito: DensityGrid,
    pub zakai_strat: DensityGrid,
    pub gap_ck_strat: f64,
    pub gap_ito_strat: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Figure1Summary {
    pub t: f64,
    pub gap_ck_strat: f64,
    pub gap_ito_strat: f64,
    pub ratio: f64,
    pub ck_moments: (f64, f64),
    pub zakai_ito_moments: (f64, f64),
    pub zakai_strat_moments: (f64, f64),
    pub clipping: [ClipDiagnostics; 3],
}

impl Figure1Result {
    pub fn summary(&self) -> Result<Figure1Summary> {
        Ok(Figure1Summary {
            t: self.ck.time,
            gap_ck_strat: self.gap_ck_strat,
            gap_ito_strat: self.gap_ito_strat,
            ratio: self.gap_ck_strat / self.gap_ito_strat,
            ck_moments: density_moments(&self.ck)?,
            zakai_ito_moments: density_moments(&self.zakai_ito)?,
            zakai_strat_moments: density_moments(&self.zakai_strat)?,
            clipping: [self.ck.diagnostics, self.zakai_ito.diagnostics, self.zakai_strat.diagnostics],
        })
    }
}

/// Run the three solvers side by side against a fixed true state, with the
/// Crow-Kimura rate and the Zakai increments built from one Brownian draw.
pub fn run_figure1(model: &LinearGaussianModel, cfg: &Figure1Config) -> Result<Figure1Result> {
    let grid = TimeGrid::from_counts(cfg.dt, cfg.delta_ratio, ((cfg.t_end / (cfg.dt * cfg.delta_ratio as f64)).round() as usize).max(1))?;
    let reference = pathgen::reference_trajectory(model, &grid, cfg.seed, &InitialState::Fixed(nalgebra::DVector::from_element(1, cfg.x0_star)))?;
    let noise = pathgen::brownian_increments(&grid, 1, cfg.seed);
    run_coupled(model, &grid, &reference, &noise, cfg.nx, cfg.domain, cfg.ito_form, true)
}

/// Shared driver: CK on the piecewise-constant rate, Zakai on the fine
/// increments of the same Brownian path (`(r, s) = (1, 0)`).
#[allow(clippy::too_many_arguments)]
pub fn run_coupled(
    model: &LinearGaussianModel,
    grid: &TimeGrid,
    reference: &pathgen::ReferenceTrajectory,
    noise: &IncrementTable,
    nx: usize,
    domain: Option<(f64, f64)>,
    ito_form: ItoForm,
    with_ito: bool,
) -> Result<Figure1Result> {
    let p = model.scalar_params()?;
    let (lo, hi) = reference.states.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let (x_min, x_max) = match domain {
        Some(d) => d,
        None => default_domain(model, lo, hi)?,
    };
    let raw = pathgen::piecewise_linear_path(noise, grid)?;
    let rates = pathgen::synth_observation(model, reference, &raw, grid)?;
    let dz = pathgen::ito_observation_increments(model, reference, noise)?;
    let init = |scheme| DensityGrid::gaussian(x_min, x_max, nx, p.m0, p.c0.max(1e-12), scheme);
    let mut ck = init(Scheme::Ck)?;
    let mut ito = init(Scheme::ZakaiIto)?;
    let mut strat = init(Scheme::ZakaiStrat)?;
    let k = grid.steps_per_knot();
    let dt = grid.dt();
    for i in 0..grid.n_knots() {
        let rate = rates.rate(i)[0];
        for j in i * k..(i + 1) * k {
            ck.ck_step_mut(model, &RsPair::KALMAN, rate, dt)?;
            let inc = dz.step(j)[0];
            if with_ito {
                ito.zakai_ito_step_mut(model, inc, dt, ito_form)?;
            }
            strat.zakai_strat_step_mut(model, inc, dt)?;
        }
    }
    let gap_ck_strat = normalized_sup_distance(&ck, &strat)?;
    let gap_ito_strat = if with_ito { normalized_sup_distance(&ito, &strat)? } else { f64::NAN };
    Ok(Figure1Result { ck, zakai_ito: ito, zakai_strat: strat, gap_ck_strat, gap_ito_strat })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceConfig {
    pub t_end: f64,
    /// Simulation step at the coarsest level.
    pub dt0: f64,
    pub delta_ratio: usize,
    pub halvings: usize,
    pub seeds: Vec<u64>,
    pub nx: usize,
    pub x0_star: f64,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self { t_end: 0.5, dt0: 1e-4, delta_ratio: 500, halvings: 5, seeds: (0..10).collect(), nx: 801, x0_star: crate::model::FIGURE1_X0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceLevel {
    pub delta_d: f64,
    pub dt: f64,
    pub mean_gap: f64,
    pub gaps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceStudy {
    pub levels: Vec<ConvergenceLevel>,
}

impl ConvergenceStudy {
    /// Number of levels at which the seed-averaged gap fails to decrease.
    pub fn non_monotone_steps(&self) -> usize {
        self.levels.windows(2).filter(|w| w[1].mean_gap >= w[0].mean_gap).count()
    }

    pub fn to_csv(&self) -> CsvTable {
        let mut t = CsvTable::new(&["delta_d", "dt", "mean_gap"]);
        for l in &self.levels {
            t.push_floats(&[l.delta_d, l.dt, l.mean_gap]);
        }
        t
    }
}

/// CK-vs-Stratonovich gap as `δ_d` is halved. The simulation step is halved
/// with it (`δ_d = delta_ratio · dt` at every level) and all levels use the
/// same Brownian path, drawn at the finest step.
pub fn delta_convergence(model: &LinearGaussianModel, cfg: &ConvergenceConfig) -> Result<ConvergenceStudy> {
    let fine = 1usize << cfg.halvings;
    let dt_fine = cfg.dt0 / fine as f64;
    let n_knots0 = ((cfg.t_end / (cfg.dt0 * cfg.delta_ratio as f64)).round() as usize).max(1);
    let fine_grid = TimeGrid::from_counts(dt_fine, cfg.delta_ratio, n_knots0 * fine)?;
    let x0 = InitialState::Fixed(nalgebra::DVector::from_element(1, cfg.x0_star));
    let mut levels: Vec<ConvergenceLevel> = (0..=cfg.halvings)
        .map(|k| ConvergenceLevel {
            delta_d: cfg.dt0 * cfg.delta_ratio as f64 / (1u64 << k) as f64,
            dt: cfg.dt0 / (1u64 << k) as f64,
            mean_gap: 0.0,
            gaps: Vec::new(),
        })
        .collect();
    for &seed in &cfg.seeds {
        let noise_fine = pathgen::brownian_increments(&fine_grid, 1, seed);
        for (k, level) in levels.iter_mut().enumerate() {
            let factor = fine >> k;
            let noise = noise_fine.coarsen(factor)?;
            let grid = TimeGrid::from_counts(level.dt, cfg.delta_ratio, n_knots0 << k)?;
            let reference = pathgen::reference_trajectory(model, &grid, seed, &x0)?;
            let res = run_coupled(model, &grid, &reference, &noise, cfg.nx, None, ItoForm::StratDrift, false)?;
            level.gaps.push(res.gap_ck_strat);
        }
    }
    for l in levels.iter_mut() {
        l.mean_gap = l.gaps.iter().sum::<f64>() / l.gaps.len().max(1) as f64;
    }
    Ok(ConvergenceStudy { levels })
}
