//! Pure replicator dynamics on a finite trait lattice: Bayesian tempering
//! with local log-likelihood fitness, and the average-fitness energy that
//! decreases along the flow for symmetric non-local kernels.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::CsvTable;

pub const MASS_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Fitness {
    /// `f(x)` per trait.
    Local(Vec<f64>),
    /// `f(x, z)`, row `x`, column `z`.
    NonLocal(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitDistribution {
    pub grid: Vec<f64>,
    pub probs: Vec<f64>,
    pub fitness: Fitness,
}

impl TraitDistribution {
    pub fn new(grid: Vec<f64>, probs: Vec<f64>, fitness: Fitness) -> Result<Self> {
        let n = grid.len();
        if n == 0 || probs.len() != n {
            return Err(Error::Dimension(format!("{} traits but {} weights", n, probs.len())));
        }
        match &fitness {
            Fitness::Local(f) if f.len() != n => return Err(Error::Dimension(format!("local fitness has {} values for {n} traits", f.len()))),
            Fitness::NonLocal(k) if k.nrows() != n || k.ncols() != n => {
                return Err(Error::Dimension(format!("kernel is {}x{} for {n} traits", k.nrows(), k.ncols())))
            }
            _ => {}
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Parameter("weights must be finite and nonnegative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::Parameter(format!("weights sum to {total}, expected 1")));
        }
        Ok(Self { grid, probs, fitness })
    }

    /// Normalize `weights` and build the distribution.
    pub fn from_weights(grid: Vec<f64>, weights: Vec<f64>, fitness: Fitness) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::DegenerateDensity(total));
        }
        Self::new(grid, weights.into_iter().map(|w| w / total).collect(), fitness)
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }
    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// `F̄(x)`: `f(x)` or `Σ_z f(x, z) p(z)`.
    pub fn effective_fitness(&self) -> Vec<f64> {
        match &self.fitness {
            Fitness::Local(f) => f.clone(),
            Fitness::NonLocal(k) => (0..self.len()).map(|x| (0..self.len()).map(|z| k[(x, z)] * self.probs[z]).sum()).collect(),
        }
    }

    pub fn mean_fitness(&self) -> f64 {
        self.effective_fitness().iter().zip(&self.probs).map(|(f, p)| f * p).sum()
    }
}

/// Euler step `p ← p + dt p (F̄ − ⟨F̄⟩)` followed by renormalization.
pub fn replicator_step(dist: &TraitDistribution, dt: f64) -> Result<TraitDistribution> {
    let f = dist.effective_fitness();
    let mean: f64 = f.iter().zip(&dist.probs).map(|(f, p)| f * p).sum();
    let mut next: Vec<f64> = dist.probs.iter().zip(&f).map(|(p, fx)| p + dt * p * (fx - mean)).collect();
    if let Some((i, v)) = next.iter().enumerate().find(|(_, v)| **v < 0.0) {
        return Err(Error::StepSize(format!("dt = {dt:e} drives weight {i} negative ({v:e})")));
    }
    let total: f64 = next.iter().sum();
    next.iter_mut().for_each(|p| *p /= total);
    Ok(TraitDistribution { grid: dist.grid.clone(), probs: next, fitness: dist.fitness.clone() })
}

/// `exp(t f) p0`, normalized, computed with the maximum exponent factored out.
pub fn tempered_oracle(prior: &[f64], f: &[f64], t: f64) -> Vec<f64> {
    let lw: Vec<f64> = prior.iter().zip(f).map(|(p, fx)| if *p > 0.0 { p.ln() + t * fx } else { f64::NEG_INFINITY }).collect();
    let mx = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = lw.iter().map(|l| (l - mx).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// `max |p − q| / max q`.
pub fn normalized_deviation(p: &[f64], q: &[f64]) -> f64 {
    let scale = q.iter().cloned().fold(0.0, f64::max);
    p.iter().zip(q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperingRun {
    pub grid: Vec<f64>,
    pub times: Vec<f64>,
    pub probs: Vec<Vec<f64>>,
    pub deviations: Vec<f64>,
    pub max_deviation: f64,
}

impl TemperingRun {
    pub fn final_distribution(&self) -> &[f64] {
        self.probs.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn to_csv(&self) -> CsvTable {
        let mut t = CsvTable::new(&["t", "trait", "prob"]);
        for (time, p) in self.times.iter().zip(&self.probs) {
            for (x, v) in self.grid.iter().zip(p) {
                t.push_floats(&[*time, *x, *v]);
            }
        }
        t
    }
}

/// Replicator flow with local fitness from `prior` to `t_end`, compared
/// against the tempered density at `checkpoints` evenly spaced times.
pub fn tempering_run(prior: &TraitDistribution, t_end: f64, dt: f64, checkpoints: usize) -> Result<TemperingRun> {
    let f = match &prior.fitness {
        Fitness::Local(f) => f.clone(),
        Fitness::NonLocal(_) => return Err(Error::Parameter("tempering needs a local fitness".into())),
    };
    if !(dt > 0.0) || t_end < 0.0 {
        return Err(Error::Parameter(format!("need dt > 0 and t_end >= 0, got dt = {dt}, t_end = {t_end}")));
    }
    let n_steps = (t_end / dt).round() as usize;
    let every = (n_steps / checkpoints.max(1)).max(1);
    let mut run = TemperingRun { grid: prior.grid.clone(), times: vec![0.0], probs: vec![prior.probs.clone()], deviations: vec![0.0], max_deviation: 0.0 };
    let mut dist = prior.clone();
    for i in 0..n_steps {
        dist = replicator_step(&dist, dt)?;
        if (i + 1) % every == 0 || i + 1 == n_steps {
            let t = (i + 1) as f64 * dt;
            if run.times.last() == Some(&t) {
                continue;
            }
            let dev = normalized_deviation(&dist.probs, &tempered_oracle(&prior.probs, &f, t));
            run.times.push(t);
            run.probs.push(dist.probs.clone());
            run.deviations.push(dev);
            run.max_deviation = run.max_deviation.max(dev);
        }
    }
    Ok(run)
}

/// `F = −½ Σ_x Σ_z f(x, z) p(z) p(x)` for a symmetric kernel.
pub fn fisher_rao_energy(dist: &TraitDistribution) -> Result<f64> {
    let k = match &dist.fitness {
        Fitness::NonLocal(k) => k,
        Fitness::Local(_) => return Err(Error::Parameter("energy needs a non-local kernel".into())),
    };
    let asym = crate::linalg::max_asymmetry(k);
    let scale = k.amax().max(1.0);
    if asym > 1e-12 * scale {
        return Err(Error::Symmetry(asym));
    }
    let n = dist.len();
    let mut e = 0.0;
    for x in 0..n {
        let row: f64 = (0..n).map(|z| k[(x, z)] * dist.probs[z]).sum();
        e += row * dist.probs[x];
    }
    Ok(-0.5 * e)
}

/// `n` evenly spaced lattice points on `[lo, hi]`.
pub fn lattice(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let h = (hi - lo) / (n.max(2) - 1) as f64;
    (0..n).map(|i| lo + i as f64 * h).collect()
}

/// Gaussian prior and quadratic log-likelihood `−½(hx − y)²/Ξ` on a lattice.
pub fn gaussian_tempering_problem(n: usize, half_width: f64, m0: f64, p0: f64, h: f64, y: f64, xi: f64) -> Result<TraitDistribution> {
    let grid = lattice(m0 - half_width, m0 + half_width, n);
    let w = grid.iter().map(|x| (-(x - m0).powi(2) / (2.0 * p0)).exp()).collect();
    let f = grid.iter().map(|x| -0.5 * (h * x - y).powi(2) / xi).collect();
    TraitDistribution::from_weights(grid, w, Fitness::Local(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_fitness_is_stationary() {
        let d = TraitDistribution::new(vec![0.0, 1.0, 2.0], vec![0.2, 0.3, 0.5], Fitness::Local(vec![4.0; 3])).unwrap();
        let next = replicator_step(&d, 0.1).unwrap();
        for (a, b) in next.probs.iter().zip(&d.probs) {
            assert!((a - b).abs() < 1e-16);
        }
    }

    #[test]
    fn two_state_logistic() {
        let mut d = TraitDistribution::new(vec![1.0, 0.0], vec![0.5, 0.5], Fitness::Local(vec![1.0, 0.0])).unwrap();
        let dt = 1e-4;
        for _ in 0..10_000 {
            d = replicator_step(&d, dt).unwrap();
        }
        let e = 1f64.exp();
        assert!((d.probs[0] - e / (e + 1.0)).abs() < 1e-5);
    }

    #[test]
    fn first_order_in_dt() {
        let prior = gaussian_tempering_problem(201, 4.0, 0.0, 1.0, 1.0, 0.5, 1.0).unwrap();
        let a = tempering_run(&prior, 1.0, 2e-3, 1).unwrap().max_deviation;
        let b = tempering_run(&prior, 1.0, 1e-3, 1).unwrap().max_deviation;
        assert!((a / b - 2.0).abs() < 0.05, "{}", a / b);
    }

    #[test]
    fn zero_time_returns_prior() {
        let prior = gaussian_tempering_problem(51, 3.0, 0.0, 1.0, 1.0, 0.5, 1.0).unwrap();
        let run = tempering_run(&prior, 0.0, 1e-3, 4).unwrap();
        assert_eq!(run.final_distribution(), prior.probs.as_slice());
        assert_eq!(run.max_deviation, 0.0);
    }

    #[test]
    fn step_size_error() {
        let d = TraitDistribution::new(vec![0.0, 1.0], vec![0.5, 0.5], Fitness::Local(vec![0.0, 100.0])).unwrap();
        assert!(matches!(replicator_step(&d, 0.1), Err(Error::StepSize(_))));
    }

    #[test]
    fn energy_examples() {
        let n = 4;
        let p = vec![0.1, 0.2, 0.3, 0.4];
        let d = TraitDistribution::new(lattice(0.0, 1.0, n), p.clone(), Fitness::NonLocal(DMatrix::from_element(n, n, 3.0))).unwrap();
        assert!((fisher_rao_energy(&d).unwrap() + 1.5).abs() < 1e-15);
        let g = [1.0, -2.0, 0.5, 3.0];
        let k = DMatrix::from_fn(n, n, |i, j| g[i] * g[j]);
        let d = TraitDistribution::new(lattice(0.0, 1.0, n), p.clone(), Fitness::NonLocal(k)).unwrap();
        let mean: f64 = g.iter().zip(&p).map(|(a, b)| a * b).sum();
        assert!((fisher_rao_energy(&d).unwrap() + 0.5 * mean * mean).abs() < 1e-15);
        let mut k = DMatrix::from_element(n, n, 1.0);
        k[(0, 1)] = 2.0;
        let d = TraitDistribution::new(lattice(0.0, 1.0, n), p, Fitness::NonLocal(k)).unwrap();
        assert!(matches!(fisher_rao_energy(&d), Err(Error::Symmetry(_))));
    }

    #[test]
    fn mass_validation() {
        assert!(TraitDistribution::new(vec![0.0, 1.0], vec![0.5, 0.6], Fitness::Local(vec![0.0; 2])).is_err());
        assert!(TraitDistribution::new(vec![0.0, 1.0], vec![0.5], Fitness::Local(vec![0.0; 2])).is_err());
    }
}
