//! N-particle ensemble Kalman-Bucy filters with the (r, s)-generalized
//! observation update and the classical inflation forms.
//!
//! Every variant is an instance of one particle update
//!
//! ```text
//! dX = G X dt + Σ^{1/2} dW + a K̂H(X − m̂) dt + c K̂(drive − H X̃ dt) + p K̂ Ξ^{1/2} dB̄
//! ```
//!
//! with `K̂ = Ĉ HᵀΞ⁻¹`, `X̃ = X` (stochastic innovation) or `½(X + m̂)`
//! (deterministic innovation) and `drive = dZ` or `ξ dt`. For the
//! generalized filters `a = −s/2`, `c = r − s` and `p = √(r − s)` (zero for
//! the deterministic innovation).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::CsvTable;
use crate::linalg;
use crate::model::{LinearGaussianModel, RsPair};
use crate::pathgen::{self, IncrementTable, InitialState, NoiseScale, PiecewiseObservation};
use crate::rng::{self, tags, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Innovation {
    Stochastic,
    Deterministic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Variant {
    Stoch,
    Det,
    StochSmooth,
    DetSmooth,
    /// Classical filter with gain `(1 + ε)K̂`.
    InflateMult { eps: f64, innovation: Innovation },
    /// Classical filter with the extra drift `εK̂H(X − m̂)`.
    InflateAdd { eps: f64, innovation: Innovation },
}

impl Variant {
    pub fn innovation(&self) -> Innovation {
        match self {
            Self::Stoch | Self::StochSmooth => Innovation::Stochastic,
            Self::Det | Self::DetSmooth => Innovation::Deterministic,
            Self::InflateMult { innovation, .. } | Self::InflateAdd { innovation, .. } => *innovation,
        }
    }

    /// `Some(true)` if the variant needs a piecewise rate, `Some(false)` for
    /// Ito increments, `None` if either works.
    pub fn wants_rate(&self) -> Option<bool> {
        match self {
            Self::Stoch | Self::Det => Some(false),
            Self::StochSmooth | Self::DetSmooth => Some(true),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Stoch => "stoch",
            Self::Det => "det",
            Self::StochSmooth => "stoch_smooth",
            Self::DetSmooth => "det_smooth",
            Self::InflateMult { .. } => "inflate_mult",
            Self::InflateAdd { .. } => "inflate_add",
        }
    }

    pub fn parse(name: &str, eps: f64) -> Result<Self> {
        Ok(match name {
            "stoch" => Self::Stoch,
            "det" => Self::Det,
            "stoch_smooth" => Self::StochSmooth,
            "det_smooth" => Self::DetSmooth,
            "inflate_mult" => Self::InflateMult { eps, innovation: Innovation::Stochastic },
            "inflate_add" => Self::InflateAdd { eps, innovation: Innovation::Stochastic },
            other => {
                return Err(Error::Config(format!(
                    "unknown ensemble variant '{other}' (expected stoch, det, stoch_smooth, det_smooth, inflate_mult, inflate_add)"
                )))
            }
        })
    }
}

/// Coefficients of the shared particle update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateCoefficients {
    pub spread: f64,
    pub innovation: f64,
    pub perturbation: f64,
    pub kind: Innovation,
}

pub fn update_coefficients(variant: &Variant, rs: &RsPair) -> Result<UpdateCoefficients> {
    let w = rs.r() - rs.s();
    let kind = variant.innovation();
    let (spread, innovation, perturbation) = match variant {
        Variant::Stoch | Variant::StochSmooth => {
            if !(w > 0.0) {
                return Err(Error::Parameter(format!("stochastic variant needs r - s > 0, got {w}")));
            }
            (-0.5 * rs.s(), w, w.sqrt())
        }
        Variant::Det | Variant::DetSmooth => (-0.5 * rs.s(), w, 0.0),
        Variant::InflateMult { eps, innovation } => {
            let c = 1.0 + eps;
            (0.0, c, if *innovation == Innovation::Stochastic { c } else { 0.0 })
        }
        Variant::InflateAdd { eps, innovation } => (*eps, 1.0, if *innovation == Innovation::Stochastic { 1.0 } else { 0.0 }),
    };
    if !(spread.is_finite() && innovation.is_finite() && perturbation.is_finite()) {
        return Err(Error::Parameter("non-finite update coefficients".into()));
    }
    Ok(UpdateCoefficients { spread, innovation, perturbation, kind })
}

#[derive(Debug, Clone, Copy)]
pub enum Drive<'a> {
    /// Observation increment `dZ` over the step.
    Increment(&'a [f64]),
    /// Observation rate `ξ`, held constant over the step.
    Rate(&'a [f64]),
}

#[derive(Debug, Clone)]
pub struct EnsembleState {
    n: usize,
    dim: usize,
    /// Particle-major, `n × dim`.
    particles: Vec<f64>,
    pub time: f64,
    pub variant: Variant,
    pub rs: RsPair,
    rngs: Vec<Rng>,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

fn empirical(particles: &[f64], n: usize, dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let mut mean = DVector::zeros(dim);
    for p in particles.chunks_exact(dim) {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for p in particles.chunks_exact(dim) {
        for i in 0..dim {
            let di = p[i] - mean[i];
            for j in 0..=i {
                cov[(i, j)] += di * (p[j] - mean[j]);
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            cov[(j, i)] = cov[(i, j)];
        }
    }
    cov /= (n - 1) as f64;
    (mean, cov)
}

impl EnsembleState {
    /// Ensemble from explicit particles (`n × dim`, particle-major) with
    /// per-particle streams `(seed, PARTICLE, stream_base + i)`.
    pub fn from_particles(particles: Vec<f64>, dim: usize, variant: Variant, rs: RsPair, seed: u64, stream_base: u64) -> Result<Self> {
        if dim == 0 || !particles.len().is_multiple_of(dim) {
            return Err(Error::Dimension(format!("{} values do not form particles of dimension {dim}", particles.len())));
        }
        let n = particles.len() / dim;
        if n < 2 {
            return Err(Error::Parameter(format!("ensemble needs N >= 2, got {n}")));
        }
        update_coefficients(&variant, &rs)?;
        let rngs = (0..n as u64).map(|i| rng::stream(seed, tags::PARTICLE, stream_base + i)).collect();
        let (mean, cov) = empirical(&particles, n, dim);
        Ok(Self { n, dim, particles, time: 0.0, variant, rs, rngs, mean, cov })
    }

    /// `N` particles drawn from `N(m0, C0)` of `model`, each from its own stream.
    pub fn sample(model: &LinearGaussianModel, n: usize, variant: Variant, rs: RsPair, seed: u64, stream_base: u64) -> Result<Self> {
        if n < 2 {
            return Err(Error::Parameter(format!("ensemble needs N >= 2, got {n}")));
        }
        let dim = model.dims().0;
        let root = linalg::sym_sqrt(model.c0());
        let mut particles = Vec::with_capacity(n * dim);
        let mut z = DVector::zeros(dim);
        let mut rngs: Vec<Rng> = (0..n as u64).map(|i| rng::stream(seed, tags::PARTICLE, stream_base + i)).collect();
        for r in rngs.iter_mut() {
            z.iter_mut().for_each(|v| *v = rng::normal(r));
            particles.extend((model.m0() + &root * &z).iter());
        }
        let mut s = Self::from_particles(particles, dim, variant, rs, seed, stream_base)?;
        s.rngs = rngs;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.n
    }
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn particle(&self, i: usize) -> &[f64] {
        &self.particles[i * self.dim..(i + 1) * self.dim]
    }
    pub fn particles(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.dim, &self.particles)
    }
    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }
    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// One Euler–Maruyama step of the ensemble filter.
    pub fn step(&mut self, model: &LinearGaussianModel, drive: Drive<'_>, dt: f64) -> Result<()> {
        let (m, nobs) = model.dims();
        if m != self.dim {
            return Err(Error::Dimension(format!("ensemble dimension {} vs model {m}", self.dim)));
        }
        let (obs, is_rate) = match drive {
            Drive::Increment(v) => (v, false),
            Drive::Rate(v) => (v, true),
        };
        if obs.len() != nobs {
            return Err(Error::Dimension(format!("drive has length {}, expected {nobs}", obs.len())));
        }
        if let Some(want) = self.variant.wants_rate() {
            if want != is_rate {
                return Err(Error::Parameter(format!(
                    "variant {} expects {}",
                    self.variant.name(),
                    if want { "a piecewise rate" } else { "Ito increments" }
                )));
            }
        }
        let co = update_coefficients(&self.variant, &self.rs)?;
        let drive_inc = DVector::from_iterator(nobs, obs.iter().map(|v| if is_rate { v * dt } else { *v }));

        let gain = &self.cov * model.h().transpose() * model.xi_inv();
        let kh = &gain * model.h();
        let k_drive = &gain * &drive_inc;
        let k_noise = &gain * model.xi_sqrt();
        let g = model.g();
        let sq = model.sigma_sqrt();
        let mean = self.mean.clone();
        let kh_mean = &kh * &mean;
        let sqdt = dt.sqrt();
        let dim = self.dim;

        // Shared read-only pieces; per-particle work only reads them.
        let step_one = |x: &mut [f64], r: &mut Rng| {
            let w: Vec<f64> = (0..dim).map(|_| sqdt * rng::normal(r)).collect();
            let bbar: Vec<f64> = (0..nobs).map(|_| sqdt * rng::normal(r)).collect();
            let mut dx = vec![0.0; dim];
            for i in 0..dim {
                let mut gx = 0.0;
                let mut khx = 0.0;
                let mut sw = 0.0;
                for j in 0..dim {
                    gx += g[(i, j)] * x[j];
                    khx += kh[(i, j)] * x[j];
                    sw += sq[(i, j)] * w[j];
                }
                let mut pb = 0.0;
                for j in 0..nobs {
                    pb += k_noise[(i, j)] * bbar[j];
                }
                let tracked = match co.kind {
                    Innovation::Stochastic => khx,
                    Innovation::Deterministic => 0.5 * (khx + kh_mean[i]),
                };
                dx[i] = gx * dt + sw + co.spread * (khx - kh_mean[i]) * dt + co.innovation * (k_drive[i] - tracked * dt) + co.perturbation * pb;
            }
            for i in 0..dim {
                x[i] += dx[i];
            }
        };
        self.particles
            .par_chunks_mut(dim)
            .zip(self.rngs.par_iter_mut())
            .with_min_len(64)
            .for_each(|(x, r)| step_one(x, r));

        if self.particles.iter().any(|v| !v.is_finite()) {
            return Err(Error::Stability(format!("ensemble diverged at t = {}", self.time + dt)));
        }
        let (mean, cov) = empirical(&self.particles, self.n, self.dim);
        self.mean = mean;
        self.cov = cov;
        self.time += dt;
        Ok(())
    }

    pub fn to_csv(&self) -> CsvTable {
        let mut header = vec!["particle".to_string()];
        header.extend((0..self.dim).map(|i| format!("x{i}")));
        let mut t = CsvTable::new(&header);
        for i in 0..self.n {
            let mut row = vec![i.to_string()];
            row.extend(self.particle(i).iter().map(|v| crate::io::fmt_f64(*v)));
            t.push(row);
        }
        t
    }
}

pub fn enkbf_step(state: &EnsembleState, model: &LinearGaussianModel, drive: Drive<'_>, dt: f64) -> Result<EnsembleState> {
    let mut out = state.clone();
    out.step(model, drive, dt)?;
    Ok(out)
}

pub fn ensemble_moments(state: &EnsembleState) -> (DVector<f64>, DMatrix<f64>) {
    (state.mean.clone(), state.cov.clone())
}

/// Recorded ensemble moments along a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EnsembleTrajectory {
    pub times: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
}

impl EnsembleTrajectory {
    fn record(&mut self, s: &EnsembleState) {
        self.times.push(s.time);
        self.means.push(s.mean.clone());
        self.covariances.push(s.cov.clone());
    }
}

/// Observation input for a whole run.
#[derive(Debug, Clone, Copy)]
pub enum DriveSeries<'a> {
    Increments(&'a IncrementTable),
    /// Piecewise rate with `steps_per_knot` steps of size `dt` per interval.
    Rates { rates: &'a PiecewiseObservation, dt: f64, steps_per_knot: usize },
}

/// Step `state` through the whole series, recording every `record_every` steps.
pub fn run_ensemble(state: &mut EnsembleState, model: &LinearGaussianModel, series: DriveSeries<'_>, record_every: usize) -> Result<EnsembleTrajectory> {
    let mut traj = EnsembleTrajectory::default();
    traj.record(state);
    let every = record_every.max(1);
    match series {
        DriveSeries::Increments(dz) => {
            for i in 0..dz.len() {
                state.step(model, Drive::Increment(dz.step(i)), dz.dt())?;
                if (i + 1) % every == 0 {
                    traj.record(state);
                }
            }
        }
        DriveSeries::Rates { rates, dt, steps_per_knot } => {
            let mut i = 0;
            for k in 0..rates.n_intervals() {
                for _ in 0..steps_per_knot {
                    state.step(model, Drive::Rate(rates.rate(k)), dt)?;
                    i += 1;
                    if i % every == 0 {
                        traj.record(state);
                    }
                }
            }
        }
    }
    Ok(traj)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnbiasednessConfig {
    pub n_particles: usize,
    pub n_runs: usize,
    pub horizon: f64,
    pub dt: f64,
    pub checkpoints: usize,
    pub seed: u64,
}

impl Default for UnbiasednessConfig {
    fn default() -> Self {
        Self { n_particles: 256, n_runs: 200, horizon: 1.0, dt: 1e-3, checkpoints: 5, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnbiasednessCheckpoint {
    pub t: f64,
    pub mean_of_means: f64,
    pub signal_mean: f64,
    pub stderr: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnbiasednessReport {
    pub checkpoints: Vec<UnbiasednessCheckpoint>,
    pub max_abs_z: f64,
    pub passed: bool,
}

/// Compare the run-averaged ensemble mean (first component) with the
/// bias-free signal mean `exp(Gt) m0`. The signal is simulated with the
/// model's bias, the filter ignores it; a nonzero bias therefore shows up as
/// a growing statistic.
pub fn unbiasedness_test(model: &LinearGaussianModel, variant: Variant, rs: RsPair, cfg: &UnbiasednessConfig) -> Result<UnbiasednessReport> {
    if cfg.n_runs < 2 || cfg.checkpoints == 0 {
        return Err(Error::Parameter("need at least two runs and one checkpoint".into()));
    }
    let n_steps = (cfg.horizon / cfg.dt).round() as usize;
    let every = (n_steps / cfg.checkpoints).max(1);
    let filter_model = model.without_bias();
    let nobs = model.dims().1;
    let runs: Vec<Result<Vec<f64>>> = (0..cfg.n_runs as u64)
        .into_par_iter()
        .map(|j| {
            let reference = pathgen::reference_trajectory_keyed(model, cfg.dt, n_steps, cfg.seed, j, &InitialState::Sample)?;
            let noise = pathgen::brownian_increments_keyed(cfg.dt, n_steps, nobs, cfg.seed, tags::OBSERVATION, j, NoiseScale::Standard);
            let dz = pathgen::ito_observation_increments(model, &reference, &noise)?;
            let mut state = EnsembleState::sample(&filter_model, cfg.n_particles, variant, rs, cfg.seed, j << 32)?;
            let mut out = Vec::with_capacity(cfg.checkpoints);
            match variant.wants_rate() {
                Some(true) => {
                    // Smooth variants: per-step rate dZ/dt.
                    for i in 0..n_steps {
                        let rate: Vec<f64> = dz.step(i).iter().map(|v| v / cfg.dt).collect();
                        state.step(&filter_model, Drive::Rate(&rate), cfg.dt)?;
                        if (i + 1) % every == 0 && out.len() < cfg.checkpoints {
                            out.push(state.mean[0]);
                        }
                    }
                }
                _ => {
                    for i in 0..n_steps {
                        state.step(&filter_model, Drive::Increment(dz.step(i)), cfg.dt)?;
                        if (i + 1) % every == 0 && out.len() < cfg.checkpoints {
                            out.push(state.mean[0]);
                        }
                    }
                }
            }
            Ok(out)
        })
        .collect();
    let runs: Vec<Vec<f64>> = runs.into_iter().collect::<Result<_>>()?;
    let k = runs[0].len();
    let mut checkpoints = Vec::with_capacity(k);
    for c in 0..k {
        let t = ((c + 1) * every) as f64 * cfg.dt;
        let signal = ((model.g() * t).exp() * model.m0())[0];
        let xs: Vec<f64> = runs.iter().map(|r| r[c]).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let stderr = (var / n).sqrt();
        let z = if stderr > 0.0 { (mean - signal) / stderr } else { 0.0 };
        checkpoints.push(UnbiasednessCheckpoint { t, mean_of_means: mean, signal_mean: signal, stderr, z });
    }
    let max_abs_z = checkpoints.iter().map(|c| c.z.abs()).fold(0.0, f64::max);
    Ok(UnbiasednessReport { checkpoints, max_abs_z, passed: max_abs_z < 3.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{system1, ScalarParams};

    #[test]
    fn moments_of_simple_ensembles() {
        let rs = RsPair::KALMAN;
        let s = EnsembleState::from_particles(vec![2.5; 8], 1, Variant::Det, rs, 0, 0).unwrap();
        let (m, c) = ensemble_moments(&s);
        assert_eq!(m[0], 2.5);
        assert_eq!(c[(0, 0)], 0.0);
        let s = EnsembleState::from_particles(vec![-1.0, 1.0], 1, Variant::Det, rs, 0, 0).unwrap();
        assert_eq!(ensemble_moments(&s).1[(0, 0)], 2.0);
        assert!(EnsembleState::from_particles(vec![1.0], 1, Variant::Det, rs, 0, 0).is_err());
    }

    #[test]
    fn standard_normal_covariance() {
        let p = ScalarParams { g: 0.0, h: 1.0, sigma: 1.0, xi: 1.0, b: 0.0, m0: 0.0, c0: 1.0 };
        let model = LinearGaussianModel::scalar(p).unwrap();
        let s = EnsembleState::sample(&model, 10_000, Variant::Det, RsPair::KALMAN, 11, 0).unwrap();
        assert!((s.cov()[(0, 0)] - 1.0).abs() < 0.05);
        assert!(s.mean()[0].abs() < 0.05);
    }

    #[test]
    fn classical_coefficients() {
        let c = update_coefficients(&Variant::Stoch, &RsPair::KALMAN).unwrap();
        assert_eq!((c.spread.abs(), c.innovation, c.perturbation), (0.0, 1.0, 1.0));
        let eps = 0.25;
        let a = update_coefficients(&Variant::Det, &RsPair::new(1.0 + eps, 0.0).unwrap()).unwrap();
        let b = update_coefficients(&Variant::InflateMult { eps, innovation: Innovation::Deterministic }, &RsPair::KALMAN).unwrap();
        assert_eq!((a.innovation, a.perturbation), (b.innovation, b.perturbation));
        let eps = 0.125;
        let a = update_coefficients(&Variant::Stoch, &RsPair::new(1.0 - 2.0 * eps, -2.0 * eps).unwrap()).unwrap();
        let b = update_coefficients(&Variant::InflateAdd { eps, innovation: Innovation::Stochastic }, &RsPair::KALMAN).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn drive_kind_checked() {
        let model = system1();
        let mut s = EnsembleState::sample(&model, 4, Variant::Det, RsPair::KALMAN, 0, 0).unwrap();
        assert!(matches!(s.step(&model, Drive::Rate(&[0.0]), 1e-3), Err(Error::Parameter(_))));
        let mut s = EnsembleState::sample(&model, 4, Variant::DetSmooth, RsPair::KALMAN, 0, 0).unwrap();
        assert!(s.step(&model, Drive::Increment(&[0.0]), 1e-3).is_err());
        assert!(s.step(&model, Drive::Rate(&[0.0, 1.0]), 1e-3).is_err());
    }

    #[test]
    fn deterministic_update_without_noise() {
        // Σ = 0 and deterministic innovation: the step is exact arithmetic.
        let p = ScalarParams { g: 0.5, h: 2.0, sigma: 0.0, xi: 1.0, b: 0.0, m0: 0.0, c0: 1.0 };
        let model = LinearGaussianModel::scalar(p).unwrap();
        let rs = RsPair::new(0.5, -1.0).unwrap();
        let mut s = EnsembleState::from_particles(vec![-1.0, 0.0, 1.0], 1, Variant::Det, rs, 0, 0).unwrap();
        let (dt, dz) = (1e-2, 0.03);
        s.step(&model, Drive::Increment(&[dz]), dt).unwrap();
        let k = 1.0 * 2.0; // Ĉ = 1
        for (i, x) in [-1.0f64, 0.0, 1.0].iter().enumerate() {
            let expect = x + 0.5 * x * dt + 0.5 * k * 2.0 * x * dt + 1.5 * k * (dz - 0.5 * 2.0 * x * dt);
            assert!((s.particle(i)[0] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn serial_and_parallel_agree() {
        let model = system1();
        let rs = RsPair::new(0.5, -0.5).unwrap();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let mut s = EnsembleState::sample(&model, 300, Variant::Stoch, rs, 9, 0).unwrap();
                for i in 0..50 {
                    s.step(&model, Drive::Increment(&[0.01 * i as f64]), 1e-3).unwrap();
                }
                s.particles
            })
        };
        assert_eq!(run(1), run(3));
    }
}
