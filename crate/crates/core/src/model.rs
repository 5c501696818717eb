//! Signal-observation model, replication parameters and time grids.
//!
//! Signal `dX = GX dt + b dt + Σ^{1/2} dW`, observation
//! `dZ = HX dt + Ξ^{1/2} dB`. The filters assume `b = 0`; a nonzero `b`
//! is the misspecification studied in [`crate::asymptotics`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianModel {
    g: DMatrix<f64>,
    h: DMatrix<f64>,
    sigma: DMatrix<f64>,
    xi: DMatrix<f64>,
    b: DVector<f64>,
    m0: DVector<f64>,
    c0: DMatrix<f64>,
    sigma_sqrt: DMatrix<f64>,
    xi_sqrt: DMatrix<f64>,
    xi_inv: DMatrix<f64>,
}

/// Scalar (m = n = 1) view of a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarParams {
    pub g: f64,
    pub h: f64,
    pub sigma: f64,
    pub xi: f64,
    pub b: f64,
    pub m0: f64,
    pub c0: f64,
}

impl ScalarParams {
    /// `H² Ξ⁻¹ Σ`.
    pub fn a(&self) -> f64 {
        self.h * self.h * self.sigma / self.xi
    }

    /// `H² Ξ⁻¹`.
    pub fn h2_xi(&self) -> f64 {
        self.h * self.h / self.xi
    }

    /// `√(G² + r H² Ξ⁻¹ Σ)`.
    pub fn y(&self, r: f64) -> f64 {
        (self.g * self.g + r * self.a()).sqrt()
    }
}

impl LinearGaussianModel {
    pub fn new(
        g: DMatrix<f64>,
        h: DMatrix<f64>,
        sigma: DMatrix<f64>,
        xi: DMatrix<f64>,
        b: DVector<f64>,
        m0: DVector<f64>,
        c0: DMatrix<f64>,
    ) -> Result<Self> {
        let m = g.nrows();
        if m == 0 || !g.is_square() {
            return Err(Error::Dimension(format!("G must be square and non-empty, got {}x{}", g.nrows(), g.ncols())));
        }
        let n = h.nrows();
        if n == 0 || h.ncols() != m {
            return Err(Error::Dimension(format!("H must be n x {m} with n >= 1, got {}x{}", h.nrows(), h.ncols())));
        }
        check_shape("Sigma", &sigma, m, m)?;
        check_shape("Xi", &xi, n, n)?;
        check_shape("C0", &c0, m, m)?;
        if b.len() != m || m0.len() != m {
            return Err(Error::Dimension(format!("b and m0 must have length {m}, got {} and {}", b.len(), m0.len())));
        }
        let all = g.iter().chain(h.iter()).chain(sigma.iter()).chain(xi.iter()).chain(b.iter()).chain(m0.iter()).chain(c0.iter());
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("model entries must be finite".into()));
        }
        for (name, mat) in [("Sigma", &sigma), ("Xi", &xi), ("C0", &c0)] {
            if !linalg::is_symmetric(mat, 1e-12) {
                return Err(Error::Parameter(format!("{name} must be symmetric")));
            }
        }
        if !linalg::is_psd(&sigma) {
            return Err(Error::Parameter("Sigma must be positive semidefinite".into()));
        }
        if !linalg::is_psd(&c0) {
            return Err(Error::Parameter("C0 must be positive semidefinite".into()));
        }
        if !linalg::is_spd(&xi) {
            return Err(Error::Parameter("Xi must be positive definite".into()));
        }
        let sigma_sqrt = linalg::sym_sqrt(&sigma);
        let xi_sqrt = linalg::sym_sqrt(&xi);
        let xi_inv = linalg::symmetrize(&linalg::sym_inverse(&xi)?);
        Ok(Self { g, h, sigma, xi, b, m0, c0, sigma_sqrt, xi_sqrt, xi_inv })
    }

    pub fn scalar(p: ScalarParams) -> Result<Self> {
        let s = linalg::scalar_matrix;
        Self::new(s(p.g), s(p.h), s(p.sigma), s(p.xi), linalg::dvec(&[p.b]), linalg::dvec(&[p.m0]), s(p.c0))
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.g.nrows(), self.h.nrows())
    }

    pub fn is_scalar(&self) -> bool {
        self.dims() == (1, 1)
    }

    pub fn scalar_params(&self) -> Result<ScalarParams> {
        let (m, n) = self.dims();
        if (m, n) != (1, 1) {
            return Err(Error::NotScalar { m, n });
        }
        Ok(ScalarParams {
            g: self.g[(0, 0)],
            h: self.h[(0, 0)],
            sigma: self.sigma[(0, 0)],
            xi: self.xi[(0, 0)],
            b: self.b[0],
            m0: self.m0[0],
            c0: self.c0[(0, 0)],
        })
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }
    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }
    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }
    pub fn xi(&self) -> &DMatrix<f64> {
        &self.xi
    }
    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }
    pub fn m0(&self) -> &DVector<f64> {
        &self.m0
    }
    pub fn c0(&self) -> &DMatrix<f64> {
        &self.c0
    }
    pub fn sigma_sqrt(&self) -> &DMatrix<f64> {
        &self.sigma_sqrt
    }
    pub fn xi_sqrt(&self) -> &DMatrix<f64> {
        &self.xi_sqrt
    }
    pub fn xi_inv(&self) -> &DMatrix<f64> {
        &self.xi_inv
    }

    /// `Hᵀ Ξ⁻¹ H`.
    pub fn hxh(&self) -> DMatrix<f64> {
        self.h.transpose() * &self.xi_inv * &self.h
    }

    pub fn with_bias(&self, b: DVector<f64>) -> Result<Self> {
        let mut out = self.clone();
        if b.len() != out.b.len() {
            return Err(Error::Dimension(format!("bias length {} != {}", b.len(), out.b.len())));
        }
        out.b = b;
        Ok(out)
    }

    pub fn without_bias(&self) -> Self {
        let mut out = self.clone();
        out.b.fill(0.0);
        out
    }

    pub fn with_initial(&self, m0: DVector<f64>, c0: DMatrix<f64>) -> Result<Self> {
        Self::new(self.g.clone(), self.h.clone(), self.sigma.clone(), self.xi.clone(), self.b.clone(), m0, c0)
    }

    pub fn to_config(&self) -> ModelConfig {
        ModelConfig {
            g: MatrixSpec::from_matrix(&self.g),
            h: MatrixSpec::from_matrix(&self.h),
            sigma: MatrixSpec::from_matrix(&self.sigma),
            xi: MatrixSpec::from_matrix(&self.xi),
            b: Some(MatrixSpec::from_vector(&self.b)),
            m0: Some(MatrixSpec::from_vector(&self.m0)),
            c0: Some(MatrixSpec::from_matrix(&self.c0)),
        }
    }
}

fn check_shape(name: &str, a: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if a.nrows() != rows || a.ncols() != cols {
        return Err(Error::Dimension(format!("{name} must be {rows}x{cols}, got {}x{}", a.nrows(), a.ncols())));
    }
    Ok(())
}

/// A config value: a scalar, a flat vector or nested rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Scalar(f64),
    Vector(Vec<f64>),
    Matrix(Vec<Vec<f64>>),
}

impl MatrixSpec {
    fn from_matrix(a: &DMatrix<f64>) -> Self {
        if a.nrows() == 1 && a.ncols() == 1 {
            return Self::Scalar(a[(0, 0)]);
        }
        Self::Matrix((0..a.nrows()).map(|i| a.row(i).iter().copied().collect()).collect())
    }

    fn from_vector(v: &DVector<f64>) -> Self {
        if v.len() == 1 {
            return Self::Scalar(v[0]);
        }
        Self::Vector(v.iter().copied().collect())
    }

    /// A flat vector is read as a column; nested rows give general shapes.
    pub fn to_matrix(&self, name: &str) -> Result<DMatrix<f64>> {
        match self {
            Self::Scalar(v) => Ok(linalg::scalar_matrix(*v)),
            Self::Vector(v) => {
                if v.is_empty() {
                    return Err(Error::Config(format!("{name} is empty")));
                }
                Ok(DMatrix::from_column_slice(v.len(), 1, v))
            }
            Self::Matrix(rows) => {
                let nrows = rows.len();
                let ncols = rows.first().map_or(0, Vec::len);
                if nrows == 0 || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
                    return Err(Error::Config(format!("{name} rows must be non-empty and of equal length")));
                }
                Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
            }
        }
    }

    pub fn to_vector(&self, name: &str) -> Result<DVector<f64>> {
        match self {
            Self::Scalar(v) => Ok(linalg::dvec(&[*v])),
            Self::Vector(v) if !v.is_empty() => Ok(linalg::dvec(v)),
            Self::Matrix(rows) if rows.iter().all(|r| r.len() == 1) && !rows.is_empty() => {
                Ok(DVector::from_iterator(rows.len(), rows.iter().map(|r| r[0])))
            }
            _ => Err(Error::Config(format!("{name} must be a scalar or a flat vector"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(rename = "G")]
    pub g: MatrixSpec,
    #[serde(rename = "H")]
    pub h: MatrixSpec,
    #[serde(rename = "Sigma")]
    pub sigma: MatrixSpec,
    #[serde(rename = "Xi")]
    pub xi: MatrixSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<MatrixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m0: Option<MatrixSpec>,
    #[serde(rename = "C0", default, skip_serializing_if = "Option::is_none")]
    pub c0: Option<MatrixSpec>,
}

impl ModelConfig {
    /// Missing `b` and `m0` default to zero; a missing `C0` defaults to the
    /// steady-state Kalman-Bucy covariance.
    pub fn build(&self) -> Result<LinearGaussianModel> {
        let g = self.g.to_matrix("G")?;
        let h = self.h.to_matrix("H")?;
        let m = g.nrows();
        // A flat `H` of length m is a single observation row.
        let h = if h.ncols() == 1 && m > 1 && h.nrows() == m { h.transpose() } else { h };
        let sigma = self.sigma.to_matrix("Sigma")?;
        let xi = self.xi.to_matrix("Xi")?;
        let b = match &self.b {
            Some(v) => v.to_vector("b")?,
            None => DVector::zeros(m),
        };
        let m0 = match &self.m0 {
            Some(v) => v.to_vector("m0")?,
            None => DVector::zeros(m),
        };
        let explicit_c0 = self.c0.as_ref().map(|c| c.to_matrix("C0")).transpose()?;
        let c0 = explicit_c0.clone().unwrap_or_else(|| DMatrix::identity(m, m));
        let model = LinearGaussianModel::new(g, h, sigma, xi, b, m0.clone(), c0)?;
        if explicit_c0.is_some() {
            return Ok(model);
        }
        let c_inf = crate::moments::steady_state_cov(&model, 1.0)?.c_inf;
        model.with_initial(m0, c_inf)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Load a model from a `.toml` or `.json` file.
pub fn load_model(path: &Path) -> Result<LinearGaussianModel> {
    let text = std::fs::read_to_string(path)?;
    let cfg = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => ModelConfig::from_json(&text)?,
        _ => ModelConfig::from_toml(&text)?,
    };
    cfg.build()
}

pub const PRESETS: [&str; 3] = ["system1", "system2", "figure1"];

/// System 1 (`τ > 0`) of the numerical section, with `C0 = Ĉ∞`.
pub fn system1() -> LinearGaussianModel {
    preset_scalar(0.5, 8.5, 0.8, 6.3, 9.9)
}

/// System 2 (`τ < 0`), with `C0 = Ĉ∞`.
pub fn system2() -> LinearGaussianModel {
    preset_scalar(2.5, 2.9, 18.0, 26.0, 1.2)
}

/// The scalar filtering example behind the Ito/Stratonovich snapshot:
/// static signal, `H = 2`, `Ξ = 1`, prior `N(0, 0.3)`. The true state
/// `x0* = 5` lives in [`FIGURE1_X0`].
pub fn figure1() -> LinearGaussianModel {
    LinearGaussianModel::scalar(ScalarParams { g: 0.0, h: 2.0, sigma: 0.0, xi: 1.0, b: 0.0, m0: 0.0, c0: 0.3 })
        .expect("figure1 preset is valid")
}

pub const FIGURE1_X0: f64 = 5.0;

fn preset_scalar(g: f64, h: f64, sigma: f64, xi: f64, b: f64) -> LinearGaussianModel {
    let p = ScalarParams { g, h, sigma, xi, b, m0: 0.0, c0: 0.0 };
    let c_inf = (g + p.y(1.0)) / p.h2_xi();
    LinearGaussianModel::scalar(ScalarParams { c0: c_inf, ..p }).expect("preset is valid")
}

pub fn preset(name: &str) -> Result<LinearGaussianModel> {
    match name {
        "system1" => Ok(system1()),
        "system2" => Ok(system2()),
        "figure1" => Ok(figure1()),
        _ => Err(Error::Config(format!("unknown preset '{name}', available: {}", PRESETS.join(", ")))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub m: usize,
    pub n: usize,
    pub sigma_spd: bool,
    pub xi_spd: bool,
    pub c0_psd: bool,
    pub sigma_min_eigenvalue: f64,
    pub xi_min_eigenvalue: f64,
    pub controllability_rank: usize,
    pub observability_rank: usize,
    pub controllable: bool,
    pub observable: bool,
}

impl ValidationReport {
    /// Positive-definite noises plus the controllability and observability
    /// rank conditions.
    pub fn passed(&self) -> bool {
        self.sigma_spd && self.xi_spd && self.c0_psd && self.controllable && self.observable
    }

    pub fn failures(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if !self.sigma_spd {
            out.push("Sigma is not positive definite");
        }
        if !self.xi_spd {
            out.push("Xi is not positive definite");
        }
        if !self.c0_psd {
            out.push("C0 is not positive semidefinite");
        }
        if !self.controllable {
            out.push("(G, Sigma^1/2) is not controllable");
        }
        if !self.observable {
            out.push("(G, H) is not observable");
        }
        out
    }
}

pub fn validate_model(model: &LinearGaussianModel) -> ValidationReport {
    let (m, n) = model.dims();
    let mut ctrl = DMatrix::zeros(m, m * m);
    let mut block = model.sigma_sqrt().clone();
    for k in 0..m {
        ctrl.view_mut((0, k * m), (m, m)).copy_from(&block);
        block = model.g() * block;
    }
    let mut obs = DMatrix::zeros(n * m, m);
    let mut block = model.h().clone();
    for k in 0..m {
        obs.view_mut((k * n, 0), (n, m)).copy_from(&block);
        block *= model.g();
    }
    let controllability_rank = linalg::rank(&ctrl);
    let observability_rank = linalg::rank(&obs);
    ValidationReport {
        m,
        n,
        sigma_spd: linalg::is_spd(model.sigma()),
        xi_spd: linalg::is_spd(model.xi()),
        c0_psd: linalg::is_psd(model.c0()),
        sigma_min_eigenvalue: linalg::min_sym_eigenvalue(model.sigma()),
        xi_min_eigenvalue: linalg::min_sym_eigenvalue(model.xi()),
        controllability_rank,
        observability_rank,
        controllable: controllability_rank == m,
        observable: observability_rank == m,
    }
}

/// Replication weights: `r` on the individual misfit, `s` on the
/// population (conformity) term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RsPair {
    r: f64,
    s: f64,
}

impl RsPair {
    pub const KALMAN: RsPair = RsPair { r: 1.0, s: 0.0 };

    pub fn new(r: f64, s: f64) -> Result<Self> {
        if !(r.is_finite() && s.is_finite()) {
            return Err(Error::Parameter(format!("r and s must be finite, got ({r}, {s})")));
        }
        if r <= 0.0 {
            return Err(Error::Parameter(format!("r must be positive, got {r}")));
        }
        if s >= r {
            return Err(Error::Parameter(format!("s must be below r, got r = {r}, s = {s}")));
        }
        Ok(Self { r, s })
    }

    pub fn r(&self) -> f64 {
        self.r
    }
    pub fn s(&self) -> f64 {
        self.s
    }
    /// Innovation weight `r − s > 0`.
    pub fn gain_weight(&self) -> f64 {
        self.r - self.s
    }
}

/// Upper end of the open interval of `s` for which the scalar steady-state
/// stability matrix is negative: `s < min(r, r y/(G + y))`, `y = √(G²+rH²Ξ⁻¹Σ)`.
pub fn admissible_s_range(model: &LinearGaussianModel, r: f64) -> Result<SRange> {
    let p = model.scalar_params()?;
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::Parameter(format!("r must be positive, got {r}")));
    }
    let y = p.y(r);
    let upper = if p.g + y > 0.0 { r.min(r / (1.0 + p.g / y)) } else { r };
    Ok(SRange { r, upper })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SRange {
    pub r: f64,
    /// Exclusive upper bound.
    pub upper: f64,
}

impl SRange {
    pub fn contains(&self, s: f64) -> bool {
        s < self.upper
    }
}

/// Simulation grid with `delta_d` an integer multiple of `dt` and `t_end` an
/// integer multiple of `delta_d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t_end: f64,
    dt: f64,
    delta_d: f64,
    steps_per_knot: usize,
    n_knots: usize,
}

fn integer_ratio(num: f64, den: f64) -> Option<usize> {
    let q = num / den;
    let k = q.round();
    (k >= 1.0 && (q - k).abs() <= 1e-9 * k).then_some(k as usize)
}

impl TimeGrid {
    pub fn new(t_end: f64, dt: f64, delta_d: f64) -> Result<Self> {
        if !(t_end > 0.0 && dt > 0.0 && delta_d > 0.0) || !(t_end.is_finite() && delta_d.is_finite()) {
            return Err(Error::Parameter(format!("grid values must be positive: T = {t_end}, dt = {dt}, delta_d = {delta_d}")));
        }
        let steps_per_knot = integer_ratio(delta_d, dt)
            .ok_or_else(|| Error::Alignment(format!("delta_d = {delta_d} is not a positive integer multiple of dt = {dt}")))?;
        let n_knots = integer_ratio(t_end, delta_d)
            .ok_or_else(|| Error::Alignment(format!("T = {t_end} is not a positive integer multiple of delta_d = {delta_d}")))?;
        Ok(Self { t_end, dt, delta_d, steps_per_knot, n_knots })
    }

    /// Grid with `n_knots` knots of `steps_per_knot` steps each.
    pub fn from_counts(dt: f64, steps_per_knot: usize, n_knots: usize) -> Result<Self> {
        if steps_per_knot == 0 || n_knots == 0 || !(dt > 0.0) {
            return Err(Error::Parameter("grid counts must be positive".into()));
        }
        let delta_d = dt * steps_per_knot as f64;
        Ok(Self { t_end: delta_d * n_knots as f64, dt, delta_d, steps_per_knot, n_knots })
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn delta_d(&self) -> f64 {
        self.delta_d
    }
    pub fn steps_per_knot(&self) -> usize {
        self.steps_per_knot
    }
    pub fn n_knots(&self) -> usize {
        self.n_knots
    }
    pub fn n_steps(&self) -> usize {
        self.steps_per_knot * self.n_knots
    }
    /// Time of fine step `i`.
    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }
    pub fn knot_time(&self, k: usize) -> f64 {
        k as f64 * self.delta_d
    }
}
