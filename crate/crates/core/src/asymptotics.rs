//! Asymptotic bias and mean squared error of the generalized filter when the
//! true signal carries an unknown constant drift `b`, and the optimal
//! `(r, s)` choices that follow from it.
//!
//! In the scalar case the steady-state error depends on `(r, s)` only
//! through `A∞(r, s) = (s/r) G − ((r−s)/r) √(G² + r a)`, `a = H²Ξ⁻¹Σ`, and
//! is minimized at the unique negative root `A∞*` of
//! `A³ + pA + q = 0`, `p = −(a + G²)`, `q = 4b²H²Ξ⁻¹`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::CsvTable;
use crate::linalg;
use crate::model::{admissible_s_range, LinearGaussianModel, RsPair, ScalarParams};
use crate::moments::{self, scalar_c_inf, stability_matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CubicBranch {
    /// `τ > 0`: one real root (Cardano).
    OneRealRoot,
    /// `τ < 0`: three real roots (trigonometric form).
    ThreeRealRoots,
    /// `τ = 0` to rounding: repeated root, trigonometric limit.
    Boundary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CubicRoot {
    pub a_star: f64,
    pub p: f64,
    pub q: f64,
    pub tau: f64,
    pub branch: CubicBranch,
    /// `|g(A)| / (|pA| + |q|)` with `g(A) = A³ + pA + q`.
    pub relative_residual: f64,
}

pub fn cubic_coefficients(sp: &ScalarParams) -> (f64, f64) {
    (-(sp.a() + sp.g * sp.g), 4.0 * sp.b * sp.b * sp.h2_xi())
}

fn cubic_relative_residual(a: f64, p: f64, q: f64) -> f64 {
    let g = a * a * a + p * a + q;
    let scale = (p * a).abs() + q.abs();
    if scale == 0.0 {
        g.abs()
    } else {
        g.abs() / scale
    }
}

/// Negative real root of `A³ + pA + q` for `p < 0`, `q ≥ 0`.
pub fn depressed_cubic_negative_root(p: f64, q: f64) -> Result<CubicRoot> {
    if !(p < 0.0) || q < 0.0 || !p.is_finite() || !q.is_finite() {
        return Err(Error::Parameter(format!("cubic needs p < 0 and q >= 0, got p = {p}, q = {q}")));
    }
    let p3 = p * p * p / 27.0;
    let tau = q * q / 4.0 + p3;
    let scale = q * q / 4.0 + p3.abs();
    let (mut a, branch) = if q == 0.0 {
        (-(-p).sqrt(), CubicBranch::ThreeRealRoots)
    } else if tau > 1e-14 * scale {
        // Large-magnitude Cardano term first; the small one follows from
        // u³ v³ = −p³/27 without cancellation.
        let big = -q / 2.0 - tau.sqrt();
        let small = -p3 / big;
        (big.cbrt() + small.cbrt(), CubicBranch::OneRealRoot)
    } else {
        let rho = 2.0 * (-p / 3.0).sqrt();
        let arg = (3.0 * q / (2.0 * p) * (-3.0 / p).sqrt()).clamp(-1.0, 1.0);
        let theta = arg.acos();
        let root = rho * (theta / 3.0 - 4.0 * std::f64::consts::PI / 3.0).cos();
        let branch = if tau < -1e-14 * scale { CubicBranch::ThreeRealRoots } else { CubicBranch::Boundary };
        (root, branch)
    };
    for _ in 0..4 {
        let g = a * a * a + p * a + q;
        let dg = 3.0 * a * a + p;
        if dg == 0.0 {
            break;
        }
        let next = a - g / dg;
        if cubic_relative_residual(next, p, q) < cubic_relative_residual(a, p, q) {
            a = next;
        } else {
            break;
        }
    }
    Ok(CubicRoot { a_star: a, p, q, tau, branch, relative_residual: cubic_relative_residual(a, p, q) })
}

/// The MSE-optimal steady-state stability value `A∞*`.
pub fn cubic_a_star(model: &LinearGaussianModel) -> Result<CubicRoot> {
    let sp = model.scalar_params()?;
    let (p, q) = cubic_coefficients(&sp);
    if !(p < 0.0) {
        return Err(Error::Regime("G = 0 and H^2 Sigma / Xi = 0: the cubic has no negative root".into()));
    }
    depressed_cubic_negative_root(p, q)
}

/// Bisection for the negative root of `A³ + pA + q`, used as a diagnostic
/// cross-check of the closed form.
pub fn bracketed_negative_root(p: f64, q: f64) -> f64 {
    let g = |a: f64| a * a * a + p * a + q;
    let mut lo = -1.0;
    while g(lo) > 0.0 {
        lo *= 2.0;
    }
    let mut hi = if q == 0.0 { -0.5 * (-p).sqrt() } else { 0.0 };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if g(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Scalar `A∞(r, s)`.
pub fn a_inf_scalar(sp: &ScalarParams, r: f64, s: f64) -> f64 {
    s / r * sp.g - (r - s) / r * sp.y(r)
}

/// Scalar steady-state MSE as a function of `A = A∞`.
pub fn e_inf_of_a(sp: &ScalarParams, a: f64) -> f64 {
    let k = (sp.g - a) / sp.h;
    -0.5 * (sp.sigma + k * k * sp.xi) / a + (sp.b / a).powi(2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SOpt {
    pub r: f64,
    pub s: f64,
    /// The stable `s` range is `s < upper`.
    pub upper: f64,
    pub admissible: bool,
}

pub fn s_opt_given_r(model: &LinearGaussianModel, r: f64) -> Result<SOpt> {
    let sp = model.scalar_params()?;
    let a_star = cubic_a_star(model)?.a_star;
    let range = admissible_s_range(model, r)?;
    let y = sp.y(r);
    let s = r * (a_star + y) / (sp.g + y);
    Ok(SOpt { r, s, upper: range.upper, admissible: range.contains(s) })
}

pub fn s_lower(sp: &ScalarParams, a_star: f64) -> f64 {
    -(sp.g + a_star).powi(2) / (4.0 * sp.a())
}

/// `s_opt` at `y = |G|` (the `r → 0` end of the optimal curve).
pub fn s_upper(sp: &ScalarParams, a_star: f64) -> f64 {
    (sp.g.abs() - sp.g) * (sp.g.abs() + a_star) / sp.a()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ROptRegime {
    /// `s^l < s < s^u` with `(G − A∞*)/2 ≥ |G|`: two minimizers.
    TwoRoots,
    /// `s = s^l`: the two minimizers merge.
    DoubleRoot,
    Unique,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ROpt {
    pub s: f64,
    /// Decreasing order.
    pub r: Vec<f64>,
    pub regime: ROptRegime,
    pub s_l: f64,
    pub s_u: f64,
    /// Whether `s` is in the stable range of each returned `r`.
    pub admissible: Vec<bool>,
}

/// Optimal `r` for fixed `s`: with `y = √(G² + r a)` the optimality
/// condition is `y² + (A∞* − G) y − G A∞* − s a = 0`; roots with
/// `y > |G|` map back to `r = (y² − G²)/a`.
pub fn r_opt_given_s(model: &LinearGaussianModel, s: f64) -> Result<ROpt> {
    let sp = model.scalar_params()?;
    let a_star = cubic_a_star(model)?.a_star;
    let a = sp.a();
    let (s_l, s_u) = (s_lower(&sp, a_star), s_upper(&sp, a_star));
    let disc = (a_star + sp.g).powi(2) + 4.0 * s * a;
    let tol = 1e-12 * (a_star + sp.g).powi(2);
    if disc < -tol {
        return Err(Error::NoSolution(format!("s = {s} is below s^l = {s_l}: no optimal r")));
    }
    let sq = disc.max(0.0).sqrt();
    let double = disc.abs() <= tol;
    let mid = (sp.g - a_star) / 2.0;
    let ys: Vec<f64> = if double { vec![mid] } else { vec![mid + sq / 2.0, mid - sq / 2.0] };
    let r: Vec<f64> = ys.into_iter().filter(|&y| y > sp.g.abs()).map(|y| (y * y - sp.g * sp.g) / a).collect();
    if r.is_empty() {
        return Err(Error::NoSolution(format!("no optimal r with y > |G| for s = {s}")));
    }
    let regime = match (double, r.len()) {
        (true, _) => ROptRegime::DoubleRoot,
        (false, 2) => ROptRegime::TwoRoots,
        _ => ROptRegime::Unique,
    };
    let admissible = r.iter().map(|&ri| admissible_s_range(model, ri).map(|rg| rg.contains(s)).unwrap_or(false)).collect();
    Ok(ROpt { s, r, regime, s_l, s_u, admissible })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasMse {
    pub r: f64,
    pub s: f64,
    pub nu_inf: f64,
    pub e_inf: f64,
    pub c_inf: DMatrix<f64>,
    pub a_inf: DMatrix<f64>,
    /// Upper bound from the symmetric-part abscissa (equal to `e_inf` when scalar).
    pub e_bound: f64,
    pub alpha: f64,
    pub alpha_sym: f64,
    /// `E∞` through the `X∞` trace form (matrix route).
    pub e_inf_trace_form: f64,
}

/// Steady-state squared bias and MSE with `C0 = C∞`, `E[ε0] = 0`.
pub fn asymptotic_bias_mse(model: &LinearGaussianModel, rs: &RsPair) -> Result<BiasMse> {
    let (r, s) = (rs.r(), rs.s());
    let c_inf = moments::steady_state_cov(model, r)?.c_inf;
    let info = stability_matrix(model, rs, &c_inf);
    if !info.is_stable() {
        return Err(Error::Stability(format!(
            "(r, s) = ({r}, {s}): alpha(A) = {:.6}, alpha(A + A^T) = {:.6}",
            info.alpha, info.alpha_sym
        )));
    }
    let a = &info.a;
    let b = model.b();
    let a_inv = a.clone().try_inverse().ok_or_else(|| Error::Stability("A is singular".into()))?;
    let mu = &a_inv * b;
    let nu_inf = mu.norm_squared();
    let w = rs.gain_weight();
    let bbt = b * b.transpose();
    let x_inf = lyapunov_solve(a)?.x;
    let q_trace = model.sigma() + (model.g() - a) * &c_inf * w - &a_inv * &bbt * 2.0;
    let e_inf_trace_form = linalg::trace(&(q_trace * &x_inf));
    let e_inf = if let Ok(sp) = model.scalar_params() {
        e_inf_of_a(&sp, a[(0, 0)])
    } else {
        // Direct route: A P̃ + P̃ Aᵀ + Q = 0 for the second moment.
        let k = moments::kalman_gain(&c_inf, model);
        let q = model.sigma() + &k * model.xi() * k.transpose() * (w * w) - &mu * b.transpose() - b * mu.transpose();
        linalg::trace(&linalg::lyapunov_kron(&a.transpose(), &q)?)
    };
    let lam = linalg::max_sym_eigenvalue(&model.hxh());
    let gamma = -2.0 * linalg::trace(&(&a_inv * &bbt)) + linalg::trace(model.sigma()) + w * w * lam * linalg::frobenius_sq(&c_inf);
    let e_bound = -gamma / info.alpha_sym;
    Ok(BiasMse {
        r,
        s,
        nu_inf,
        e_inf,
        c_inf,
        a_inf: info.a.clone(),
        e_bound,
        alpha: info.alpha,
        alpha_sym: info.alpha_sym,
        e_inf_trace_form,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovSolution {
    pub x: DMatrix<f64>,
    pub residual: f64,
}

/// `AᵀX + XA + I = 0` for stable `A`.
pub fn lyapunov_solve(a: &DMatrix<f64>) -> Result<LyapunovSolution> {
    let alpha = linalg::spectral_abscissa(a);
    if !(alpha < 0.0) {
        return Err(Error::Stability(format!("Lyapunov equation needs a stable matrix, alpha(A) = {alpha}")));
    }
    let m = a.nrows();
    let id = DMatrix::identity(m, m);
    let x = linalg::lyapunov_kron(a, &id)?;
    let residual = (a.transpose() * &x + &x * a + id).norm();
    Ok(LyapunovSolution { x, residual })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub r: f64,
    pub s: f64,
    pub e_inf: f64,
    pub c_inf: f64,
    /// `C∞(r) − E∞(r, s)` at the returned pair.
    pub residual: f64,
    /// `r − s` from the closed-form condition.
    pub r_minus_s_formula: f64,
    pub iterations: usize,
}

/// `(r − s)` at which `C∞ = E∞` on the optimal curve.
pub fn r_minus_s_formula(sp: &ScalarParams, a_star: f64) -> f64 {
    let d = sp.g - a_star;
    a_star * a_star * d / (-0.5 * a_star * (sp.a() + d * d) + sp.b * sp.b * sp.h2_xi())
}

/// Pair on the optimal curve `s = s_opt(r)` with `C∞(r) = E∞`, by bisection
/// in `ln r` over `[1e-3, 1e3]`. `C∞` decreases in `r` while `E∞` is
/// constant along the curve, so the root is unique.
pub fn matched_pair(model: &LinearGaussianModel) -> Result<MatchedPair> {
    let sp = model.scalar_params()?;
    let a_star = cubic_a_star(model)?.a_star;
    let e_star = e_inf_of_a(&sp, a_star);
    let f = |r: f64| scalar_c_inf(sp.g, sp.a(), sp.h2_xi(), r) - e_star;
    let (mut lo, mut hi) = (1e-3f64.ln(), 1e3f64.ln());
    let (flo, fhi) = (f(lo.exp()), f(hi.exp()));
    if !(flo > 0.0 && fhi < 0.0) {
        return Err(Error::NoSolution(format!(
            "C_inf - E_inf does not change sign on [1e-3, 1e3]: {flo:e} .. {fhi:e} (E_inf = {e_star})"
        )));
    }
    let mut iterations = 0;
    while iterations < 200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if f(mid.exp()) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        iterations += 1;
    }
    let r = (0.5 * (lo + hi)).exp();
    let y = sp.y(r);
    let s = r * (a_star + y) / (sp.g + y);
    let c_inf = scalar_c_inf(sp.g, sp.a(), sp.h2_xi(), r);
    let e_inf = e_inf_of_a(&sp, a_inf_scalar(&sp, r, s));
    Ok(MatchedPair { r, s, e_inf, c_inf, residual: c_inf - e_inf, r_minus_s_formula: r_minus_s_formula(&sp, a_star), iterations })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InflationBounds {
    /// MSE-optimal `r` for multiplicative inflation only (`s = 0`).
    pub r0_opt: f64,
    /// `2(G² + a)/a`.
    pub r0_lower_bound: f64,
    pub r0_bound_holds: bool,
    pub c_inf_r0: f64,
    pub c_hat: f64,
    pub c_ratio: f64,
    /// `(2|G| + √a)/(√r0 (G + √(G²+a)))`, when the regime applies.
    pub ratio_bound: Option<f64>,
    pub ratio_bound_holds: Option<bool>,
    pub notes: Vec<String>,
}

impl InflationBounds {
    /// Error if any applicable check failed or a precondition was unmet.
    pub fn require(&self) -> Result<()> {
        if let Some(n) = self.notes.first() {
            return Err(Error::Regime(n.clone()));
        }
        if !self.r0_bound_holds || self.ratio_bound_holds == Some(false) {
            return Err(Error::Regime("inflation bound violated".into()));
        }
        Ok(())
    }
}

pub fn inflation_bounds(model: &LinearGaussianModel) -> Result<InflationBounds> {
    let sp = model.scalar_params()?;
    let cubic = cubic_a_star(model)?;
    let a = sp.a();
    let a_star = cubic.a_star;
    let r0_opt = (a_star * a_star - sp.g * sp.g) / a;
    let r0_lower_bound = 2.0 * (sp.g * sp.g + a) / a;
    let c_inf_r0 = scalar_c_inf(sp.g, a, sp.h2_xi(), r0_opt);
    let c_hat = scalar_c_inf(sp.g, a, sp.h2_xi(), 1.0);
    let mut notes = Vec::new();
    if cubic.branch != CubicBranch::OneRealRoot {
        notes.push(format!("tau = {:e} is not positive; the r0_opt lower bound and covariance ratio bound are not guaranteed", cubic.tau));
    }
    let (ratio_bound, ratio_bound_holds) = if cubic.branch == CubicBranch::OneRealRoot && sp.g > 0.0 {
        let bound = (2.0 * sp.g.abs() + a.sqrt()) / (r0_opt.sqrt() * (sp.g + sp.y(1.0)));
        (Some(bound), Some(c_inf_r0 / c_hat < bound && bound < 1.0))
    } else {
        if sp.g <= 0.0 {
            notes.push(format!("G = {} is not positive; covariance ratio check skipped", sp.g));
        }
        (None, None)
    };
    Ok(InflationBounds {
        r0_opt,
        r0_lower_bound,
        r0_bound_holds: r0_opt > r0_lower_bound,
        c_inf_r0,
        c_hat,
        c_ratio: c_inf_r0 / c_hat,
        ratio_bound,
        ratio_bound_holds,
        notes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceMode {
    /// Hold `C = C∞(r)` (and `K = K∞`) fixed.
    Frozen,
    /// Integrate the covariance flow from the model's `C0`.
    Flowing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMoments {
    pub times: Vec<f64>,
    pub mean_error: Vec<DVector<f64>>,
    pub p: Vec<DMatrix<f64>>,
    pub p_tilde: Vec<DMatrix<f64>>,
    pub nu: Vec<f64>,
    pub e: Vec<f64>,
    /// Solution of the comparison ODE for the MSE differential inequality.
    pub e_bound: Vec<f64>,
    /// `α(A∞ + A∞ᵀ) < 0` at the steady state.
    pub stable: bool,
}

impl ErrorMoments {
    pub fn to_csv(&self) -> CsvTable {
        let mut t = CsvTable::new(&["t", "nu", "E", "trace_P", "E_bound"]);
        for i in 0..self.times.len() {
            t.push_floats(&[self.times[i], self.nu[i], self.e[i], linalg::trace(&self.p[i]), self.e_bound[i]]);
        }
        t
    }
}

struct FlowState {
    mu: DVector<f64>,
    p: DMatrix<f64>,
    pt: DMatrix<f64>,
    c: DMatrix<f64>,
    bound: f64,
}

/// Error mean `E[ε]`, covariance `P` and second moment `P̃` of
/// `ε = m − x`:
///
/// ```text
/// dE[ε]/dt = A_t E[ε] − b
/// dP/dt    = A_t P + P A_tᵀ + Σ + (r−s)² K Ξ Kᵀ
/// dP̃/dt    = A_t P̃ + P̃ A_tᵀ + Σ + (r−s)² K Ξ Kᵀ − E[ε] bᵀ − b E[ε]ᵀ
/// ```
///
/// RK4 with substeps keeping `h ‖A‖ ≤ 0.005`; values stored every `dt`.
pub fn error_moment_flow(
    model: &LinearGaussianModel,
    rs: &RsPair,
    horizon: f64,
    dt: f64,
    mode: CovarianceMode,
    mu0: &DVector<f64>,
    p0: &DMatrix<f64>,
) -> Result<ErrorMoments> {
    let m = model.dims().0;
    if mu0.len() != m || p0.shape() != (m, m) {
        return Err(Error::Dimension("initial error moments do not match the model".into()));
    }
    if !(horizon > 0.0 && dt > 0.0) {
        return Err(Error::Parameter("horizon and dt must be positive".into()));
    }
    let c_inf = moments::steady_state_cov(model, rs.r())?.c_inf;
    let stable = stability_matrix(model, rs, &c_inf).is_stable();
    let c0 = match mode {
        CovarianceMode::Frozen => c_inf.clone(),
        CovarianceMode::Flowing => model.c0().clone(),
    };
    let w = rs.gain_weight();
    let b = model.b().clone();
    let lam = linalg::max_sym_eigenvalue(&model.hxh());
    let tr_sigma = linalg::trace(model.sigma());

    let rhs = |st: &FlowState| -> FlowState {
        let a = model.g() - &st.c * model.hxh() * w;
        let k = moments::kalman_gain(&st.c, model);
        let forcing = model.sigma() + &k * model.xi() * k.transpose() * (w * w);
        let dmu = &a * &st.mu - &b;
        let dp = &a * &st.p + &st.p * a.transpose() + &forcing;
        let dpt = &a * &st.pt + &st.pt * a.transpose() + &forcing - &st.mu * b.transpose() - &b * st.mu.transpose();
        let dc = match mode {
            CovarianceMode::Frozen => DMatrix::zeros(m, m),
            CovarianceMode::Flowing => moments::covariance_rhs(&st.c, model, rs.r()),
        };
        let alpha = linalg::max_sym_eigenvalue(&(&a + a.transpose()));
        let dbound = alpha * st.bound - 2.0 * st.mu.dot(&b) + tr_sigma + w * w * lam * linalg::frobenius_sq(&st.c);
        FlowState { mu: dmu, p: dp, pt: dpt, c: dc, bound: dbound }
    };
    let axpy = |st: &FlowState, d: &FlowState, h: f64| FlowState {
        mu: &st.mu + &d.mu * h,
        p: &st.p + &d.p * h,
        pt: &st.pt + &d.pt * h,
        c: &st.c + &d.c * h,
        bound: st.bound + d.bound * h,
    };

    let pt0 = p0 + mu0 * mu0.transpose();
    let mut st = FlowState { mu: mu0.clone(), p: p0.clone(), pt: pt0.clone(), c: c0, bound: linalg::trace(&pt0) };
    let n_out = (horizon / dt).round().max(1.0) as usize;
    let mut out = ErrorMoments {
        times: Vec::with_capacity(n_out + 1),
        mean_error: Vec::new(),
        p: Vec::new(),
        p_tilde: Vec::new(),
        nu: Vec::new(),
        e: Vec::new(),
        e_bound: Vec::new(),
        stable,
    };
    let push = |out: &mut ErrorMoments, t: f64, st: &FlowState| {
        out.times.push(t);
        out.mean_error.push(st.mu.clone());
        out.p.push(st.p.clone());
        out.p_tilde.push(st.pt.clone());
        out.nu.push(st.mu.norm_squared());
        out.e.push(linalg::trace(&st.pt));
        out.e_bound.push(st.bound);
    };
    push(&mut out, 0.0, &st);
    for i in 0..n_out {
        let a_norm = (model.g() - &st.c * model.hxh() * w).norm().max(1e-12);
        let n_sub = ((dt * a_norm) / 0.005).ceil().max(1.0) as usize;
        let h = dt / n_sub as f64;
        for _ in 0..n_sub {
            let k1 = rhs(&st);
            let k2 = rhs(&axpy(&st, &k1, h / 2.0));
            let k3 = rhs(&axpy(&st, &k2, h / 2.0));
            let k4 = rhs(&axpy(&st, &k3, h));
            st = FlowState {
                mu: &st.mu + (&k1.mu + &k2.mu * 2.0 + &k3.mu * 2.0 + &k4.mu) * (h / 6.0),
                p: linalg::symmetrize(&(&st.p + (&k1.p + &k2.p * 2.0 + &k3.p * 2.0 + &k4.p) * (h / 6.0))),
                pt: linalg::symmetrize(&(&st.pt + (&k1.pt + &k2.pt * 2.0 + &k3.pt * 2.0 + &k4.pt) * (h / 6.0))),
                c: linalg::symmetrize(&(&st.c + (&k1.c + &k2.c * 2.0 + &k3.c * 2.0 + &k4.c) * (h / 6.0))),
                bound: st.bound + (k1.bound + 2.0 * k2.bound + 2.0 * k3.bound + k4.bound) * (h / 6.0),
            };
        }
        push(&mut out, (i + 1) as f64 * dt, &st);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub r: f64,
    pub s: f64,
    pub e_inf: f64,
    pub nu_inf: f64,
    pub c_inf: f64,
    pub stable: bool,
}

/// Analytic `E∞` surface over a grid (scalar models).
pub fn analytic_sweep(model: &LinearGaussianModel, r_grid: &[f64], s_grid: &[f64]) -> Result<Vec<SweepRow>> {
    let sp = model.scalar_params()?;
    let mut rows = Vec::with_capacity(r_grid.len() * s_grid.len());
    for &r in r_grid {
        let c_inf = scalar_c_inf(sp.g, sp.a(), sp.h2_xi(), r);
        for &s in s_grid {
            let valid = r > 0.0 && s < r;
            let a = if valid { a_inf_scalar(&sp, r, s) } else { f64::NAN };
            let stable = valid && a < 0.0;
            let (e_inf, nu_inf) = if stable { (e_inf_of_a(&sp, a), (sp.b / a).powi(2)) } else { (f64::NAN, f64::NAN) };
            rows.push(SweepRow { r, s, e_inf, nu_inf, c_inf, stable });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> CsvTable {
    let mut t = CsvTable::new(&["r", "s", "E_inf", "nu_inf", "C_inf", "stable"]);
    for row in rows {
        t.push(vec![
            crate::io::fmt_f64(row.r),
            crate::io::fmt_f64(row.s),
            crate::io::fmt_f64(row.e_inf),
            crate::io::fmt_f64(row.nu_inf),
            crate::io::fmt_f64(row.c_inf),
            (row.stable as u8).to_string(),
        ]);
    }
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SOptSample {
    pub r: f64,
    pub s: f64,
    pub admissible: bool,
    pub e_inf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ROptSample {
    pub s: f64,
    pub r: Vec<f64>,
    pub regime: Option<ROptRegime>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticsReport {
    pub params: ScalarParams,
    pub a_inf_star: f64,
    /// Bisection value of the same root.
    pub a_inf_star_oracle: f64,
    pub p: f64,
    pub q: f64,
    pub tau: f64,
    pub branch: CubicBranch,
    pub cubic_relative_residual: f64,
    pub s_l: f64,
    pub s_u: f64,
    /// `(G − A∞*)/2 ≥ |G|`: two optimal `r` exist for `s^l < s < s^u`.
    pub two_root_regime: bool,
    pub s_opt: Vec<SOptSample>,
    pub r_opt: Vec<ROptSample>,
    /// Minimal steady-state MSE, shared by every optimal pair.
    pub e_inf_min: f64,
    pub nu_inf_min: f64,
    pub c_hat: f64,
    /// `E∞(1, 0)`: the unmodified Kalman-Bucy filter under the bias.
    pub e_inf_kalman: f64,
    pub matched_pair: MatchedPair,
    /// `E∞` at the matched pair integrated from the error-moment ODEs.
    pub matched_pair_e_inf_ode: Option<f64>,
    pub matched_pair_stable: bool,
    pub inflation: InflationBounds,
}

pub fn asymptotics_report(model: &LinearGaussianModel, r_samples: &[f64], s_samples: &[f64]) -> Result<AsymptoticsReport> {
    let sp = model.scalar_params()?;
    let cubic = cubic_a_star(model)?;
    let a_star = cubic.a_star;
    let s_opt = r_samples
        .iter()
        .map(|&r| {
            let so = s_opt_given_r(model, r)?;
            Ok(SOptSample { r, s: so.s, admissible: so.admissible, e_inf: e_inf_of_a(&sp, a_inf_scalar(&sp, r, so.s)) })
        })
        .collect::<Result<Vec<_>>>()?;
    let r_opt = s_samples
        .iter()
        .map(|&s| match r_opt_given_s(model, s) {
            Ok(ro) => ROptSample { s, r: ro.r, regime: Some(ro.regime), error: None },
            Err(e) => ROptSample { s, r: Vec::new(), regime: None, error: Some(e.to_string()) },
        })
        .collect();
    let mp = matched_pair(model)?;
    let mp_rs = RsPair::new(mp.r, mp.s)?;
    let stable = stability_matrix(model, &mp_rs, &linalg::scalar_matrix(mp.c_inf)).is_stable();
    let ode = if stable {
        let rate = a_star.abs();
        let horizon = 40.0 / rate;
        let flow = error_moment_flow(model, &mp_rs, horizon, horizon / 400.0, CovarianceMode::Frozen, &DVector::zeros(1), &linalg::scalar_matrix(mp.c_inf))?;
        flow.e.last().copied()
    } else {
        None
    };
    Ok(AsymptoticsReport {
        params: sp,
        a_inf_star: a_star,
        a_inf_star_oracle: bracketed_negative_root(cubic.p, cubic.q),
        p: cubic.p,
        q: cubic.q,
        tau: cubic.tau,
        branch: cubic.branch,
        cubic_relative_residual: cubic.relative_residual,
        s_l: s_lower(&sp, a_star),
        s_u: s_upper(&sp, a_star),
        two_root_regime: (sp.g - a_star) / 2.0 >= sp.g.abs(),
        s_opt,
        r_opt,
        e_inf_min: e_inf_of_a(&sp, a_star),
        nu_inf_min: (sp.b / a_star).powi(2),
        c_hat: scalar_c_inf(sp.g, sp.a(), sp.h2_xi(), 1.0),
        e_inf_kalman: e_inf_of_a(&sp, a_inf_scalar(&sp, 1.0, 0.0)),
        matched_pair: mp,
        matched_pair_e_inf_ode: ode,
        matched_pair_stable: stable,
        inflation: inflation_bounds(model)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{system1, system2};

    fn rs(r: f64, s: f64) -> RsPair {
        RsPair::new(r, s).unwrap()
    }

    #[test]
    fn unbiased_cubic_root() {
        let m = system1().without_bias();
        let sp = m.scalar_params().unwrap();
        let c = cubic_a_star(&m).unwrap();
        assert_eq!(c.a_star, -sp.y(1.0));
    }

    #[test]
    fn system_roots_and_branches() {
        let c1 = cubic_a_star(&system1()).unwrap();
        assert_eq!(c1.branch, CubicBranch::OneRealRoot);
        assert!((c1.a_star + 16.6951).abs() < 1e-3);
        assert!(c1.relative_residual < 1e-14);
        let c2 = cubic_a_star(&system2()).unwrap();
        assert_eq!(c2.branch, CubicBranch::ThreeRealRoots);
        assert!(c2.tau < 0.0);
        assert!((c2.a_star + 3.549).abs() < 3e-3, "{}", c2.a_star);
        for c in [c1, c2] {
            let oracle = bracketed_negative_root(c.p, c.q);
            assert!((c.a_star - oracle).abs() < 1e-10 * oracle.abs());
        }
    }

    #[test]
    fn s_opt_values() {
        assert!((s_opt_given_r(&system1(), 0.13).unwrap().s + 1.18).abs() < 0.01);
        assert!((s_opt_given_r(&system2(), 0.99).unwrap().s + 0.0135).abs() < 0.001);
        let so = s_opt_given_r(&system1().without_bias(), 1.0).unwrap();
        assert!(so.s.abs() < 1e-14);
        assert!(so.admissible);
    }

    #[test]
    fn r_opt_values() {
        let ro = r_opt_given_s(&system2(), -0.0135).unwrap();
        assert_eq!(ro.regime, ROptRegime::TwoRoots);
        assert!((ro.r[0] - 0.99).abs() < 0.01, "{:?}", ro.r);
        assert!((ro.r[1] - 0.072).abs() < 0.002, "{:?}", ro.r);
        assert!((ro.s_l + 0.047).abs() < 0.001);
        let sp = system2().scalar_params().unwrap();
        let a_star = cubic_a_star(&system2()).unwrap().a_star;
        let at_l = r_opt_given_s(&system2(), ro.s_l).unwrap();
        assert_eq!(at_l.regime, ROptRegime::DoubleRoot);
        let ystar = (sp.g - a_star) / 2.0;
        assert!((at_l.r[0] - (ystar * ystar - sp.g * sp.g) / sp.a()).abs() < 1e-12);
        assert!(matches!(r_opt_given_s(&system2(), ro.s_l - 1e-3), Err(Error::NoSolution(_))));
    }

    #[test]
    fn inverse_consistency() {
        for model in [system1(), system2()] {
            for i in 0..30 {
                let r = 0.05 * (1000f64).powf(i as f64 / 29.0);
                let s = s_opt_given_r(&model, r).unwrap().s;
                let ro = r_opt_given_s(&model, s).unwrap();
                assert!(ro.r.iter().any(|&x| (x - r).abs() < 1e-6 * r), "{r} {:?}", ro.r);
            }
        }
    }

    #[test]
    fn b_zero_identity() {
        let m = system1().without_bias();
        let mp = matched_pair(&m).unwrap();
        assert!((mp.r - 1.0).abs() < 1e-8 && mp.s.abs() < 1e-8, "{mp:?}");
        let bm = asymptotic_bias_mse(&m, &RsPair::KALMAN).unwrap();
        assert!((bm.e_inf - bm.c_inf[(0, 0)]).abs() < 1e-10);
        assert!((mp.r_minus_s_formula - 1.0).abs() < 1e-12);
    }

    #[test]
    fn system1_matched_pair() {
        let mp = matched_pair(&system1()).unwrap();
        assert!((mp.r - 0.1289).abs() < 1e-3 && (mp.s + 1.1774).abs() < 1e-3, "{mp:?}");
        assert!(mp.residual.abs() < 1e-8);
        assert!(((mp.r - mp.s) - mp.r_minus_s_formula).abs() < 1e-8);
        assert!((mp.r_minus_s_formula - 1.31).abs() < 0.01);
        assert!((mp.e_inf - 1.1477).abs() < 1e-3);
    }

    #[test]
    fn scalar_bound_is_tight() {
        for &(r, s) in &[(1.0, 0.0), (0.13, -1.18), (2.0, -3.0)] {
            let bm = asymptotic_bias_mse(&system1(), &rs(r, s)).unwrap();
            assert!((bm.e_bound - bm.e_inf).abs() < 1e-9 * bm.e_inf);
            assert!((bm.e_inf_trace_form - bm.e_inf).abs() < 1e-9 * bm.e_inf);
        }
    }

    #[test]
    fn unstable_pair_rejected() {
        // s just below r with G > 0 makes A∞ positive.
        assert!(matches!(asymptotic_bias_mse(&system1(), &rs(1.0, 0.99)), Err(Error::Stability(_))));
    }

    #[test]
    fn lyapunov_examples() {
        let x = lyapunov_solve(&(DMatrix::identity(3, 3) * -0.5)).unwrap();
        assert!((x.x - DMatrix::identity(3, 3)).norm() < 1e-14);
        let x = lyapunov_solve(&linalg::scalar_matrix(-4.0)).unwrap();
        assert!((x.x[(0, 0)] - 0.125).abs() < 1e-15);
        assert!(lyapunov_solve(&linalg::scalar_matrix(0.1)).is_err());
    }

    #[test]
    fn inflation_bounds_system1() {
        let ib = inflation_bounds(&system1()).unwrap();
        assert!((ib.r0_opt - 30.35).abs() < 0.05);
        assert!((ib.r0_lower_bound - 2.05).abs() < 0.01);
        assert!(ib.r0_bound_holds);
        assert!((ib.c_inf_r0 - 0.05).abs() < 0.005);
        assert_eq!(ib.ratio_bound_holds, Some(true));
        assert!(ib.require().is_ok());
    }

    #[test]
    fn inflation_regime_notes() {
        let ib = inflation_bounds(&system2()).unwrap();
        assert!(!ib.r0_bound_holds);
        assert!(matches!(ib.require(), Err(Error::Regime(_))));
        let neg = LinearGaussianModel::scalar(ScalarParams { g: -0.5, ..system1().scalar_params().unwrap() }).unwrap();
        let ib = inflation_bounds(&neg).unwrap();
        assert!(ib.ratio_bound.is_none());
        assert!(ib.notes.iter().any(|n| n.contains("G =")));
    }

    #[test]
    fn error_flow_kalman_consistency() {
        // r = 1, s = 0, b = 0, P0 = C0: P_t = C_t.
        let m = system1().without_bias().with_initial(DVector::zeros(1), linalg::scalar_matrix(2.0)).unwrap();
        let flow = error_moment_flow(&m, &RsPair::KALMAN, 0.5, 0.01, CovarianceMode::Flowing, &DVector::zeros(1), m.c0()).unwrap();
        let cs = moments::integrate_covariance(&m, &RsPair::KALMAN, m.c0(), 1e-4, 5000).unwrap();
        for (i, p) in flow.p.iter().enumerate() {
            let c = &cs[i * 100];
            assert!((p[(0, 0)] - c[(0, 0)]).abs() < 1e-7, "{i}: {} vs {}", p[(0, 0)], c[(0, 0)]);
        }
        for (p, pt) in flow.p.iter().zip(&flow.p_tilde) {
            assert_eq!(p, pt);
        }
    }

    #[test]
    fn error_flow_long_horizon() {
        let model = system1();
        let mp = matched_pair(&model).unwrap();
        let pair = rs(mp.r, mp.s);
        let flow = error_moment_flow(&model, &pair, 3.0, 0.01, CovarianceMode::Frozen, &DVector::zeros(1), &linalg::scalar_matrix(mp.c_inf)).unwrap();
        let bm = asymptotic_bias_mse(&model, &pair).unwrap();
        assert!((flow.e.last().unwrap() - bm.e_inf).abs() < 1e-3 * bm.e_inf);
        assert!((flow.nu.last().unwrap() - bm.nu_inf).abs() < 1e-4 * bm.nu_inf);
        for i in 0..flow.times.len() {
            let tr = linalg::trace(&flow.p[i]);
            assert!((flow.e[i] - tr - flow.nu[i]).abs() < 1e-10, "{}", flow.e[i] - tr - flow.nu[i]);
            assert!((flow.e_bound[i] - flow.e[i]).abs() < 1e-9 * flow.e[i].max(1.0));
        }
    }

    #[test]
    fn flat_optimum_and_local_optimality() {
        for model in [system1(), system2()] {
            let sp = model.scalar_params().unwrap();
            let a_star = cubic_a_star(&model).unwrap().a_star;
            let e_star = e_inf_of_a(&sp, a_star);
            for r in [0.1, 0.5, 2.0, 10.0] {
                let so = s_opt_given_r(&model, r).unwrap();
                let e = e_inf_of_a(&sp, a_inf_scalar(&sp, r, so.s));
                assert!((e - e_star).abs() < 1e-10 * e_star);
                for k in 1..=10 {
                    for sign in [-1.0, 1.0] {
                        let s = so.s + sign * 0.02 * k as f64 * so.s.abs().max(0.1);
                        if s < so.upper {
                            assert!(e_inf_of_a(&sp, a_inf_scalar(&sp, r, s)) > e);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn matrix_mse_routes_agree() {
        let g = DMatrix::from_row_slice(2, 2, &[0.3, 1.0, -0.4, -0.2]);
        let h = DMatrix::from_row_slice(1, 2, &[1.0, 0.3]);
        let model = LinearGaussianModel::new(
            g,
            h,
            DMatrix::from_row_slice(2, 2, &[0.6, 0.1, 0.1, 0.4]),
            linalg::scalar_matrix(0.5),
            linalg::dvec(&[0.7, -0.2]),
            DVector::zeros(2),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let pair = rs(1.4, 0.2);
        let bm = asymptotic_bias_mse(&model, &pair).unwrap();
        assert!((bm.e_inf - bm.e_inf_trace_form).abs() < 1e-9 * bm.e_inf);
        assert!(bm.e_inf <= bm.e_bound);
        let flow = error_moment_flow(&model, &pair, 80.0 / bm.alpha.abs(), 0.05, CovarianceMode::Frozen, &DVector::zeros(2), &bm.c_inf).unwrap();
        assert!((flow.e.last().unwrap() - bm.e_inf).abs() < 1e-6 * bm.e_inf);
        assert!(flow.e.iter().zip(&flow.e_bound).all(|(e, b)| *e <= b + 1e-9));
    }

    #[test]
    fn report_serializes() {
        let rep = asymptotics_report(&system1(), &[0.13, 1.0], &[-1.0, -50.0]).unwrap();
        let v: serde_json::Value = serde_json::to_value(&rep).unwrap();
        assert!((v["a_inf_star"].as_f64().unwrap() + 16.70).abs() < 0.01);
        assert_eq!(v["branch"], "one_real_root");
        assert!(rep.r_opt[1].error.is_some());
        let ode = rep.matched_pair_e_inf_ode.unwrap();
        assert!((ode - rep.e_inf_min).abs() < 1e-6 * rep.e_inf_min);
    }

    #[test]
    fn sweep_masks_unstable_cells() {
        let rows = analytic_sweep(&system1(), &[0.13, 1.0], &[-1.18, 0.5, 2.0]).unwrap();
        assert!(rows[0].stable);
        assert!(!rows[2].stable && rows[2].e_inf.is_nan());
        let csv = String::from_utf8(sweep_csv(&rows).to_bytes().unwrap()).unwrap();
        assert!(csv.starts_with("r,s,E_inf,nu_inf,C_inf,stable\n"));
    }
}
