//! Weighted nonlinear least squares (Levenberg-Marquardt) with the four scan
//! fit models: transit-Rabi, fixed-period sinusoid, erf step and Gaussian.
//!
//! Fits minimise Σ((yᵢ − f(xᵢ))/σᵢ)². Positivity constraints (χ > 0,
//! σ_g > 0) use an internal log transform; everything else is free.
//! Uncertainties come from the inverse of JᵀWJ at the solution, W = 1/σ².

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::measure::ScanResult;
use crate::qubit::transit_probability_analytic;
use crate::{Error, Result};

/// Internal parameterisation of one model parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Free,
    /// Parameter is strictly positive; optimised as its logarithm.
    LogPositive,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: &'static str,
    pub unit: &'static str,
    pub transform: Transform,
}

type EvalFn = fn(&[f64], f64) -> f64;
type JacFn = fn(&[f64], f64, &mut [f64]);

/// A fit model: evaluator plus optional analytic Jacobian (forward
/// differences otherwise, relative step 1e-6).
#[derive(Clone)]
pub struct FitModel {
    pub name: &'static str,
    pub params: Vec<ParamSpec>,
    eval: EvalFn,
    jacobian: Option<JacFn>,
}

impl std::fmt::Debug for FitModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FitModel").field("name", &self.name).finish()
    }
}

impl FitModel {
    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn eval(&self, params: &[f64], x: f64) -> f64 {
        (self.eval)(params, x)
    }

    fn jacobian_row(&self, params: &[f64], x: f64, row: &mut [f64]) {
        if let Some(j) = self.jacobian {
            j(params, x, row);
        } else {
            let f0 = self.eval(params, x);
            let mut p = params.to_vec();
            for (k, r) in row.iter_mut().enumerate() {
                let h = 1e-6 * params[k].abs().max(1e-12);
                p[k] = params[k] + h;
                *r = (self.eval(&p, x) - f0) / h;
                p[k] = params[k];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Model registry
// ---------------------------------------------------------------------------

fn transit_rabi_eval(p: &[f64], x: f64) -> f64 {
    // p = [omega0, chi, t0, a, c]
    p[4] + p[3] * transit_probability_analytic(p[0], p[1], p[2], x)
}

fn sinusoid_eval(p: &[f64], x: f64) -> f64 {
    // p = [amplitude, phi0, c]; phase scans fix the period at 2π
    p[2] + p[0] / 2.0 * (x - p[1]).cos()
}

fn sinusoid_jac(p: &[f64], x: f64, row: &mut [f64]) {
    row[0] = 0.5 * (x - p[1]).cos();
    row[1] = 0.5 * p[0] * (x - p[1]).sin();
    row[2] = 1.0;
}

fn erf_step_eval(p: &[f64], x: f64) -> f64 {
    // p = [a, b, s, t_c]
    0.5 * (p[0] + p[1] * libm::erf(p[2] * (x - p[3])))
}

fn erf_step_jac(p: &[f64], x: f64, row: &mut [f64]) {
    let u = p[2] * (x - p[3]);
    let g = 2.0 / std::f64::consts::PI.sqrt() * (-u * u).exp();
    row[0] = 0.5;
    row[1] = 0.5 * libm::erf(u);
    row[2] = 0.5 * p[1] * (x - p[3]) * g;
    row[3] = -0.5 * p[1] * p[2] * g;
}

fn gaussian_eval(p: &[f64], x: f64) -> f64 {
    // p = [amplitude, x0, sigma_g, c]
    let u = (x - p[1]) / p[2];
    p[3] + p[0] * (-0.5 * u * u).exp()
}

fn gaussian_jac(p: &[f64], x: f64, row: &mut [f64]) {
    let u = (x - p[1]) / p[2];
    let e = (-0.5 * u * u).exp();
    row[0] = e;
    row[1] = p[0] * e * u / p[2];
    row[2] = p[0] * e * u * u / p[2];
    row[3] = 1.0;
}

/// The transit-Rabi lineshape y = c + a·cos²(ζ(t)/2).
pub fn transit_rabi_model() -> FitModel {
    FitModel {
        name: "transit_rabi",
        params: vec![
            ParamSpec { name: "omega0", unit: "rad/s", transform: Transform::LogPositive },
            ParamSpec { name: "chi", unit: "1/s", transform: Transform::LogPositive },
            ParamSpec { name: "t0", unit: "s", transform: Transform::Free },
            ParamSpec { name: "a", unit: "", transform: Transform::Free },
            ParamSpec { name: "c", unit: "", transform: Transform::Free },
        ],
        eval: transit_rabi_eval,
        jacobian: None,
    }
}

/// Fixed-period sinusoid y = c + (A/2)·cos(x − φ₀) for phase scans.
pub fn sinusoid_model() -> FitModel {
    FitModel {
        name: "sinusoid",
        params: vec![
            ParamSpec { name: "amplitude", unit: "", transform: Transform::Free },
            ParamSpec { name: "phi0", unit: "rad", transform: Transform::Free },
            ParamSpec { name: "c", unit: "", transform: Transform::Free },
        ],
        eval: sinusoid_eval,
        jacobian: Some(sinusoid_jac),
    }
}

/// y = ½(a + b·erf(s(t − t_c))).
pub fn erf_step_model() -> FitModel {
    FitModel {
        name: "erf_step",
        params: vec![
            ParamSpec { name: "a", unit: "", transform: Transform::Free },
            ParamSpec { name: "b", unit: "", transform: Transform::Free },
            ParamSpec { name: "s", unit: "1/s", transform: Transform::Free },
            ParamSpec { name: "t_c", unit: "s", transform: Transform::Free },
        ],
        eval: erf_step_eval,
        jacobian: Some(erf_step_jac),
    }
}

/// y = c + A·exp(−(x−x₀)²/2σ_g²).
pub fn gaussian_model() -> FitModel {
    FitModel {
        name: "gaussian",
        params: vec![
            ParamSpec { name: "amplitude", unit: "", transform: Transform::Free },
            ParamSpec { name: "x0", unit: "", transform: Transform::Free },
            ParamSpec { name: "sigma_g", unit: "", transform: Transform::LogPositive },
            ParamSpec { name: "c", unit: "", transform: Transform::Free },
        ],
        eval: gaussian_eval,
        jacobian: Some(gaussian_jac),
    }
}

/// All registered models.
pub fn model_registry() -> Vec<FitModel> {
    vec![transit_rabi_model(), sinusoid_model(), erf_step_model(), gaussian_model()]
}

/// Look a model up by name.
pub fn model_by_name(name: &str) -> Result<FitModel> {
    model_registry()
        .into_iter()
        .find(|m| m.name == name)
        .ok_or_else(|| Error::Config(format!("unknown fit model `{name}`")))
}

// ---------------------------------------------------------------------------
// Fit result
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct FitParam {
    pub name: String,
    pub value: f64,
    pub sigma: f64,
    pub unit: String,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: String,
    pub params: Vec<FitParam>,
    /// Row-major p×p covariance.
    pub covariance: Vec<f64>,
    pub chi2_reduced: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Parameters along numerically null directions of JᵀWJ.
    pub unidentifiable: Vec<String>,
    /// χ² after each accepted iteration (never increases).
    pub chi2_history: Vec<f64>,
}

impl FitResult {
    pub fn value(&self, name: &str) -> Option<f64> {
        self.params.iter().find(|p| p.name == name).map(|p| p.value)
    }

    pub fn sigma(&self, name: &str) -> Option<f64> {
        self.params.iter().find(|p| p.name == name).map(|p| p.sigma)
    }

    pub fn values(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.value).collect()
    }

    pub fn to_json(&self) -> String {
        let mut params = serde_json::Map::new();
        for p in &self.params {
            params.insert(
                p.name.clone(),
                serde_json::json!({ "value": p.value, "sigma": p.sigma, "unit": p.unit }),
            );
        }
        let v = serde_json::json!({
            "model": self.model,
            "params": params,
            "covariance": self.covariance,
            "chi2_reduced": self.chi2_reduced,
            "converged": self.converged,
            "iterations": self.iterations,
            "unidentifiable": self.unidentifiable,
        });
        serde_json::to_string_pretty(&v).expect("serializable")
    }
}

// ---------------------------------------------------------------------------
// Levenberg-Marquardt
// ---------------------------------------------------------------------------

const MAX_ITERATIONS: usize = 500;
const CHI2_REL_TOL: f64 = 1e-10;
const GRAD_TOL: f64 = 1e-12;
const SV_CUTOFF: f64 = 1e-12;

fn to_internal(model: &FitModel, external: &[f64]) -> Result<Vec<f64>> {
    external
        .iter()
        .zip(&model.params)
        .map(|(&v, spec)| match spec.transform {
            Transform::Free => Ok(v),
            Transform::LogPositive => {
                if v <= 0.0 {
                    Err(Error::invalid(format!("{} must be positive, got {v}", spec.name)))
                } else {
                    Ok(v.ln())
                }
            }
        })
        .collect()
}

fn to_external(model: &FitModel, internal: &[f64]) -> Vec<f64> {
    internal
        .iter()
        .zip(&model.params)
        .map(|(&u, spec)| match spec.transform {
            Transform::Free => u,
            Transform::LogPositive => u.exp(),
        })
        .collect()
}

/// Weighted LM fit. Convergence: relative χ² change < 1e-10 on an accepted
/// step or scaled gradient norm < 1e-12; non-convergence is flagged on the
/// result rather than returned as an error.
pub fn fit_curve(
    model: &FitModel,
    xs: &[f64],
    ys: &[f64],
    sigmas: &[f64],
    guess: &[f64],
) -> Result<FitResult> {
    let n = xs.len();
    let p = model.n_params();
    if ys.len() != n || sigmas.len() != n {
        return Err(Error::invalid("x, y and σ must have equal length"));
    }
    if n < p {
        return Err(Error::invalid(format!("need ≥ {p} points, got {n}")));
    }
    if guess.len() != p {
        return Err(Error::invalid(format!("guess needs {p} parameters")));
    }
    if sigmas.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::invalid("σ must be finite and positive"));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite data"));
    }

    let mut u = to_internal(model, guess)?;
    let chi2_of = |u: &[f64]| -> f64 {
        let theta = to_external(model, u);
        xs.iter()
            .zip(ys)
            .zip(sigmas)
            .map(|((&x, &y), &s)| {
                let r = (y - model.eval(&theta, x)) / s;
                r * r
            })
            .sum()
    };

    let mut chi2 = chi2_of(&u);
    let mut chi2_history = vec![chi2];
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;

    for it in 0..MAX_ITERATIONS {
        iterations = it + 1;
        let theta = to_external(model, &u);
        // scaled Jacobian wrt internal parameters and weighted residual
        let mut jac = DMatrix::zeros(n, p);
        let mut resid = DVector::zeros(n);
        let mut row = vec![0.0; p];
        for i in 0..n {
            model.jacobian_row(&theta, xs[i], &mut row);
            for j in 0..p {
                let chain = match model.params[j].transform {
                    Transform::Free => 1.0,
                    Transform::LogPositive => theta[j],
                };
                jac[(i, j)] = row[j] * chain / sigmas[i];
            }
            resid[i] = (ys[i] - model.eval(&theta, xs[i])) / sigmas[i];
        }
        let jtj = jac.transpose() * &jac;
        let grad = jac.transpose() * &resid;
        // column-scaled gradient relative to the residual norm: the cosine
        // between the residual and the steepest-descent direction; unit-free,
        // so parameter-scale disparities cannot mask stationarity
        let grad_scaled = (0..p)
            .map(|j| grad[j].abs() / jtj[(j, j)].sqrt().max(1e-300))
            .fold(0.0_f64, f64::max)
            / chi2.max(1e-300).sqrt();
        if chi2 <= 1e-20 * n as f64 || grad_scaled < GRAD_TOL {
            converged = true;
            break;
        }

        let mut accepted = false;
        for _ in 0..40 {
            let mut damped = jtj.clone();
            for j in 0..p {
                damped[(j, j)] += lambda * jtj[(j, j)].max(1e-30);
            }
            let step = match damped.clone().cholesky() {
                Some(ch) => ch.solve(&grad),
                None => {
                    lambda = (lambda * 2.0).min(1e14);
                    continue;
                }
            };
            let u_new: Vec<f64> = u.iter().zip(step.iter()).map(|(a, d)| a + d).collect();
            let chi2_new = chi2_of(&u_new);
            if chi2_new.is_finite() && chi2_new < chi2 {
                let rel = (chi2 - chi2_new) / chi2.max(1e-300);
                u = u_new;
                chi2 = chi2_new;
                chi2_history.push(chi2);
                lambda = (lambda / 3.0).max(1e-14);
                accepted = true;
                if rel < CHI2_REL_TOL {
                    converged = true;
                }
                break;
            }
            lambda = (lambda * 2.0).min(1e14);
        }
        if !accepted {
            // damping saturated without improvement: treat as converged when
            // the scaled gradient is already small, otherwise flag
            converged = grad_scaled < 1e-6;
            break;
        }
        if converged {
            break;
        }
    }

    let theta = to_external(model, &u);
    let (covariance, sigmas_out, unidentifiable) = covariance_at(model, &theta, xs, sigmas);
    let dof = (n - p).max(1) as f64;
    let params = theta
        .iter()
        .zip(&model.params)
        .zip(&sigmas_out)
        .map(|((&value, spec), &sigma)| FitParam {
            name: spec.name.into(),
            value,
            sigma,
            unit: spec.unit.into(),
        })
        .collect();
    Ok(FitResult {
        model: model.name.into(),
        params,
        covariance,
        chi2_reduced: chi2 / dof,
        converged,
        iterations,
        unidentifiable,
        chi2_history,
    })
}

/// Covariance (JᵀWJ)⁻¹ in external parameter space via SVD pseudo-inverse.
///
/// The normal matrix is brought to correlation form first (columns scaled by
/// √diag), so the null-direction cutoff responds to genuine degeneracy, not
/// to parameter-unit disparities. Parameters dominating null directions are
/// reported as unidentifiable with infinite σ.
fn covariance_at(
    model: &FitModel,
    theta: &[f64],
    xs: &[f64],
    sigmas: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<String>) {
    let n = xs.len();
    let p = model.n_params();
    let mut jac = DMatrix::zeros(n, p);
    let mut row = vec![0.0; p];
    for i in 0..n {
        model.jacobian_row(theta, xs[i], &mut row);
        for j in 0..p {
            jac[(i, j)] = row[j] / sigmas[i];
        }
    }
    let jtj = jac.transpose() * &jac;

    let mut unidentifiable = Vec::new();
    let mut scale = vec![1.0; p];
    let mut absent = vec![false; p];
    let sens_max =
        (0..p).map(|j| jtj[(j, j)]).fold(0.0_f64, f64::max).sqrt().max(1e-300);
    for j in 0..p {
        let d = jtj[(j, j)];
        if !d.is_finite() || d.sqrt() <= SV_CUTOFF * sens_max {
            // the model response is numerically blind to this parameter
            absent[j] = true;
            unidentifiable.push(model.params[j].name.to_string());
        } else {
            scale[j] = d.sqrt();
        }
    }
    let mut corr = DMatrix::zeros(p, p);
    for i in 0..p {
        for j in 0..p {
            corr[(i, j)] = if absent[i] || absent[j] {
                if i == j {
                    1.0
                } else {
                    0.0
                }
            } else {
                jtj[(i, j)] / (scale[i] * scale[j])
            };
        }
    }

    let svd = corr.svd(true, true);
    let s_max = svd.singular_values.iter().fold(0.0_f64, |a, &v| a.max(v));
    let v_t = svd.v_t.as_ref().expect("svd vectors");
    let u_m = svd.u.as_ref().expect("svd vectors");
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s <= SV_CUTOFF * s_max.max(1e-300) {
            let mut best = 0;
            for j in 0..p {
                if v_t[(k, j)].abs() > v_t[(k, best)].abs() {
                    best = j;
                }
            }
            let name = model.params[best].name.to_string();
            if !unidentifiable.contains(&name) {
                unidentifiable.push(name);
            }
        }
    }

    // pseudo-inverse in the scaled space, then undo the scaling
    let mut cov = DMatrix::zeros(p, p);
    for k in 0..svd.singular_values.len() {
        let s = svd.singular_values[k];
        if s > SV_CUTOFF * s_max.max(1e-300) {
            for i in 0..p {
                for j in 0..p {
                    cov[(i, j)] += v_t[(k, i)] * u_m[(j, k)] / s;
                }
            }
        }
    }
    let mut cov = (&cov + cov.transpose()) * 0.5;
    for i in 0..p {
        for j in 0..p {
            if absent[i] || absent[j] {
                cov[(i, j)] = 0.0;
            } else {
                cov[(i, j)] /= scale[i] * scale[j];
            }
        }
    }
    let sigmas_out: Vec<f64> = (0..p)
        .map(|j| {
            if unidentifiable.contains(&model.params[j].name.to_string()) {
                f64::INFINITY
            } else {
                cov[(j, j)].max(0.0).sqrt()
            }
        })
        .collect();
    (cov.as_slice().to_vec(), sigmas_out, unidentifiable)
}

/// Fit a scan directly, using [`initial_guess`] when no guess is given.
pub fn fit_scan(model: &FitModel, scan: &ScanResult, guess: Option<&[f64]>) -> Result<FitResult> {
    let xs = scan.xs();
    let ys = scan.ys();
    let sigmas = scan.sigmas();
    match guess {
        Some(g) => fit_curve(model, &xs, &ys, &sigmas, g),
        None => {
            let (g, _) = initial_guess(model, &xs, &ys)?;
            fit_curve(model, &xs, &ys, &sigmas, &g)
        }
    }
}

// ---------------------------------------------------------------------------
// Initial guesses
// ---------------------------------------------------------------------------

/// Heuristic starting parameters. The flag is true for degenerate
/// (zero-variance) data, where amplitudes are guessed as 0.
pub fn initial_guess(model: &FitModel, xs: &[f64], ys: &[f64]) -> Result<(Vec<f64>, bool)> {
    if xs.len() < 4 || xs.len() != ys.len() {
        return Err(Error::invalid("need ≥ 4 points for an initial guess"));
    }
    let y_min = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let y_max = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = y_max - y_min;
    let x_lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let x_hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let x_span = (x_hi - x_lo).max(1e-300);
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let degenerate = range < 1e-12 * y_max.abs().max(1.0);

    let guess = match model.name {
        "erf_step" => {
            let k = (xs.len() / 5).max(1);
            let lo_side = ys[..k].iter().sum::<f64>() / k as f64;
            let hi_side = ys[ys.len() - k..].iter().sum::<f64>() / k as f64;
            let a = lo_side + hi_side;
            let b = if degenerate { 0.0 } else { hi_side - lo_side };
            // t_c at the steepest gradient
            let mut best = (0.0, xs[xs.len() / 2]);
            for w in 1..xs.len() {
                let g = (ys[w] - ys[w - 1]) / (xs[w] - xs[w - 1]).max(1e-300);
                if g.abs() > best.0 {
                    best = (g.abs(), 0.5 * (xs[w] + xs[w - 1]));
                }
            }
            let s = if b.abs() > 1e-12 {
                (std::f64::consts::PI.sqrt() * best.0 / b.abs()).max(0.1 / x_span)
            } else {
                1.0 / x_span
            };
            vec![a, b, s, best.1]
        }
        "gaussian" => {
            // baseline from the outermost points on both ends; the peak is
            // whichever extreme deviates most from it (robust for dips that
            // sit off-center in the scan window)
            let k = (xs.len() / 5).clamp(1, 5);
            let baseline = (ys[..k].iter().sum::<f64>() + ys[ys.len() - k..].iter().sum::<f64>())
                / (2 * k) as f64;
            let positive = (y_max - baseline) >= (baseline - y_min);
            let amp = if degenerate {
                0.0
            } else if positive {
                y_max - baseline
            } else {
                y_min - baseline
            };
            // moments on the peak-side weights
            let weight = |y: f64| {
                if positive {
                    (y - baseline).max(0.0)
                } else {
                    (baseline - y).max(0.0)
                }
            };
            let mut wsum = 0.0;
            let mut x1 = 0.0;
            for (&x, &y) in xs.iter().zip(ys) {
                wsum += weight(y);
                x1 += weight(y) * x;
            }
            let x0 = if wsum > 0.0 { x1 / wsum } else { 0.5 * (x_lo + x_hi) };
            let mut m2 = 0.0;
            for (&x, &y) in xs.iter().zip(ys) {
                m2 += weight(y) * (x - x0) * (x - x0);
            }
            let sigma_g = if wsum > 0.0 && m2 > 0.0 {
                (m2 / wsum).sqrt().clamp(x_span / xs.len() as f64, x_span)
            } else {
                0.25 * x_span
            };
            vec![amp, x0, sigma_g, baseline]
        }
        "sinusoid" => {
            let amp = if degenerate { 0.0 } else { range };
            let mut sc = 0.0;
            let mut cc = 0.0;
            for (&x, &y) in xs.iter().zip(ys) {
                sc += (y - mean) * x.sin();
                cc += (y - mean) * x.cos();
            }
            vec![amp, sc.atan2(cc), mean]
        }
        "transit_rabi" => {
            if degenerate {
                vec![1.0 / x_span, 1.0 / x_span, 0.5 * (x_lo + x_hi), 0.0, mean]
            } else {
                transit_rabi_guess(xs, ys, y_min, range, x_lo, x_hi)
            }
        }
        other => return Err(Error::Config(format!("no guess heuristic for `{other}`"))),
    };
    Ok((guess, degenerate))
}

/// Starting parameters for the transit-Rabi model from the oscillation
/// structure: the population passes an extremum each time the accumulated
/// phase ζ(t) advances by π, so the extrema positions pin t₀ (where half
/// the total phase has accrued) and χ (through the erf envelope), while the
/// extrema count plus the final value fix the total rotation and hence Ω₀.
fn transit_rabi_guess(
    xs: &[f64],
    ys: &[f64],
    y_min: f64,
    range: f64,
    x_lo: f64,
    x_hi: f64,
) -> Vec<f64> {
    const PI: f64 = std::f64::consts::PI;
    let x_span = (x_hi - x_lo).max(1e-300);
    // light smoothing against projection noise; short enough to preserve
    // oscillations down to a handful of samples per cycle
    let win = 3usize.min(ys.len());
    let smooth: Vec<f64> = (0..ys.len())
        .map(|i| {
            let lo = i.saturating_sub(win / 2);
            let hi = (i + win / 2 + 1).min(ys.len());
            ys[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect();
    let norm: Vec<f64> = smooth.iter().map(|&y| (y - y_min) / range).collect();

    // hysteresis walk recording interior extrema positions
    let hysteresis = 0.2;
    let mut extrema_x: Vec<f64> = Vec::new();
    let mut anchor = norm[0];
    let mut anchor_x = xs[0];
    let mut rising = false;
    for (&x, &y) in xs.iter().zip(&norm) {
        if rising {
            if y > anchor {
                anchor = y;
                anchor_x = x;
            } else if anchor - y > hysteresis {
                extrema_x.push(anchor_x);
                rising = false;
                anchor = y;
                anchor_x = x;
            }
        } else if y < anchor {
            anchor = y;
            anchor_x = x;
        } else if y - anchor > hysteresis {
            extrema_x.push(anchor_x);
            rising = true;
            anchor = y;
            anchor_x = x;
        }
    }
    let k = extrema_x.len();

    // total rotation: residual phase beyond the last counted extremum
    let frac = norm.last().unwrap().clamp(0.0, 1.0).sqrt();
    let residual =
        if k.is_multiple_of(2) { 2.0 * frac.acos() } else { 2.0 * frac.asin() };
    let zeta_end = k as f64 * PI + residual;

    // fallbacks when there is not enough oscillation structure
    let fallback_t0 = extrema_x.first().copied().unwrap_or(0.5 * (x_lo + x_hi));
    let fallback_chi = 4.0 / x_span;

    // t₀: where ζ reaches ζ_end/2, interpolated between bracketing extrema
    let half = zeta_end / 2.0;
    let t0 = if k >= 2 && half > PI && half < k as f64 * PI {
        let idx = (half / PI).floor() as usize; // ζ(extrema_x[idx-1]) = idx·π
        let lo = extrema_x[idx - 1];
        let hi = extrema_x[idx.min(k - 1)];
        lo + (hi - lo) * (half - idx as f64 * PI) / PI
    } else if k >= 1 {
        fallback_t0
    } else {
        0.5 * (x_lo + x_hi)
    };

    // χ from the best-conditioned extremum on each side of t₀:
    // erf(χ(t_k − t₀)) = 2kπ/ζ_end − 1
    let mut chi_estimates: Vec<f64> = Vec::new();
    for (i, &tx) in extrema_x.iter().enumerate() {
        let target = 2.0 * (i + 1) as f64 * PI / zeta_end - 1.0;
        if target.abs() < 0.9 && (tx - t0).abs() > 1e-4 * x_span {
            let u = erf_inverse(target);
            let est = u / (tx - t0);
            if est.is_finite() && est > 0.0 {
                chi_estimates.push(est);
            }
        }
    }
    let chi = if chi_estimates.is_empty() {
        fallback_chi
    } else {
        // geometric mean tames outliers from mislocated extrema
        let log_mean =
            chi_estimates.iter().map(|c| c.ln()).sum::<f64>() / chi_estimates.len() as f64;
        log_mean.exp()
    };

    // ζ(∞) = (Ω₀/χ)√π·(1 + erf(χ t₀)) → Ω₀
    let f_end = (libm::erf(chi * t0) - libm::erf(chi * (t0 - x_hi))).max(1e-3);
    let omega0 = (zeta_end * chi / (PI.sqrt() * f_end)).max(0.1 * chi);
    vec![omega0, chi, t0, range, y_min]
}

/// Inverse error function by bisection (initial-guess plumbing only).
fn erf_inverse(y: f64) -> f64 {
    let y = y.clamp(-0.999999, 0.999999);
    let (mut lo, mut hi) = (-6.0_f64, 6.0_f64);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if libm::erf(mid) < y {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use std::f64::consts::PI;

    const TAU: f64 = 2.0 * PI;

    fn synth(model: &FitModel, truth: &[f64], xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| model.eval(truth, x)).collect()
    }

    #[test]
    fn registry_has_four_models() {
        let names: Vec<&str> = model_registry().iter().map(|m| m.name).collect();
        assert_eq!(names, ["transit_rabi", "sinusoid", "erf_step", "gaussian"]);
    }

    #[test]
    fn model_asymptotes_and_peaks() {
        // erf_step limits: (a−b)/2 and (a+b)/2
        let erf = erf_step_model();
        let p = [0.9, 0.8, 500.0, 0.01];
        assert_relative_eq!(erf.eval(&p, -1.0), (0.9 - 0.8) / 2.0, max_relative = 1e-10);
        assert_relative_eq!(erf.eval(&p, 1.0), (0.9 + 0.8) / 2.0, max_relative = 1e-10);
        // gaussian peak: c + A
        let g = gaussian_model();
        assert_relative_eq!(g.eval(&[0.7, 1.5, 0.3, 0.1], 1.5), 0.8, max_relative = 1e-12);
        // transit rabi at t = 0: f = 0 → P = 1 → y = c + a
        let tr = transit_rabi_model();
        assert_relative_eq!(
            tr.eval(&[TAU * 5.669e3, 7753.0, 250e-6, 0.9, 0.05], 0.0),
            0.95,
            max_relative = 1e-12
        );
    }

    #[test]
    fn exact_recovery_all_models() {
        let cases: Vec<(FitModel, Vec<f64>, Vec<f64>)> = vec![
            (
                transit_rabi_model(),
                vec![TAU * 5.669e3, 7753.0, 250e-6, 1.0, 0.0],
                (0..160).map(|k| k as f64 * 500e-6 / 159.0).collect(),
            ),
            (
                sinusoid_model(),
                vec![0.97, 0.6, 0.5],
                (0..80).map(|k| k as f64 * 2.0 * TAU / 79.0).collect(),
            ),
            (
                erf_step_model(),
                vec![1.0, 0.98, 30e3, 120e-6],
                (0..60).map(|k| k as f64 * 250e-6 / 59.0).collect(),
            ),
            (
                gaussian_model(),
                vec![-0.9, 300.0, 800.0, 0.95],
                (0..60).map(|k| -4000.0 + k as f64 * 8000.0 / 59.0).collect(),
            ),
        ];
        for (model, truth, xs) in cases {
            let ys = synth(&model, &truth, &xs);
            let sigmas = vec![0.01; xs.len()];
            let (guess, _) = initial_guess(&model, &xs, &ys).unwrap();
            let fit = fit_curve(&model, &xs, &ys, &sigmas, &guess).unwrap();
            assert!(fit.converged, "{} did not converge", model.name);
            for (got, want) in fit.values().iter().zip(&truth) {
                assert!(
                    (got - want).abs() <= 1e-6 * want.abs().max(1e-3),
                    "{}: {got} vs {want}",
                    model.name
                );
            }
        }
    }

    #[test]
    fn chi2_never_increases() {
        let model = gaussian_model();
        let truth = [0.8, 10.0, 3.0, 0.1];
        let xs: Vec<f64> = (0..50).map(|k| k as f64).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let ys: Vec<f64> = xs
            .iter()
            .map(|&x| model.eval(&truth, x) + 0.03 * rng.random_range(-1.0..1.0))
            .collect();
        let fit =
            fit_curve(&model, &xs, &ys, &vec![0.03; xs.len()], &[0.3, 14.0, 6.0, 0.0]).unwrap();
        for w in fit.chi2_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn constant_data_sinusoid_flags_phase() {
        let xs: Vec<f64> = (0..40).map(|k| k as f64 * 0.3).collect();
        let ys = vec![0.42; 40];
        let model = sinusoid_model();
        let (guess, degenerate) = initial_guess(&model, &xs, &ys).unwrap();
        assert!(degenerate);
        assert_eq!(guess[0], 0.0);
        let fit = fit_curve(&model, &xs, &ys, &vec![0.01; 40], &guess).unwrap();
        let amp = fit.value("amplitude").unwrap();
        assert!(amp.abs() < 1e-9, "amplitude {amp}");
        assert!(fit.unidentifiable.contains(&"phi0".to_string()));
    }

    #[test]
    fn too_few_points_rejected() {
        let model = gaussian_model();
        let e = fit_curve(&model, &[1.0, 2.0], &[0.1, 0.2], &[0.1, 0.1], &[1.0, 1.0, 1.0, 0.0]);
        assert!(e.is_err());
    }

    #[test]
    fn erf_guess_within_twenty_percent() {
        let model = erf_step_model();
        let truth = [1.0, 0.95, 25e3, 140e-6];
        let xs: Vec<f64> = (0..80).map(|k| k as f64 * 300e-6 / 79.0).collect();
        let ys = synth(&model, &truth, &xs);
        let (guess, degenerate) = initial_guess(&model, &xs, &ys).unwrap();
        assert!(!degenerate);
        for (g, t) in guess.iter().zip(&truth) {
            assert!((g - t).abs() <= 0.2 * t.abs(), "guess {g} vs truth {t}");
        }
    }

    #[test]
    fn gaussian_guess_center_within_grid_step() {
        let model = gaussian_model();
        let truth = [-0.8, 137.0, 300.0, 0.9];
        let xs: Vec<f64> = (0..61).map(|k| -1500.0 + k as f64 * 50.0).collect();
        let ys = synth(&model, &truth, &xs);
        let (guess, _) = initial_guess(&model, &xs, &ys).unwrap();
        assert!((guess[1] - truth[1]).abs() <= 50.0, "center guess {}", guess[1]);
    }

    #[test]
    fn noisy_sinusoid_coverage_is_sane() {
        // pooled 1σ coverage over 50 fits lands near 68%
        let model = sinusoid_model();
        let truth = [0.984, 1.1, 0.492];
        let xs: Vec<f64> = (0..60).map(|k| k as f64 * 2.0 * TAU / 59.0).collect();
        let sigma = 0.02;
        let mut hits = 0;
        let mut total = 0;
        for seed in 0..50 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let ys: Vec<f64> = xs
                .iter()
                .map(|&x| {
                    // Box-Muller normal noise
                    let u1: f64 = rng.random_range(1e-12..1.0);
                    let u2: f64 = rng.random_range(0.0..1.0);
                    let z = (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos();
                    model.eval(&truth, x) + sigma * z
                })
                .collect();
            let (guess, _) = initial_guess(&model, &xs, &ys).unwrap();
            let fit = fit_curve(&model, &xs, &ys, &vec![sigma; xs.len()], &guess).unwrap();
            for (k, t) in truth.iter().enumerate() {
                let p = &fit.params[k];
                total += 1;
                if (p.value - t).abs() <= p.sigma {
                    hits += 1;
                }
            }
        }
        let coverage = hits as f64 / total as f64;
        assert!((0.55..0.80).contains(&coverage), "coverage {coverage}");
    }

    #[test]
    fn json_round_trip_fields() {
        let model = gaussian_model();
        let truth = [0.5, 1.0, 2.0, 0.1];
        let xs: Vec<f64> = (0..30).map(|k| k as f64 * 0.3 - 4.0).collect();
        let ys = synth(&model, &truth, &xs);
        let fit = fit_curve(&model, &xs, &ys, &vec![0.01; 30], &truth).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&fit.to_json()).unwrap();
        assert_eq!(parsed["model"], "gaussian");
        assert!(parsed["params"]["x0"]["value"].as_f64().is_some());
        assert_eq!(parsed["covariance"].as_array().unwrap().len(), 16);
    }
}
