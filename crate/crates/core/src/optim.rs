//! Parameter updates and curve fitting: Adam for the sequence model, and the
//! calibration fitters that turn severity scores into mortality
//! probabilities — maximum-likelihood logistic regression via damped Newton
//! iterations, and a Levenberg-Marquardt least-squares fitter used for the
//! nonlinear score curve.
//!
//! Both calibration routes can fit the same logistic problem: running LM on
//! deviance residuals minimizes exactly the negative log likelihood, so the
//! two fitters must agree; that agreement is tested.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::{Gradients, ModelParams};

/// Adam hyperparameters. The learning rate and batch size are the protocol's
/// fixed values; the moment decades and epsilon follow the optimizer's
/// conventional defaults.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.0005,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Optimizer state: step count plus first/second moment accumulators shaped
/// like the parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first_moment: ModelParams,
    second_moment: ModelParams,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ModelParams) -> Self {
        AdamState {
            config,
            step: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
        }
    }
}

/// One bias-corrected Adam update, in place.
///
/// A non-finite gradient rejects the whole step (parameters and moments
/// untouched) and surfaces the offending block by name. The missing-token
/// embedding row stays zero.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut AdamState,
) -> Result<()> {
    for (name, block) in grads.blocks() {
        if block.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite gradient in block '{name}' at step {}",
                state.step + 1
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let cfg = state.config;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);

    let mut m_blocks = state.first_moment.blocks_mut();
    let mut v_blocks = state.second_moment.blocks_mut();
    let g_blocks = grads.blocks();
    for (b, (_, p_block)) in params.blocks_mut().into_iter().enumerate() {
        let m_block = &mut m_blocks[b].1;
        let v_block = &mut v_blocks[b].1;
        let g_block = g_blocks[b].1;
        for i in 0..p_block.len() {
            let g = g_block[i];
            m_block[i] = cfg.beta1 * m_block[i] + (1.0 - cfg.beta1) * g;
            v_block[i] = cfg.beta2 * v_block[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m_block[i] / bias1;
            let v_hat = v_block[i] / bias2;
            p_block[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    params.embedding.row_mut(0).fill(0.0);
    Ok(())
}

/// Which calibration curve maps a severity score to a probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CalibrationKind {
    /// logit(p) = b0 + b1 * score
    LogisticLinear,
    /// logit(p) = g0 + g1 * score + g2 * ln(score + 1)
    SapsCurve,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FitDiagnostics {
    pub iterations: usize,
    pub final_gradient_norm: f64,
    pub final_cost: f64,
    /// Perfect separation was detected and coefficients were bounded.
    pub separated: bool,
}

/// A fitted severity-score calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationModel {
    pub kind: CalibrationKind,
    pub coefficients: Vec<f64>,
    pub diagnostics: FitDiagnostics,
}

impl CalibrationModel {
    fn logit(&self, score: f64) -> Result<f64> {
        match self.kind {
            CalibrationKind::LogisticLinear => {
                Ok(self.coefficients[0] + self.coefficients[1] * score)
            }
            CalibrationKind::SapsCurve => {
                if score < 0.0 {
                    return Err(Error::data(format!(
                        "severity score {score} is negative; the curve needs ln(score + 1)"
                    )));
                }
                Ok(self.coefficients[0]
                    + self.coefficients[1] * score
                    + self.coefficients[2] * (score + 1.0).ln())
            }
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Map a severity score through a fitted calibration into (0, 1).
pub fn severity_to_probability(score: f64, calib: &CalibrationModel) -> Result<f64> {
    Ok(sigmoid(calib.logit(score)?).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
}

/// Solve a small dense linear system by Gaussian elimination with partial
/// pivoting. Returns None if the matrix is numerically singular.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for k in col + 1..n {
            acc -= a[col][k] * x[k];
        }
        x[col] = acc / a[col][col];
        if !x[col].is_finite() {
            return None;
        }
    }
    Some(x)
}

fn neg_log_likelihood(beta: &[f64; 2], scores: &[f64], outcomes: &[u8]) -> f64 {
    scores
        .iter()
        .zip(outcomes)
        .map(|(&s, &y)| {
            let eta = beta[0] + beta[1] * s;
            // log(1 + e^eta) - y*eta, in a stable form
            let softplus = if eta > 0.0 {
                eta + (-eta).exp().ln_1p()
            } else {
                eta.exp().ln_1p()
            };
            softplus - f64::from(y) * eta
        })
        .sum()
}

/// Coefficient bound (on standardized scores) beyond which the data are
/// treated as perfectly separated. A per-SD log odds of 15 is far past any
/// plausible fit; truly separated data sail through it long before the
/// gradient can shrink below tolerance.
const SEPARATION_BOUND: f64 = 15.0;

/// Maximum-likelihood logistic regression of binary outcomes on one score,
/// by damped Newton iterations to a gradient norm below 1e-8.
///
/// Scores are standardized internally for conditioning; coefficients are
/// reported on the natural scale. Perfect separation triggers a
/// bounded-coefficient fallback flagged in the diagnostics.
pub fn fit_logistic(scores: &[f64], outcomes: &[u8]) -> Result<CalibrationModel> {
    if scores.len() != outcomes.len() {
        return Err(Error::config("scores and outcomes differ in length"));
    }
    let positives = outcomes.iter().filter(|&&y| y == 1).count();
    if positives == 0 || positives == outcomes.len() {
        return Err(Error::data(
            "logistic fit needs both outcome classes present",
        ));
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / scores.len() as f64;
    if var == 0.0 {
        return Err(Error::data("logistic fit needs at least two distinct scores"));
    }
    let sd = var.sqrt();
    let std_scores: Vec<f64> = scores.iter().map(|s| (s - mean) / sd).collect();

    let base = positives as f64 / outcomes.len() as f64;
    let mut beta = [(base / (1.0 - base)).ln(), 0.0];
    let mut nll = neg_log_likelihood(&beta, &std_scores, outcomes);
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    let mut separated = false;

    for _ in 0..100 {
        iterations += 1;
        let mut g = [0.0f64; 2];
        let mut h = [[0.0f64; 2]; 2];
        for (&s, &y) in std_scores.iter().zip(outcomes) {
            let p = sigmoid(beta[0] + beta[1] * s);
            let r = p - f64::from(y);
            g[0] += r;
            g[1] += r * s;
            let w = (p * (1.0 - p)).max(1e-12);
            h[0][0] += w;
            h[0][1] += w * s;
            h[1][1] += w * s * s;
        }
        h[1][0] = h[0][1];
        grad_norm = g[0].abs().max(g[1].abs());
        if grad_norm < 1e-8 {
            break;
        }
        let delta = solve_dense(vec![h[0].to_vec(), h[1].to_vec()], g.to_vec())
            .ok_or_else(|| Error::numeric("singular Hessian in logistic fit"))?;

        // damped step: halve until the objective stops increasing
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let candidate = [beta[0] - alpha * delta[0], beta[1] - alpha * delta[1]];
            let cand_nll = neg_log_likelihood(&candidate, &std_scores, outcomes);
            if cand_nll <= nll {
                beta = candidate;
                nll = cand_nll;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
        if beta[0].abs() > SEPARATION_BOUND || beta[1].abs() > SEPARATION_BOUND {
            separated = true;
            beta[0] = beta[0].clamp(-SEPARATION_BOUND, SEPARATION_BOUND);
            beta[1] = beta[1].clamp(-SEPARATION_BOUND, SEPARATION_BOUND);
            break;
        }
    }

    // back to the natural score scale
    let b1 = beta[1] / sd;
    let b0 = beta[0] - beta[1] * mean / sd;
    Ok(CalibrationModel {
        kind: CalibrationKind::LogisticLinear,
        coefficients: vec![b0, b1],
        diagnostics: FitDiagnostics {
            iterations,
            final_gradient_norm: grad_norm,
            final_cost: nll,
            separated,
        },
    })
}

#[derive(Debug, Clone, Copy)]
pub struct LmOptions {
    pub initial_lambda: f64,
    pub max_iterations: usize,
    pub relative_tolerance: f64,
    /// Stop outright once the cost falls this low (exact-fit problems).
    pub absolute_tolerance: f64,
    pub max_lambda: f64,
    /// Verify the Jacobian against finite differences at the initial point.
    pub check_jacobian: bool,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions {
            initial_lambda: 1e-3,
            max_iterations: 200,
            relative_tolerance: 1e-10,
            absolute_tolerance: 1e-16,
            max_lambda: 1e12,
            check_jacobian: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmFit {
    pub params: Vec<f64>,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after every accepted iteration, nonincreasing by construction.
    pub cost_history: Vec<f64>,
    pub iterations: usize,
    pub final_lambda: f64,
}

fn cost_of(residuals: &[f64]) -> f64 {
    residuals.iter().map(|r| r * r).sum()
}

/// Levenberg-Marquardt nonlinear least squares.
///
/// Damped Gauss-Newton with a multiplicative lambda schedule: start 1e-3,
/// x10 on a rejected step, /10 on an accepted one. Terminates when an
/// accepted step improves the cost by less than `relative_tolerance` or the
/// iteration budget runs out; cost never increases across accepted steps.
pub fn lm_fit(
    residual_fn: &dyn Fn(&[f64]) -> Vec<f64>,
    jacobian_fn: &dyn Fn(&[f64]) -> Vec<Vec<f64>>,
    initial: &[f64],
    options: LmOptions,
) -> Result<LmFit> {
    let n = initial.len();
    if n == 0 {
        return Err(Error::config("LM fit needs at least one parameter"));
    }
    let mut x = initial.to_vec();
    let mut residuals = residual_fn(&x);
    if residuals.is_empty() {
        return Err(Error::config("LM fit needs at least one residual"));
    }
    let jac = jacobian_fn(&x);
    if jac.len() != residuals.len() || jac.iter().any(|row| row.len() != n) {
        return Err(Error::config(format!(
            "jacobian shape {}x{} does not match {} residuals over {} parameters",
            jac.len(),
            jac.first().map_or(0, Vec::len),
            residuals.len(),
            n
        )));
    }
    if options.check_jacobian {
        verify_jacobian(residual_fn, &x, &residuals, &jac)?;
    }

    let mut cost = cost_of(&residuals);
    let initial_cost = cost;
    let mut cost_history = vec![cost];
    let mut lambda = options.initial_lambda;
    let mut jac = jac;
    let mut iterations = 0;

    while iterations < options.max_iterations {
        iterations += 1;
        // normal equations: (J^T J + lambda I) delta = -J^T r
        let mut jtj = vec![vec![0.0; n]; n];
        let mut jtr = vec![0.0; n];
        for (row, &r) in jac.iter().zip(&residuals) {
            for a in 0..n {
                jtr[a] += row[a] * r;
                for b in a..n {
                    jtj[a][b] += row[a] * row[b];
                }
            }
        }
        for a in 0..n {
            for b in 0..a {
                jtj[a][b] = jtj[b][a];
            }
        }

        let mut accepted = false;
        let mut any_solved = false;
        while lambda <= options.max_lambda {
            let mut damped = jtj.clone();
            for (a, row) in damped.iter_mut().enumerate() {
                row[a] += lambda;
            }
            let rhs: Vec<f64> = jtr.iter().map(|v| -v).collect();
            let Some(delta) = solve_dense(damped, rhs) else {
                lambda *= 10.0;
                continue;
            };
            any_solved = true;
            let candidate: Vec<f64> = x.iter().zip(&delta).map(|(xi, d)| xi + d).collect();
            let cand_residuals = residual_fn(&candidate);
            let cand_cost = cost_of(&cand_residuals);
            if cand_cost.is_finite() && cand_cost <= cost {
                let improvement = if cost > 0.0 { (cost - cand_cost) / cost } else { 0.0 };
                x = candidate;
                residuals = cand_residuals;
                cost = cand_cost;
                cost_history.push(cost);
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if cost <= options.absolute_tolerance
                    || improvement < options.relative_tolerance
                {
                    return Ok(LmFit {
                        params: x,
                        initial_cost,
                        final_cost: cost,
                        cost_history,
                        iterations,
                        final_lambda: lambda,
                    });
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            if any_solved {
                // solvable but no descent direction left: converged
                break;
            }
            return Err(Error::numeric(format!(
                "singular normal equations at max damping \
                 (lambda {lambda:.1e}, cost {cost:.6e}, iteration {iterations})"
            )));
        }
        jac = jacobian_fn(&x);
    }

    Ok(LmFit {
        params: x,
        initial_cost,
        final_cost: cost,
        cost_history,
        iterations,
        final_lambda: lambda,
    })
}

fn verify_jacobian(
    residual_fn: &dyn Fn(&[f64]) -> Vec<f64>,
    x: &[f64],
    residuals: &[f64],
    jac: &[Vec<f64>],
) -> Result<()> {
    let mut probe = x.to_vec();
    for p in 0..x.len() {
        let h = 1e-6 * x[p].abs().max(1.0);
        probe[p] = x[p] + h;
        let up = residual_fn(&probe);
        probe[p] = x[p] - h;
        let down = residual_fn(&probe);
        probe[p] = x[p];
        for i in 0..residuals.len() {
            let numeric = (up[i] - down[i]) / (2.0 * h);
            let analytic = jac[i][p];
            let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1.0);
            if err > 1e-3 {
                return Err(Error::numeric(format!(
                    "jacobian inconsistent with residuals at the initial point: \
                     residual {i}, parameter {p}: analytic {analytic:.6e}, \
                     finite-difference {numeric:.6e}"
                )));
            }
        }
    }
    Ok(())
}

/// Deviance residuals for a binomial model with the given logits. Minimizing
/// their sum of squares is exactly maximum likelihood, which is what lets LM
/// and the Newton logistic fitter share one objective.
fn deviance_residuals(etas: &[f64], outcomes: &[u8]) -> Vec<f64> {
    etas.iter()
        .zip(outcomes)
        .map(|(&eta, &y)| {
            let p = sigmoid(eta).clamp(1e-12, 1.0 - 1e-12);
            let dev = if y == 1 { -2.0 * p.ln() } else { -2.0 * (1.0 - p).ln() };
            let r = dev.max(0.0).sqrt();
            if f64::from(y) >= p {
                r
            } else {
                -r
            }
        })
        .collect()
}

fn deviance_jacobian_rows(etas: &[f64], outcomes: &[u8], features: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let residuals = deviance_residuals(etas, outcomes);
    etas.iter()
        .zip(outcomes)
        .zip(residuals)
        .zip(features)
        .map(|(((&eta, &y), r), feats)| {
            let p = sigmoid(eta);
            // d r / d eta = -(y - p) / r, with the removable singularity at
            // r = 0 filled with its limit 0
            let factor = if r.abs() < 1e-9 {
                0.0
            } else {
                -(f64::from(y) - p) / r
            };
            feats.iter().map(|f| factor * f).collect()
        })
        .collect()
}

/// Fit the nonlinear severity curve logit(p) = g0 + g1*s + g2*ln(s+1) by LM
/// on deviance residuals (equivalent to maximum likelihood).
pub fn fit_saps_curve(scores: &[f64], outcomes: &[u8]) -> Result<CalibrationModel> {
    if scores.len() != outcomes.len() {
        return Err(Error::config("scores and outcomes differ in length"));
    }
    if scores.iter().any(|&s| s < 0.0) {
        return Err(Error::data("severity scores must be nonnegative"));
    }
    let positives = outcomes.iter().filter(|&&y| y == 1).count();
    if positives == 0 || positives == outcomes.len() {
        return Err(Error::data("curve fit needs both outcome classes present"));
    }
    let features: Vec<Vec<f64>> = scores
        .iter()
        .map(|&s| vec![1.0, s, (s + 1.0).ln()])
        .collect();
    let outcomes_owned = outcomes.to_vec();
    let features_for_resid = features.clone();
    let residual_fn = move |gamma: &[f64]| {
        let etas: Vec<f64> = features_for_resid
            .iter()
            .map(|f| gamma[0] * f[0] + gamma[1] * f[1] + gamma[2] * f[2])
            .collect();
        deviance_residuals(&etas, &outcomes_owned)
    };
    let outcomes_owned2 = outcomes.to_vec();
    let features_for_jac = features;
    let jacobian_fn = move |gamma: &[f64]| {
        let etas: Vec<f64> = features_for_jac
            .iter()
            .map(|f| gamma[0] * f[0] + gamma[1] * f[1] + gamma[2] * f[2])
            .collect();
        deviance_jacobian_rows(&etas, &outcomes_owned2, &features_for_jac)
    };

    let base = positives as f64 / outcomes.len() as f64;
    let initial = [(base / (1.0 - base)).ln(), 0.0, 0.0];
    let fit = lm_fit(&residual_fn, &jacobian_fn, &initial, LmOptions::default())?;
    Ok(CalibrationModel {
        kind: CalibrationKind::SapsCurve,
        coefficients: fit.params,
        diagnostics: FitDiagnostics {
            iterations: fit.iterations,
            final_gradient_norm: 0.0,
            final_cost: fit.final_cost,
            separated: false,
        },
    })
}

/// Fit the plain logistic curve by LM on deviance residuals. Exists so the
/// two fitters can be cross-checked on an identical objective.
pub fn fit_logistic_lm(scores: &[f64], outcomes: &[u8]) -> Result<CalibrationModel> {
    let positives = outcomes.iter().filter(|&&y| y == 1).count();
    if positives == 0 || positives == outcomes.len() {
        return Err(Error::data("logistic fit needs both outcome classes present"));
    }
    let features: Vec<Vec<f64>> = scores.iter().map(|&s| vec![1.0, s]).collect();
    let outcomes_owned = outcomes.to_vec();
    let features_r = features.clone();
    let residual_fn = move |beta: &[f64]| {
        let etas: Vec<f64> = features_r
            .iter()
            .map(|f| beta[0] + beta[1] * f[1])
            .collect();
        deviance_residuals(&etas, &outcomes_owned)
    };
    let outcomes_owned2 = outcomes.to_vec();
    let features_j = features;
    let jacobian_fn = move |beta: &[f64]| {
        let etas: Vec<f64> = features_j
            .iter()
            .map(|f| beta[0] + beta[1] * f[1])
            .collect();
        deviance_jacobian_rows(&etas, &outcomes_owned2, &features_j)
    };
    let base = positives as f64 / outcomes.len() as f64;
    let initial = [(base / (1.0 - base)).ln(), 0.0];
    let fit = lm_fit(&residual_fn, &jacobian_fn, &initial, LmOptions::default())?;
    Ok(CalibrationModel {
        kind: CalibrationKind::LogisticLinear,
        coefficients: fit.params,
        diagnostics: FitDiagnostics {
            iterations: fit.iterations,
            final_gradient_norm: 0.0,
            final_cost: fit.final_cost,
            separated: false,
        },
    })
}

/// Render a calibration model as a small text record.
pub fn render_calibration(model: &CalibrationModel) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "#calibration v1");
    let kind = match model.kind {
        CalibrationKind::LogisticLinear => "logistic_linear",
        CalibrationKind::SapsCurve => "saps_curve",
    };
    let _ = writeln!(out, "kind={kind}");
    for (i, c) in model.coefficients.iter().enumerate() {
        let _ = writeln!(out, "coef{i}={}", crate::util::fmt_f64(*c));
    }
    let _ = writeln!(out, "iterations={}", model.diagnostics.iterations);
    let _ = writeln!(out, "final_cost={:.6e}", model.diagnostics.final_cost);
    let _ = writeln!(out, "separated={}", model.diagnostics.separated);
    out
}

pub fn parse_calibration(text: &str) -> Result<CalibrationModel> {
    let mut kind = None;
    let mut coefficients = Vec::new();
    let mut diagnostics = FitDiagnostics::default();
    for line in text.lines().skip(1) {
        let Some((key, value)) = line.split_once('=') else {
            continue;
        };
        match key {
            "kind" => {
                kind = Some(match value {
                    "logistic_linear" => CalibrationKind::LogisticLinear,
                    "saps_curve" => CalibrationKind::SapsCurve,
                    other => return Err(Error::data(format!("unknown calibration kind '{other}'"))),
                })
            }
            "separated" => diagnostics.separated = value == "true",
            "iterations" => diagnostics.iterations = value.parse().unwrap_or(0),
            "final_cost" => diagnostics.final_cost = value.parse().unwrap_or(f64::NAN),
            k if k.starts_with("coef") => coefficients.push(
                value
                    .parse()
                    .map_err(|_| Error::data(format!("bad coefficient '{value}'")))?,
            ),
            _ => {}
        }
    }
    let kind = kind.ok_or_else(|| Error::data("calibration record is missing kind"))?;
    let expected = match kind {
        CalibrationKind::LogisticLinear => 2,
        CalibrationKind::SapsCurve => 3,
    };
    if coefficients.len() != expected {
        return Err(Error::data(format!(
            "calibration record has {} coefficients, expected {expected}",
            coefficients.len()
        )));
    }
    Ok(CalibrationModel {
        kind,
        coefficients,
        diagnostics,
    })
}
