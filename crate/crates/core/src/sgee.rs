//! Smooth-threshold variable selection on top of the bias-corrected
//! equations, with BIC-type tuning over `(lambda, gamma)`.
//!
//! For each non-removed coordinate `delta_i = min(1, lambda / |beta_tilde_i|^(1 + gamma))`.
//! Coordinates with `delta_i = 1` are set to exact zero; the others solve
//! `(1 - delta_i) G_i(b) + delta_i b_i = 0`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gee::{BcGeeProblem, FitResult, GeeConfig};
use crate::geometry::IndexParam;
use crate::smoother::log_spaced;

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdState {
    /// One weight per chart coordinate (the non-removed components, in order).
    pub delta: Vec<f64>,
    /// Positions in the full index vector with `delta == 1`.
    pub hard_zero_set: Vec<usize>,
    pub lambda: f64,
    pub gamma: f64,
}

/// Position in the full vector of chart coordinate `c` when `r` is removed.
#[inline]
fn full_index(c: usize, r: usize) -> usize {
    if c < r {
        c
    } else {
        c + 1
    }
}

pub fn compute_delta(beta_tilde: &IndexParam, lambda: f64, gamma: f64) -> Result<ThresholdState> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Config(format!("gamma must be finite and > 0, got {gamma}")));
    }
    let r = beta_tilde.r();
    let delta: Vec<f64> = beta_tilde
        .reduced()
        .iter()
        .map(|&b| {
            if lambda == 0.0 {
                0.0
            } else if b == 0.0 {
                1.0
            } else {
                (lambda / b.abs().powf(1.0 + gamma)).min(1.0)
            }
        })
        .collect();
    let hard_zero_set = delta
        .iter()
        .enumerate()
        .filter(|&(_, &d)| d == 1.0)
        .map(|(c, _)| full_index(c, r))
        .collect();
    Ok(ThresholdState {
        delta,
        hard_zero_set,
        lambda,
        gamma,
    })
}

/// One evaluated grid point. `bic`/`df` are `None` when the fit failed or
/// did not converge.
#[derive(Debug, Clone, PartialEq)]
pub struct BicEntry {
    pub lambda: f64,
    pub gamma: f64,
    pub bic: Option<f64>,
    pub df: Option<usize>,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SelectionResult {
    pub beta: IndexParam,
    /// Positions with nonzero coefficient, ascending; always contains `r`.
    pub active_set: Vec<usize>,
    pub lambda_star: f64,
    pub gamma_star: f64,
    pub bic_path: Vec<BicEntry>,
    pub fit: FitResult,
    /// Set when every component except the removed one was thresholded.
    pub warning: Option<String>,
}

pub fn active_set(beta: &IndexParam) -> Vec<usize> {
    beta.beta()
        .iter()
        .enumerate()
        .filter(|&(_, &b)| b != 0.0)
        .map(|(i, _)| i)
        .collect()
}

/// `quadratic_form + df * ln(n)`.
pub fn bic_value(quadratic_form: f64, df: usize, n: usize) -> f64 {
    quadratic_form + df as f64 * (n as f64).ln()
}

/// BIC of a fitted index: the link is re-smoothed at `beta` with the
/// problem's bandwidth and weighted by its working covariances.
pub fn bic_score(problem: &BcGeeProblem<'_>, beta: &IndexParam) -> Result<(f64, usize)> {
    let df = active_set(beta).len();
    let qf = problem.quadratic_form(beta)?;
    Ok((bic_value(qf, df, problem.dataset().n()), df))
}

fn selection(fit: FitResult, state: &ThresholdState, path: Vec<BicEntry>) -> SelectionResult {
    let active = active_set(&fit.beta);
    let warning = (active.len() == 1).then(|| {
        format!(
            "all components except x{} were thresholded to zero (lambda = {}, gamma = {})",
            fit.beta.r() + 1,
            state.lambda,
            state.gamma
        )
    });
    SelectionResult {
        beta: fit.beta.clone(),
        active_set: active,
        lambda_star: state.lambda,
        gamma_star: state.gamma,
        bic_path: path,
        fit,
        warning,
    }
}

fn evaluate_point(problem: &BcGeeProblem<'_>, state: &ThresholdState, cfg: &GeeConfig) -> (Result<FitResult>, BicEntry) {
    let fit = problem.solve_thresholded(&state.delta, cfg);
    let mut entry = BicEntry {
        lambda: state.lambda,
        gamma: state.gamma,
        bic: None,
        df: None,
        converged: false,
        error: None,
    };
    match &fit {
        Ok(f) if f.converged => match bic_score(problem, &f.beta) {
            Ok((bic, df)) => {
                entry.converged = true;
                entry.bic = Some(bic);
                entry.df = Some(df);
            }
            Err(e) => entry.error = Some(e.to_string()),
        },
        Ok(_) => entry.error = Some("did not converge".into()),
        Err(e) => entry.error = Some(e.to_string()),
    }
    (fit, entry)
}

/// Single `(lambda, gamma)` fit. A non-converged fit is returned with
/// `fit.converged == false`.
pub fn solve_sgee(problem: &BcGeeProblem<'_>, lambda: f64, gamma: f64, cfg: &GeeConfig) -> Result<SelectionResult> {
    let state = compute_delta(problem.beta_tilde(), lambda, gamma)?;
    let (fit, entry) = evaluate_point(problem, &state, cfg);
    Ok(selection(fit?, &state, vec![entry]))
}

pub const DEFAULT_GAMMAS: [f64; 3] = [0.5, 1.0, 2.0];

/// `{0}` plus 15 log-spaced values on `[1e-4, 1] * ln(n) / sqrt(n)`.
pub fn default_lambda_grid(n: usize) -> Vec<f64> {
    let scale = (n as f64).ln() / (n as f64).sqrt();
    let mut lambdas = vec![0.0];
    lambdas.extend(log_spaced(1e-4 * scale, scale, 15));
    lambdas
}

/// [`default_lambda_grid`] crossed with [`DEFAULT_GAMMAS`].
pub fn default_tuning_grid(n: usize) -> Vec<(f64, f64)> {
    cross_grid(&default_lambda_grid(n), &DEFAULT_GAMMAS)
}

/// All `(lambda, gamma)` pairs, lambda-major.
pub fn cross_grid(lambdas: &[f64], gammas: &[f64]) -> Vec<(f64, f64)> {
    lambdas
        .iter()
        .flat_map(|&l| gammas.iter().map(move |&g| (l, g)))
        .collect()
}

/// Fits every grid point and returns the BIC minimizer. Ties go to the
/// larger lambda, then the smaller gamma. Points sharing the same
/// thresholding weights are solved once.
pub fn tune(problem: &BcGeeProblem<'_>, grid: &[(f64, f64)], cfg: &GeeConfig) -> Result<SelectionResult> {
    if grid.is_empty() {
        return Err(Error::Config("tuning grid is empty".into()));
    }
    let states = grid
        .iter()
        .map(|&(l, g)| compute_delta(problem.beta_tilde(), l, g))
        .collect::<Result<Vec<_>>>()?;

    // distinct delta vectors, in first-appearance order
    let mut unique: Vec<usize> = Vec::new();
    let mut slot = Vec::with_capacity(states.len());
    for (k, s) in states.iter().enumerate() {
        let key = |d: &[f64]| d.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        match unique.iter().position(|&u| key(&states[u].delta) == key(&s.delta)) {
            Some(pos) => slot.push(pos),
            None => {
                slot.push(unique.len());
                unique.push(k);
            }
        }
    }
    // Restarts are too costly across a whole grid, so stalled penalized
    // points just drop out. The unpenalized point keeps them: it must
    // reproduce the plain bias-corrected fit.
    let grid_cfg = GeeConfig {
        max_restarts: 0,
        ..*cfg
    };
    let solved: Vec<(Result<FitResult>, BicEntry)> = unique
        .par_iter()
        .map(|&k| {
            let unpenalized = states[k].delta.iter().all(|&d| d == 0.0);
            evaluate_point(problem, &states[k], if unpenalized { cfg } else { &grid_cfg })
        })
        .collect();

    let path: Vec<BicEntry> = states
        .iter()
        .zip(&slot)
        .map(|(s, &u)| BicEntry {
            lambda: s.lambda,
            gamma: s.gamma,
            ..solved[u].1.clone()
        })
        .collect();

    let mut best: Option<usize> = None;
    for (k, e) in path.iter().enumerate() {
        let Some(bic) = e.bic else { continue };
        let better = match best {
            None => true,
            Some(b) => {
                let cur = &path[b];
                let cb = cur.bic.unwrap_or(f64::INFINITY);
                bic < cb
                    || (bic == cb && (e.lambda > cur.lambda || (e.lambda == cur.lambda && e.gamma < cur.gamma)))
            }
        };
        if better {
            best = Some(k);
        }
    }
    let Some(best) = best else {
        return Err(Error::Tuning {
            failed: path.len(),
            total: path.len(),
        });
    };
    let fit = match &solved[slot[best]].0 {
        Ok(f) => f.clone(),
        Err(e) => return Err(Error::Estimation(e.to_string())),
    };
    Ok(selection(fit, &states[best], path))
}

/// Convenience: select with the given working covariance on an already
/// prepared dataset, using the default grid when `grid` is `None`.
pub fn select(problem: &BcGeeProblem<'_>, grid: Option<&[(f64, f64)]>, cfg: &GeeConfig) -> Result<SelectionResult> {
    match grid {
        Some(g) => tune(problem, g, cfg),
        None => tune(problem, &default_tuning_grid(problem.dataset().n()), cfg),
    }
}
