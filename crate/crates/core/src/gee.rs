//! Estimating equations for the index vector.
//!
//! Two systems are solved here, both in the remove-one-component chart:
//!
//! * the working-independence equations, which give the initial estimate
//!   `beta_tilde`;
//! * the bias-corrected equations, whose design rows are
//!   `g'(X^T beta) J^T (X - E[X | X^T beta_tilde])` with the centering frozen
//!   at `beta_tilde`, weighted by per-cluster inverse working covariances.
//!
//! Both are solved by a damped Newton iteration whose slope is the
//! Fisher-type matrix `sum_i Z_i^T R_i^{-1} Z_i` (i.e. `n V`).

use std::f64::consts::FRAC_1_SQRT_2;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::correlation::{ResidualSet, WorkingCorrelationSpec, WorkingCovariance};
use crate::data::ClusteredDataset;
use crate::error::{Error, Result};
use crate::geometry::{self, embed, jacobian, IndexParam};
use crate::smoother::{cv_bandwidth, default_cv_grid, LinkPoint, SmootherConfig, SmootherFit};

/// Number of chart-boundary projections tolerated in one solve.
const MAX_PROJECTIONS: usize = 5;
/// Longest Newton step (chart coordinates) tried before halving; keeps an
/// ill-conditioned slope from jumping to a distant root.
const MAX_STEP: f64 = 0.2;
/// Iterations over which less than 1% residual reduction counts as a stall.
const STALL_WINDOW: usize = 10;
/// Perturbation radii for restarts after a stalled solve.
const RESTART_RADII: [f64; 2] = [0.02, 0.05];
/// Iteration budget of each restart.
const RESTART_MAX_ITER: usize = 40;
/// Points on the reporting grid for the fitted link.
pub const LINK_GRID_POINTS: usize = 101;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeeConfig {
    pub max_iter: usize,
    /// Bound on `|residual| / n` and on the Newton step norm.
    pub tol: f64,
    /// Maximum step halvings per iteration.
    pub max_halvings: usize,
    pub ridge_eps: f64,
    /// Restarts tried after a stalled solve (0 disables them).
    pub max_restarts: usize,
}

impl Default for GeeConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-8,
            max_halvings: 20,
            ridge_eps: 1e-10,
            max_restarts: 20,
        }
    }
}

impl GeeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config("tol must be positive".into()));
        }
        Ok(())
    }

    pub fn smoother(&self, h: f64) -> Result<SmootherConfig> {
        SmootherConfig::with_ridge(h, self.ridge_eps)
    }
}

/// How the bandwidth is chosen.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Bandwidth {
    Fixed(f64),
    /// Leave-one-out CV over the given grid, or the default grid if `None`.
    #[default]
    Cv,
    CvGrid(Vec<f64>),
}

impl Bandwidth {
    pub fn select(&self, ds: &ClusteredDataset, beta: &[f64]) -> Result<f64> {
        match self {
            Bandwidth::Fixed(h) => Ok(*h),
            Bandwidth::Cv => cv_bandwidth(ds, beta, &default_cv_grid(ds, beta)).map(|r| r.h),
            Bandwidth::CvGrid(grid) => cv_bandwidth(ds, beta, grid).map(|r| r.h),
        }
    }
}

/// One row of the iteration trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub residual_norm: f64,
    pub step_norm: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub beta: IndexParam,
    pub converged: bool,
    pub iterations: usize,
    /// `|residual| / n` at the returned iterate.
    pub final_residual_norm: f64,
    pub bandwidth: f64,
    /// Plug-in asymptotic covariance of `sqrt(n) (beta_hat - beta_0)`.
    pub sigma_a: DMatrix<f64>,
    /// `sqrt(diag(sigma_a) / n)`.
    pub se: Vec<f64>,
    /// `V_hat` on the free chart coordinates.
    pub v_hat: DMatrix<f64>,
    pub g_grid: Vec<LinkPoint>,
    pub trace: Vec<IterationRecord>,
}

/// Value of an estimating function together with its Fisher-type slope.
pub(crate) struct Evaluation {
    pub beta: IndexParam,
    pub score: DVector<f64>,
    /// `sum_i Z_i^T R_i^{-1} Z_i`.
    pub info: DMatrix<f64>,
}

pub(crate) trait EstimatingEquations {
    fn n_clusters(&self) -> usize;
    fn evaluate(&self, reduced: &[f64]) -> Result<Evaluation>;
}

/// Outcome of [`damped_newton`]: the best iterate and its diagnostics.
pub(crate) struct NewtonOutcome {
    pub eval: Evaluation,
    pub converged: bool,
    pub iterations: usize,
    pub residual_norm: f64,
    pub trace: Vec<IterationRecord>,
}

/// Thresholded residual `(1 - delta) * score + delta * b` on the free set.
fn thresholded(eval: &Evaluation, reduced: &[f64], delta: &[f64], free: &[usize]) -> DVector<f64> {
    DVector::from_iterator(
        free.len(),
        free.iter().map(|&c| (1.0 - delta[c]) * eval.score[c] + delta[c] * reduced[c]),
    )
}

fn check_info(info: &DMatrix<f64>) -> Result<()> {
    if info.nrows() == 0 {
        return Ok(());
    }
    let eig = SymmetricEigen::new(info.clone()).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    if !hi.is_finite() || !(hi > 1e-20) || lo / hi <= 1e-12 {
        return Err(Error::Singular(format!("information eigenvalues in [{lo:e}, {hi:e}]")));
    }
    Ok(())
}

/// Damped Newton iteration for `(1 - delta) G(b) + delta b = 0` over the
/// coordinates with `delta < 1`; the others stay at exact zero.
/// A zero `delta` gives the plain equations `G(b) = 0`.
pub(crate) fn damped_newton<E: EstimatingEquations>(
    eq: &E,
    start: &[f64],
    delta: &[f64],
    cfg: &GeeConfig,
) -> Result<NewtonOutcome> {
    cfg.validate()?;
    let n = eq.n_clusters() as f64;
    let free: Vec<usize> = (0..start.len()).filter(|&c| delta[c] < 1.0).collect();
    let mut b: Vec<f64> = start
        .iter()
        .enumerate()
        .map(|(c, &v)| if delta[c] < 1.0 { v } else { 0.0 })
        .collect();
    let mut projections = usize::from(geometry::project_into_chart(&mut b));

    let mut eval = eq.evaluate(&b)?;
    let mut h = thresholded(&eval, &b, delta, &free);
    let mut norm = h.norm();
    let mut trace = vec![IterationRecord {
        iteration: 0,
        residual_norm: norm / n,
        step_norm: 0.0,
    }];
    let info_at = |e: &Evaluation| DMatrix::from_fn(free.len(), free.len(), |a, c| e.info[(free[a], free[c])]);
    // an unidentified index (e.g. flat link) is reported even at a zero residual
    check_info(&info_at(&eval))?;
    let mut converged = norm / n <= cfg.tol;
    let mut iterations = 0;

    // once the information-matrix slope stops making progress, switch to a
    // finite-difference Jacobian of the same residual for the rest of the solve
    let mut use_fd = false;
    while !converged && iterations < cfg.max_iter {
        iterations += 1;
        let info_free = info_at(&eval);
        check_info(&info_free)?;
        let mut accepted = None;
        for attempt_fd in [false, true] {
            if attempt_fd != use_fd && !(attempt_fd && accepted.is_none()) {
                continue;
            }
            let step = if attempt_fd {
                let jac = fd_jacobian(eq, &b, &h, delta, &free)?;
                jac.lu().solve(&(-&h))
            } else {
                let slope = DMatrix::from_fn(free.len(), free.len(), |a, c| {
                    let fa = free[a];
                    let diag = if a == c { delta[fa] } else { 0.0 };
                    (1.0 - delta[fa]) * info_free[(a, c)] - diag
                });
                slope.lu().solve(&h)
            };
            let Some(mut step) = step.filter(|s| s.iter().all(|v| v.is_finite())) else {
                if attempt_fd {
                    break;
                }
                continue;
            };
            let len = step.norm();
            if len > MAX_STEP {
                step *= MAX_STEP / len;
            }
            if let Some(found) = line_search(eq, &b, &step, norm, delta, &free, cfg)? {
                if !attempt_fd && found.3 > 0.9 * norm {
                    use_fd = true;
                }
                accepted = Some((found, step.norm()));
                break;
            }
            use_fd = true;
        }
        let Some(((trial, te, th, tn, projected, scale), full)) = accepted else {
            break;
        };
        if projected {
            projections += 1;
            if projections > MAX_PROJECTIONS {
                return Err(Error::Boundary { count: projections });
            }
        }
        let step_norm = scale * full;
        b = trial;
        eval = te;
        h = th;
        norm = tn;
        trace.push(IterationRecord {
            iteration: iterations,
            residual_norm: norm / n,
            step_norm,
        });
        converged = norm / n <= cfg.tol;
        if step_norm <= cfg.tol * 1e-3 {
            // no further progress possible at this resolution
            break;
        }
        if !converged && trace.len() > STALL_WINDOW {
            let old = trace[trace.len() - 1 - STALL_WINDOW].residual_norm;
            if norm / n > 0.99 * old {
                break;
            }
        }
    }
    Ok(NewtonOutcome {
        eval,
        converged,
        iterations,
        residual_norm: norm / n,
        trace,
    })
}

/// [`damped_newton`] followed, if it stalls, by restarts from the best
/// iterate perturbed by `+-rho` along each free coordinate (fixed order, so
/// the result stays deterministic). Returns the first converged restart, or
/// the smallest-residual attempt.
pub(crate) fn solve_with_restarts<E: EstimatingEquations>(
    eq: &E,
    start: &[f64],
    delta: &[f64],
    cfg: &GeeConfig,
) -> Result<NewtonOutcome> {
    let first = damped_newton(eq, start, delta, cfg)?;
    if first.converged {
        return Ok(first);
    }
    let anchor = first.eval.beta.reduced().to_vec();
    let free: Vec<usize> = (0..anchor.len()).filter(|&c| delta[c] < 1.0).collect();
    let restart_cfg = GeeConfig {
        max_iter: cfg.max_iter.min(RESTART_MAX_ITER),
        ..*cfg
    };
    let starts = RESTART_RADII
        .iter()
        .flat_map(|&rho| free.iter().flat_map(move |&c| [(c, rho), (c, -rho)]))
        .take(cfg.max_restarts);
    let mut best = first;
    for (c, shift) in starts {
        let mut s = anchor.clone();
        s[c] += shift;
        match damped_newton(eq, &s, delta, &restart_cfg) {
            Ok(out) if out.converged => return Ok(out),
            Ok(out) if out.residual_norm < best.residual_norm => best = out,
            _ => {}
        }
    }
    Ok(best)
}

type Accepted = (Vec<f64>, Evaluation, DVector<f64>, f64, bool, f64);

/// Step halving along `step` until the residual norm decreases.
fn line_search<E: EstimatingEquations>(
    eq: &E,
    b: &[f64],
    step: &DVector<f64>,
    norm: f64,
    delta: &[f64],
    free: &[usize],
    cfg: &GeeConfig,
) -> Result<Option<Accepted>> {
    let mut scale = 1.0;
    for _ in 0..=cfg.max_halvings {
        let mut trial = b.to_vec();
        for (a, &c) in free.iter().enumerate() {
            trial[c] += scale * step[a];
        }
        let projected = geometry::project_into_chart(&mut trial);
        match eq.evaluate(&trial) {
            Ok(te) => {
                let th = thresholded(&te, &trial, delta, free);
                let tn = th.norm();
                if tn < norm {
                    return Ok(Some((trial, te, th, tn, projected, scale)));
                }
            }
            Err(Error::OutOfSupport { .. }) => {}
            Err(e) => return Err(e),
        }
        scale *= 0.5;
    }
    Ok(None)
}

/// Forward-difference Jacobian of the thresholded residual on the free set.
fn fd_jacobian<E: EstimatingEquations>(
    eq: &E,
    b: &[f64],
    h: &DVector<f64>,
    delta: &[f64],
    free: &[usize],
) -> Result<DMatrix<f64>> {
    let k = free.len();
    let mut jac = DMatrix::zeros(k, k);
    for (a, &c) in free.iter().enumerate() {
        let eps = 1e-6 * (1.0 + b[c].abs());
        let mut trial = b.to_vec();
        // step toward the origin so the perturbed point stays in the chart
        let dir = if b[c] > 0.0 { -1.0 } else { 1.0 };
        trial[c] += dir * eps;
        let te = eq.evaluate(&trial)?;
        let th = thresholded(&te, &trial, delta, free);
        jac.set_column(a, &((th - h) / (dir * eps)));
    }
    Ok(jac)
}

/// Coefficients of row `r` of the chart Jacobian: `-b_c / beta_r`.
fn jacobian_row(ip: &IndexParam) -> Vec<f64> {
    let br = ip.beta()[ip.r()];
    ip.reduced().iter().map(|b| -b / br).collect()
}

/// `J^T x` for a covariate row.
#[inline]
fn project_row(x: &[f64], r: usize, jrow: &[f64], out: &mut [f64]) {
    for (c, o) in out.iter_mut().enumerate() {
        let s = if c < r { c } else { c + 1 };
        *o = x[s] + x[r] * jrow[c];
    }
}

/// Working-independence estimating equations with uncentered design rows.
struct IndependenceEquations<'a> {
    ds: &'a ClusteredDataset,
    r: usize,
    smoother: SmootherConfig,
}

impl EstimatingEquations for IndependenceEquations<'_> {
    fn n_clusters(&self) -> usize {
        self.ds.n()
    }

    fn evaluate(&self, reduced: &[f64]) -> Result<Evaluation> {
        let ip = embed(reduced, self.r)?;
        let fit = SmootherFit::new(self.ds, ip.beta())?;
        let jrow = jacobian_row(&ip);
        let d = reduced.len();
        let y = self.ds.y();
        let mut score = DVector::zeros(d);
        let mut info = DMatrix::zeros(d, d);
        let mut z = vec![0.0; d];
        let mut zc = vec![0.0; d];
        let mut centered = vec![0.0; self.ds.p()];
        for (k, &u) in fit.index_values().iter().enumerate() {
            let est = fit.local(u, &self.smoother, true)?;
            let x = self.ds.x_row(k);
            project_row(x, self.r, &jrow, &mut z);
            for (q, c) in centered.iter_mut().enumerate() {
                *c = x[q] - est.cond_mean[q];
            }
            project_row(&centered, self.r, &jrow, &mut zc);
            let e = y[k] - est.g;
            let g2 = est.dg * est.dg;
            for a in 0..d {
                score[a] += est.dg * z[a] * e;
                for c in 0..d {
                    info[(a, c)] += g2 * zc[a] * zc[c];
                }
            }
        }
        Ok(Evaluation { beta: ip, score, info })
    }
}

/// Working-independence initial estimate.
#[derive(Debug, Clone)]
pub struct InitialFit {
    /// Oriented so the largest component is positive and removed.
    pub beta: IndexParam,
    pub converged: bool,
    pub iterations: usize,
    pub final_residual_norm: f64,
    /// Bandwidth used while solving (selected at the starting direction).
    pub bandwidth: f64,
    pub trace: Vec<IterationRecord>,
}

/// Starting direction: normalized covariate-response cross moments,
/// falling back to `(1, ..., 1) / sqrt(p)`.
pub fn starting_direction(ds: &ClusteredDataset) -> Vec<f64> {
    let p = ds.p();
    let n = ds.total_obs() as f64;
    let y = ds.y();
    let ybar = y.iter().sum::<f64>() / n;
    let mut xbar = vec![0.0; p];
    for k in 0..ds.total_obs() {
        for (q, x) in ds.x_row(k).iter().enumerate() {
            xbar[q] += x / n;
        }
    }
    let mut c = vec![0.0; p];
    let mut scale = 0.0;
    for k in 0..ds.total_obs() {
        let dy = y[k] - ybar;
        for (q, x) in ds.x_row(k).iter().enumerate() {
            let dx = x - xbar[q];
            c[q] += dx * dy / n;
            scale += dx * dx * dy * dy / n;
        }
    }
    let norm = geometry::norm(&c);
    if norm > 1e-10 * scale.sqrt() && norm.is_finite() {
        c.iter().map(|v| v / norm).collect()
    } else {
        vec![1.0 / (p as f64).sqrt(); p]
    }
}

pub fn initial_estimate(ds: &ClusteredDataset, bandwidth: &Bandwidth, cfg: &GeeConfig) -> Result<InitialFit> {
    if ds.p() < 2 {
        return Err(Error::Domain("the index needs at least two covariates".into()));
    }
    let start = geometry::orient(&starting_direction(ds))?;
    let h = bandwidth.select(ds, start.beta())?;
    let eq = IndependenceEquations {
        ds,
        r: start.r(),
        smoother: cfg.smoother(h)?,
    };
    let zeros = vec![0.0; ds.p() - 1];
    let mut out = solve_with_restarts(&eq, start.reduced(), &zeros, cfg)?;
    if !out.converged {
        if let Some(alt) = fallback_solve(ds, start.beta(), eq.smoother, cfg)? {
            out = alt;
        }
    }
    Ok(InitialFit {
        beta: geometry::orient(out.eval.beta.beta())?,
        converged: out.converged,
        iterations: out.iterations,
        final_residual_norm: out.residual_norm,
        bandwidth: h,
        trace: out.trace,
    })
}

/// Directions tried when the solve from the cross-moment start stalls: the
/// coordinate axes and the normalized pairwise sums and differences.
fn fallback_directions(p: usize) -> Vec<Vec<f64>> {
    let mut dirs = Vec::with_capacity(p * p);
    for j in 0..p {
        let mut e = vec![0.0; p];
        e[j] = 1.0;
        dirs.push(e);
    }
    for j in 0..p {
        for k in j + 1..p {
            for sign in [1.0, -1.0] {
                let mut d = vec![0.0; p];
                d[j] = FRAC_1_SQRT_2;
                d[k] = sign * FRAC_1_SQRT_2;
                dirs.push(d);
            }
        }
    }
    dirs
}

/// Multi-start for the initial estimate. Among converged solutions, the one
/// closest in angle to the preferred start wins.
fn fallback_solve(
    ds: &ClusteredDataset,
    preferred: &[f64],
    smoother: SmootherConfig,
    cfg: &GeeConfig,
) -> Result<Option<NewtonOutcome>> {
    let quick = GeeConfig {
        max_restarts: 0,
        ..*cfg
    };
    let zeros = vec![0.0; ds.p() - 1];
    let mut best: Option<(f64, NewtonOutcome)> = None;
    for dir in fallback_directions(ds.p()) {
        let start = geometry::orient(&dir)?;
        let eq = IndependenceEquations {
            ds,
            r: start.r(),
            smoother,
        };
        let Ok(out) = damped_newton(&eq, start.reduced(), &zeros, &quick) else { continue };
        if !out.converged {
            continue;
        }
        let cos = out.eval.beta.beta().iter().zip(preferred).map(|(a, b)| a * b).sum::<f64>().abs();
        if best.as_ref().is_none_or(|(c, _)| cos > *c) {
            best = Some((cos, out));
        }
    }
    Ok(best.map(|(_, out)| out))
}

/// Bias-corrected estimating equations with everything except the index
/// frozen: bandwidth, centering at `beta_tilde` and inverse working
/// covariances.
#[derive(Debug, Clone)]
pub struct BcGeeProblem<'a> {
    ds: &'a ClusteredDataset,
    beta_tilde: IndexParam,
    smoother: SmootherConfig,
    /// `X - E[X | X^T beta_tilde]`, row-major like the dataset.
    centered: Vec<f64>,
    r_inv: Vec<DMatrix<f64>>,
}

impl<'a> BcGeeProblem<'a> {
    pub fn new(
        ds: &'a ClusteredDataset,
        beta_tilde: &IndexParam,
        smoother: SmootherConfig,
        r_inv: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        if beta_tilde.p() != ds.p() {
            return Err(Error::Domain("beta_tilde dimension does not match the data".into()));
        }
        if r_inv.len() != ds.n() {
            return Err(Error::Domain(format!("{} working matrices for {} clusters", r_inv.len(), ds.n())));
        }
        for (i, (ri, c)) in r_inv.iter().zip(ds.clusters()).enumerate() {
            if ri.nrows() != c.size() || ri.ncols() != c.size() {
                return Err(Error::Domain(format!("working matrix {i} has the wrong size")));
            }
        }
        let fit = SmootherFit::new(ds, beta_tilde.beta())?;
        let p = ds.p();
        let mut centered = Vec::with_capacity(ds.total_obs() * p);
        for (k, &u) in fit.index_values().iter().enumerate() {
            let est = fit.local(u, &smoother, true)?;
            centered.extend(ds.x_row(k).iter().zip(&est.cond_mean).map(|(x, m)| x - m));
        }
        Ok(Self {
            ds,
            beta_tilde: beta_tilde.clone(),
            smoother,
            centered,
            r_inv,
        })
    }

    pub fn dataset(&self) -> &'a ClusteredDataset {
        self.ds
    }

    pub fn beta_tilde(&self) -> &IndexParam {
        &self.beta_tilde
    }

    pub fn smoother(&self) -> &SmootherConfig {
        &self.smoother
    }

    pub fn r_inverses(&self) -> &[DMatrix<f64>] {
        &self.r_inv
    }

    /// Same problem with different inverse working covariances.
    pub fn with_r_inverses(&self, r_inv: Vec<DMatrix<f64>>) -> Result<Self> {
        if r_inv.len() != self.ds.n() {
            return Err(Error::Domain("wrong number of working matrices".into()));
        }
        Ok(Self {
            r_inv,
            ..self.clone()
        })
    }

    /// Design blocks `Z_i` and residual vectors `Y_i - g_hat` at `beta`.
    fn blocks(&self, ip: &IndexParam) -> Result<Vec<(DMatrix<f64>, DVector<f64>)>> {
        let fit = SmootherFit::new(self.ds, ip.beta())?;
        let jrow = jacobian_row(ip);
        let d = self.ds.p() - 1;
        let p = self.ds.p();
        let r = ip.r();
        let y = self.ds.y();
        let index = fit.index_values();
        let mut row = vec![0.0; d];
        let mut out = Vec::with_capacity(self.ds.n());
        for i in 0..self.ds.n() {
            let rows = self.ds.rows_of(i);
            let m = rows.len();
            let mut z = DMatrix::zeros(m, d);
            let mut e = DVector::zeros(m);
            for (j, k) in rows.enumerate() {
                let est = fit.local(index[k], &self.smoother, false)?;
                project_row(&self.centered[k * p..(k + 1) * p], r, &jrow, &mut row);
                for c in 0..d {
                    z[(j, c)] = est.dg * row[c];
                }
                e[j] = y[k] - est.g;
            }
            out.push((z, e));
        }
        Ok(out)
    }

    /// Left-hand side of the bias-corrected equations at `reduced`.
    pub fn residual(&self, reduced: &[f64]) -> Result<DVector<f64>> {
        self.evaluate(reduced).map(|e| e.score)
    }

    /// `V_hat` (averaged over clusters) at `reduced`.
    pub fn v_hat(&self, reduced: &[f64]) -> Result<DMatrix<f64>> {
        self.evaluate(reduced).map(|e| e.info / self.ds.n() as f64)
    }

    /// Plug-in `J V^{-1} Omega V^{-1} J^T` at `beta`, using only the chart
    /// coordinates in `free` (all of them when `None`).
    pub fn asymptotic_covariance(&self, beta: &IndexParam, free: Option<&[usize]>) -> Result<DMatrix<f64>> {
        let d = self.ds.p() - 1;
        let all: Vec<usize> = (0..d).collect();
        let free = free.unwrap_or(&all);
        let n = self.ds.n() as f64;
        let mut v = DMatrix::<f64>::zeros(free.len(), free.len());
        let mut omega = DMatrix::<f64>::zeros(free.len(), free.len());
        for ((z, e), ri) in self.blocks(beta)?.iter().zip(&self.r_inv) {
            let zf = z.select_columns(free);
            let rz = ri * &zf;
            v += zf.transpose() * &rz;
            let s = rz.transpose() * e;
            omega += &s * s.transpose();
        }
        v /= n;
        omega /= n;
        check_info(&v).map_err(|e| Error::Conditioning(format!("V_hat: {e}")))?;
        let v_inv = v
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .or_else(|| v.clone().try_inverse())
            .ok_or_else(|| Error::Conditioning("V_hat is singular".into()))?;
        let j = jacobian(beta.reduced(), beta.r())?.select_columns(free);
        let core = &v_inv * omega * &v_inv;
        let sigma = &j * core * j.transpose();
        Ok((&sigma + sigma.transpose()) * 0.5)
    }

    /// Solves the bias-corrected equations starting from `beta_tilde`.
    pub fn solve(&self, cfg: &GeeConfig) -> Result<FitResult> {
        let zeros = vec![0.0; self.ds.p() - 1];
        self.solve_thresholded(&zeros, cfg)
    }

    /// Solves `(1 - delta) G + delta b = 0` (chart coordinates, `delta` in
    /// reduced order); coordinates with `delta == 1` are exact zeros.
    pub fn solve_thresholded(&self, delta: &[f64], cfg: &GeeConfig) -> Result<FitResult> {
        self.solve_from(self.beta_tilde.reduced(), delta, cfg)
    }

    /// As [`solve_thresholded`](Self::solve_thresholded) from an arbitrary
    /// starting point in the chart of `beta_tilde`.
    pub fn solve_from(&self, start: &[f64], delta: &[f64], cfg: &GeeConfig) -> Result<FitResult> {
        let d = self.ds.p() - 1;
        if start.len() != d {
            return Err(Error::Domain(format!("start has length {}, expected {d}", start.len())));
        }
        if delta.len() != d {
            return Err(Error::Domain(format!("delta has length {}, expected {d}", delta.len())));
        }
        let free: Vec<usize> = (0..d).filter(|&c| delta[c] < 1.0).collect();
        if free.is_empty() {
            let beta = embed(&vec![0.0; d], self.beta_tilde.r())?;
            return self.finish(beta, true, 0, 0.0, &free, Vec::new());
        }
        let out = solve_with_restarts(self, start, delta, cfg)?;
        self.finish(out.eval.beta, out.converged, out.iterations, out.residual_norm, &free, out.trace)
    }

    fn finish(
        &self,
        beta: IndexParam,
        converged: bool,
        iterations: usize,
        residual_norm: f64,
        free: &[usize],
        trace: Vec<IterationRecord>,
    ) -> Result<FitResult> {
        let p = self.ds.p();
        let n = self.ds.n() as f64;
        let (sigma_a, v_hat) = if free.is_empty() {
            (DMatrix::zeros(p, p), DMatrix::zeros(0, 0))
        } else {
            let v = self.v_hat(beta.reduced())?;
            let v_free = DMatrix::from_fn(free.len(), free.len(), |a, c| v[(free[a], free[c])]);
            (self.asymptotic_covariance(&beta, Some(free))?, v_free)
        };
        let se = (0..p).map(|i| (sigma_a[(i, i)].max(0.0) / n).sqrt()).collect();
        let g_grid = SmootherFit::new(self.ds, beta.beta())?.link_grid(&self.smoother, LINK_GRID_POINTS);
        Ok(FitResult {
            beta,
            converged,
            iterations,
            final_residual_norm: residual_norm,
            bandwidth: self.smoother.h,
            sigma_a,
            se,
            v_hat,
            g_grid,
            trace,
        })
    }

    /// `sum_i (Y_i - g_hat)^T R_i^{-1} (Y_i - g_hat)` with the link re-smoothed
    /// at `beta`.
    pub fn quadratic_form(&self, beta: &IndexParam) -> Result<f64> {
        let fit = SmootherFit::new(self.ds, beta.beta())?;
        let index = fit.index_values();
        let y = self.ds.y();
        let mut total = 0.0;
        for (i, ri) in self.r_inv.iter().enumerate() {
            let rows = self.ds.rows_of(i);
            let e = DVector::from_iterator(
                rows.len(),
                rows.map(|k| fit.local(index[k], &self.smoother, false).map(|est| y[k] - est.g))
                    .collect::<Result<Vec<_>>>()?,
            );
            total += (e.transpose() * ri * &e)[(0, 0)];
        }
        Ok(total)
    }
}

impl EstimatingEquations for BcGeeProblem<'_> {
    fn n_clusters(&self) -> usize {
        self.ds.n()
    }

    fn evaluate(&self, reduced: &[f64]) -> Result<Evaluation> {
        let ip = embed(reduced, self.beta_tilde.r())?;
        let d = reduced.len();
        let mut score = DVector::zeros(d);
        let mut info = DMatrix::zeros(d, d);
        for ((z, e), ri) in self.blocks(&ip)?.iter().zip(&self.r_inv) {
            let rz = ri * z;
            score += rz.transpose() * e;
            info += z.transpose() * rz;
        }
        Ok(Evaluation { beta: ip, score, info })
    }
}

/// Bias-corrected residual at `reduced`, building the frozen problem on the fly.
pub fn bc_gee_residual(
    reduced: &[f64],
    ds: &ClusteredDataset,
    r_inv: Vec<DMatrix<f64>>,
    beta_tilde: &IndexParam,
    smoother: SmootherConfig,
) -> Result<DVector<f64>> {
    BcGeeProblem::new(ds, beta_tilde, smoother, r_inv)?.residual(reduced)
}

/// Working-independence stage shared by every downstream fit: the initial
/// estimate, the bandwidth selected at it and the residuals it leaves.
#[derive(Debug, Clone)]
pub struct WorkingFit<'a> {
    ds: &'a ClusteredDataset,
    pub initial: InitialFit,
    pub smoother: SmootherConfig,
    pub residuals: ResidualSet,
}

impl<'a> WorkingFit<'a> {
    pub fn new(ds: &'a ClusteredDataset, bandwidth: &Bandwidth, cfg: &GeeConfig) -> Result<Self> {
        let initial = initial_estimate(ds, bandwidth, cfg)?;
        let h = bandwidth.select(ds, initial.beta.beta())?;
        let smoother = cfg.smoother(h)?;
        let fit = SmootherFit::new(ds, initial.beta.beta())?;
        let index = fit.index_values();
        let y = ds.y();
        let residuals = (0..ds.n())
            .map(|i| {
                let rows = ds.rows_of(i);
                rows.map(|k| fit.local(index[k], &smoother, false).map(|e| y[k] - e.g))
                    .collect::<Result<Vec<_>>>()
                    .map(DVector::from_vec)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ds,
            initial,
            smoother,
            residuals: ResidualSet::new(residuals)?,
        })
    }

    pub fn dataset(&self) -> &'a ClusteredDataset {
        self.ds
    }

    pub fn beta_tilde(&self) -> &IndexParam {
        &self.initial.beta
    }

    pub fn working_covariance(&self, spec: &WorkingCorrelationSpec) -> Result<WorkingCovariance> {
        spec.resolve(self.ds, Some(&self.residuals))
    }

    pub fn problem(&self, spec: &WorkingCorrelationSpec) -> Result<BcGeeProblem<'a>> {
        let r_inv = self.working_covariance(spec)?.inverses(self.ds)?;
        BcGeeProblem::new(self.ds, &self.initial.beta, self.smoother, r_inv)
    }
}

/// Full bias-corrected fit: working-independence start, bandwidth at
/// `beta_tilde`, working covariance, then the corrected equations.
pub fn solve_bc_gee(
    ds: &ClusteredDataset,
    spec: &WorkingCorrelationSpec,
    bandwidth: &Bandwidth,
    cfg: &GeeConfig,
) -> Result<FitResult> {
    WorkingFit::new(ds, bandwidth, cfg)?.problem(spec)?.solve(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Cluster;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn dataset(n: usize, m: usize, beta0: &[f64], noise: f64, link: fn(f64) -> f64, seed: u64) -> ClusteredDataset {
        let p = beta0.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clusters = (0..n)
            .map(|i| {
                let x = DMatrix::from_fn(m, p, |_, _| StandardNormal.sample(&mut rng));
                let y = DVector::from_fn(m, |j, _| {
                    let u: f64 = (0..p).map(|q| x[(j, q)] * beta0[q]).sum();
                    let e: f64 = StandardNormal.sample(&mut rng);
                    link(u) + noise * e
                });
                Cluster::new(format!("c{i}"), x, y, None)
            })
            .collect();
        ClusteredDataset::new(clusters).unwrap()
    }

    fn identity_inv(ds: &ClusteredDataset) -> Vec<DMatrix<f64>> {
        WorkingCovariance::Identity.inverses(ds).unwrap()
    }

    #[test]
    fn constant_response_is_singular() {
        let mut ds = dataset(20, 3, &[0.6, 0.8, 0.0], 0.0, |_| 0.0, 1);
        let clusters = ds
            .clusters()
            .iter()
            .map(|c| Cluster::new(c.id.clone(), c.x.clone(), DVector::from_element(c.size(), 2.0), None))
            .collect();
        ds = ClusteredDataset::new(clusters).unwrap();
        let res = initial_estimate(&ds, &Bandwidth::Fixed(1.0), &GeeConfig::default());
        match res {
            Err(Error::Singular(_)) => {}
            Ok(f) => assert!(!f.converged),
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn residual_vanishes_on_noiseless_linear_link() {
        let beta0 = [0.6, 0.8, 0.0];
        let ds = dataset(30, 3, &beta0, 0.0, |u| 1.0 + 2.0 * u, 2);
        let ip = geometry::orient(&beta0).unwrap();
        let res = bc_gee_residual(ip.reduced(), &ds, identity_inv(&ds), &ip, SmootherConfig::new(0.8).unwrap()).unwrap();
        assert!(res.amax() < 1e-8, "{res}");
    }

    #[test]
    fn residual_scales_inversely_with_r() {
        let ds = dataset(15, 3, &[0.6, 0.8, 0.0], 0.3, f64::exp, 3);
        let ip = geometry::orient(&[0.5, 0.8, 0.1]).unwrap();
        let sm = SmootherConfig::new(0.9).unwrap();
        let base = identity_inv(&ds);
        let scaled: Vec<_> = base.iter().map(|m| m / 4.0).collect();
        let a = bc_gee_residual(ip.reduced(), &ds, base, &ip, sm).unwrap();
        let b = bc_gee_residual(ip.reduced(), &ds, scaled, &ip, sm).unwrap();
        assert!((a / 4.0 - b).amax() < 1e-12);
    }

    /// Term-by-term evaluation using the explicit smoother weights.
    #[test]
    fn residual_matches_direct_summation() {
        let ds = dataset(3, 3, &[0.8, 0.6], 0.2, |u| u * u + u, 4);
        let tilde = geometry::orient(&[0.75, 0.66]).unwrap();
        let sm = SmootherConfig::with_ridge(3.0, 0.0).unwrap();
        let r = DMatrix::from_fn(3, 3, |j, k| 0.4f64.powi((j as i32 - k as i32).abs()));
        let rinv = crate::correlation::invert_r(&r).unwrap();
        let prob = BcGeeProblem::new(&ds, &tilde, sm, vec![rinv.clone(); 3]).unwrap();
        let at = [0.7];
        let got = prob.residual(&at).unwrap();

        let ip = embed(&at, tilde.r()).unwrap();
        let j = jacobian(&at, tilde.r()).unwrap();
        let fit_t = SmootherFit::new(&ds, tilde.beta()).unwrap();
        let fit_b = SmootherFit::new(&ds, ip.beta()).unwrap();
        let mut expect = DVector::zeros(1);
        for i in 0..3 {
            let mut z = DMatrix::zeros(3, 1);
            let mut e = DVector::zeros(3);
            for (jj, k) in ds.rows_of(i).enumerate() {
                let x = ds.x_row(k);
                let ut: f64 = x.iter().zip(tilde.beta()).map(|(a, b)| a * b).sum();
                let ub: f64 = x.iter().zip(ip.beta()).map(|(a, b)| a * b).sum();
                let wt = fit_t.weights(ut, &sm).unwrap();
                let wb = fit_b.weights(ub, &sm).unwrap();
                let cm: Vec<f64> = (0..2).map(|q| wt.iter().map(|&(l, w, _)| w * ds.x_row(l)[q]).sum()).collect();
                let g: f64 = wb.iter().map(|&(l, w, _)| w * ds.y()[l]).sum();
                let dg: f64 = wb.iter().map(|&(l, _, wd)| wd * ds.y()[l]).sum();
                let xc = DVector::from_vec(vec![x[0] - cm[0], x[1] - cm[1]]);
                z[(jj, 0)] = dg * (j.transpose() * xc)[0];
                e[jj] = ds.y()[k] - g;
            }
            expect += z.transpose() * &rinv * e;
        }
        assert!((got - expect).amax() < 1e-10);
    }

    #[test]
    fn initial_estimate_recovers_noiseless_linear_index() {
        // orthonormal design: rows of a scaled Hadamard-like block, so the
        // cross-moment start is already the true direction
        let beta0 = [0.6, 0.0, 0.8];
        let rows: Vec<[f64; 3]> = vec![
            [1.0, 1.0, 1.0],
            [1.0, -1.0, -1.0],
            [-1.0, 1.0, -1.0],
            [-1.0, -1.0, 1.0],
            [0.5, 0.5, -0.5],
            [-0.5, 0.5, 0.5],
            [0.5, -0.5, 0.5],
            [-0.5, -0.5, -0.5],
        ];
        let clusters = rows
            .chunks(2)
            .enumerate()
            .map(|(i, ch)| {
                let x = DMatrix::from_fn(2, 3, |j, q| ch[j][q]);
                let y = DVector::from_fn(2, |j, _| (0..3).map(|q| ch[j][q] * beta0[q]).sum());
                Cluster::new(format!("{i}"), x, y, None)
            })
            .collect();
        let ds = ClusteredDataset::new(clusters).unwrap();
        let fit = initial_estimate(&ds, &Bandwidth::Fixed(4.0), &GeeConfig::default()).unwrap();
        for (a, b) in fit.beta.beta().iter().zip(&beta0) {
            assert!((a - b).abs() < 1e-6, "{:?}", fit.beta.beta());
        }
    }

    #[test]
    fn bc_fit_converges_with_small_residual_and_valid_covariance() {
        let b0 = [0.6, 0.8, 0.0, 0.0];
        let ds = dataset(60, 3, &b0, 0.3, f64::exp, 5);
        let wf = WorkingFit::new(&ds, &Bandwidth::Cv, &GeeConfig::default()).unwrap();
        let prob = wf.problem(&WorkingCorrelationSpec::PooledResidual).unwrap();
        let fit = prob.solve(&GeeConfig::default()).unwrap();
        assert!(fit.converged, "{:?}", fit.trace);
        let g = prob.residual(fit.beta.reduced()).unwrap();
        assert!(g.norm() / ds.n() as f64 <= 1e-8);
        assert!((geometry::norm(fit.beta.beta()) - 1.0).abs() < 1e-12);
        assert!(fit.beta.beta()[fit.beta.r()] > 0.0);
        let s = &fit.sigma_a;
        assert!((s - s.transpose()).amax() < 1e-10);
        let eig = SymmetricEigen::new(s.clone()).eigenvalues;
        assert!(eig.min() >= -1e-10);
        let bv = DVector::from_column_slice(fit.beta.beta());
        assert!((s * &bv).norm() < 1e-8);
        let r2 = fit.beta.beta().iter().zip(&b0).map(|(a, b)| a * b).sum::<f64>().powi(2);
        assert!(r2 > 0.95, "{r2}");
        for w in fit.trace.windows(2) {
            assert!(w[1].residual_norm < w[0].residual_norm);
        }
    }
}
