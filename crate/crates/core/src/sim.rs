//! Simulation designs, accuracy metrics and the replication driver.
//!
//! Four designs share six standard-normal covariates and within-cluster
//! Gaussian errors with covariance `0.5^|j - k|`:
//!
//! | id | index direction (unnormalized) | link | cluster sizes |
//! |----|--------------------------------|------|---------------|
//! | 1  | (1, 1, 0, 0, 0, 0)             | exp  | 3             |
//! | 2  | (1, 0.6, 0.2, 0, 0, 0)         | exp  | 3             |
//! | 3  | (1, 1, 0, 0, 0, 0)             | sin  | 3             |
//! | 4  | (1, 1, 0, 0, 0, 0)             | exp  | 1, 2, 3 by thirds |

use std::fmt::{self, Write as _};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::correlation::{WorkingCorrelationSpec, WorkingCovariance};
use crate::data::{Cluster, ClusteredDataset};
use crate::error::{Error, Result};
use crate::gee::{Bandwidth, GeeConfig, WorkingFit};
use crate::geometry;
use crate::sgee;

/// Share of failed replications above which a study is rejected.
pub const MAX_FAILURE_RATE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    Exp,
    Sin,
}

impl Link {
    pub fn eval(self, u: f64) -> f64 {
        match self {
            Link::Exp => u.exp(),
            Link::Sin => u.sin(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterSizes {
    Equal(usize),
    /// 1, 2 and 3 observations for the first, second and last third.
    Thirds,
}

impl ClusterSizes {
    /// Size of cluster `k` (0-based) out of `n`.
    pub fn size(self, k: usize, n: usize) -> usize {
        match self {
            ClusterSizes::Equal(m) => m,
            ClusterSizes::Thirds => {
                let k1 = k + 1;
                if 3 * k1 <= n {
                    1
                } else if 3 * k1 <= 2 * n {
                    2
                } else {
                    3
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleSpec {
    pub example_id: u8,
    pub n: usize,
    pub link: Link,
    pub beta0: Vec<f64>,
    pub cluster_sizes: ClusterSizes,
    /// Error correlation `rho^|j - k|` within a cluster.
    pub error_rho: f64,
    pub reps: usize,
    pub base_seed: u64,
}

impl ExampleSpec {
    pub fn new(example_id: u8, n: usize, reps: usize, base_seed: u64) -> Result<Self> {
        let (raw, link, cluster_sizes): (&[f64], _, _) = match example_id {
            1 => (&[1.0, 1.0, 0.0, 0.0, 0.0, 0.0], Link::Exp, ClusterSizes::Equal(3)),
            2 => (&[1.0, 0.6, 0.2, 0.0, 0.0, 0.0], Link::Exp, ClusterSizes::Equal(3)),
            3 => (&[1.0, 1.0, 0.0, 0.0, 0.0, 0.0], Link::Sin, ClusterSizes::Equal(3)),
            4 => (&[1.0, 1.0, 0.0, 0.0, 0.0, 0.0], Link::Exp, ClusterSizes::Thirds),
            _ => return Err(Error::Config(format!("unknown example {example_id}; expected 1-4"))),
        };
        let norm = geometry::norm(raw);
        let spec = Self {
            example_id,
            n,
            link,
            beta0: raw.iter().map(|b| b / norm).collect(),
            cluster_sizes,
            error_rho: 0.5,
            reps,
            base_seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 3 {
            return Err(Error::Config(format!("need at least 3 clusters, got {}", self.n)));
        }
        if self.reps == 0 {
            return Err(Error::Config("reps must be at least 1".into()));
        }
        if (geometry::norm(&self.beta0) - 1.0).abs() > 1e-12 {
            return Err(Error::Config("beta0 must have unit norm".into()));
        }
        if !(self.error_rho.abs() < 1.0) {
            return Err(Error::Config("error correlation must lie in (-1, 1)".into()));
        }
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.beta0.len()
    }

    /// Positions of the nonzero true coefficients.
    pub fn support(&self) -> Vec<usize> {
        (0..self.p()).filter(|&i| self.beta0[i] != 0.0).collect()
    }
}

fn error_factor(m: usize, rho: f64) -> DMatrix<f64> {
    let s = DMatrix::from_fn(m, m, |j, k| rho.powi((j as i32 - k as i32).abs()));
    s.cholesky().expect("time-power matrix with |rho| < 1 is positive definite").unpack()
}

/// Replication `rep` of the design, seeded by `base_seed ^ rep`.
pub fn generate_example(spec: &ExampleSpec, rep: u64) -> ClusteredDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.base_seed ^ rep);
    let p = spec.p();
    let factors: Vec<DMatrix<f64>> = (1..=3).map(|m| error_factor(m, spec.error_rho)).collect();
    let clusters = (0..spec.n)
        .map(|k| {
            let m = spec.cluster_sizes.size(k, spec.n);
            let x = DMatrix::from_row_iterator(m, p, (0..m * p).map(|_| StandardNormal.sample(&mut rng)));
            let z = DVector::from_iterator(m, (0..m).map(|_| StandardNormal.sample(&mut rng)));
            let eps = if m <= 3 {
                &factors[m - 1] * z
            } else {
                error_factor(m, spec.error_rho) * z
            };
            let y = DVector::from_fn(m, |j, _| {
                let u: f64 = (0..p).map(|q| x[(j, q)] * spec.beta0[q]).sum();
                spec.link.eval(u) + eps[j]
            });
            Cluster::new((k + 1).to_string(), x, y, None)
        })
        .collect();
    ClusteredDataset::new_unchecked(clusters)
}

/// `(beta_hat . beta0)^2 / (beta0 . beta0)^2`.
pub fn r_squared(beta_hat: &[f64], beta0: &[f64]) -> Result<f64> {
    if beta_hat.len() != beta0.len() {
        return Err(Error::Domain("vectors differ in length".into()));
    }
    let b0 = beta0.iter().map(|b| b * b).sum::<f64>();
    if !(b0 > 0.0) || beta_hat.iter().all(|&b| b == 0.0) {
        return Err(Error::Domain("R^2 needs nonzero vectors".into()));
    }
    let dot: f64 = beta_hat.iter().zip(beta0).map(|(a, b)| a * b).sum();
    Ok(dot * dot / (b0 * b0))
}

/// True negatives and true positives of an estimated active set.
pub fn tn_tp(active_set: &[usize], beta0: &[f64]) -> (usize, usize) {
    let mut tn = 0;
    let mut tp = 0;
    for (i, &b) in beta0.iter().enumerate() {
        let active = active_set.contains(&i);
        if b == 0.0 && !active {
            tn += 1;
        } else if b != 0.0 && active {
            tp += 1;
        }
    }
    (tn, tp)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Oracle,
    /// Bias-corrected fit with pooled working covariance, no selection.
    Unselected,
    /// Tuned selection with pooled working covariance.
    Selected,
    /// Tuned selection with identity working covariance.
    SelectedIdentity,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Oracle, Method::Unselected, Method::Selected, Method::SelectedIdentity];

    /// Short machine-readable label.
    pub fn key(self) -> &'static str {
        match self {
            Method::Oracle => "oracle",
            Method::Unselected => "beta_star",
            Method::Selected => "beta_hat",
            Method::SelectedIdentity => "beta_hat_I",
        }
    }

    /// Label used in markdown tables.
    pub fn label(self) -> &'static str {
        match self {
            Method::Oracle => "Oracle",
            Method::Unselected => "β̂_*",
            Method::Selected => "β̂",
            Method::SelectedIdentity => "β̂_I",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Outcome of one method on one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct RepRecord {
    pub rep: usize,
    pub method: Method,
    /// `false` for errors and non-converged fits; such records are excluded
    /// from the means.
    pub ok: bool,
    pub r2: f64,
    pub tn: usize,
    pub tp: usize,
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: Method,
    pub mean_r2: f64,
    pub mean_tn: f64,
    pub mean_tp: f64,
    pub successes: usize,
    pub total: usize,
}

impl MethodSummary {
    pub fn convergence_rate(&self) -> f64 {
        self.successes as f64 / self.total as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyReport {
    pub spec: ExampleSpec,
    pub summaries: Vec<MethodSummary>,
    /// Ordered by replication, then method.
    pub records: Vec<RepRecord>,
}

impl StudyReport {
    pub fn summary(&self, method: Method) -> &MethodSummary {
        self.summaries.iter().find(|s| s.method == method).expect("every method is summarized")
    }

    pub fn records_for(&self, method: Method) -> impl Iterator<Item = &RepRecord> {
        self.records.iter().filter(move |r| r.method == method)
    }

    /// Fails when any method lost more than [`MAX_FAILURE_RATE`] of the reps.
    pub fn check_failures(&self) -> Result<()> {
        for s in &self.summaries {
            let failed = s.total - s.successes;
            if failed as f64 > MAX_FAILURE_RATE * s.total as f64 {
                return Err(Error::Study {
                    failed,
                    total: s.total,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyOptions {
    pub gee: GeeConfig,
    pub bandwidth: Bandwidth,
    /// Tuning grid; the default grid for the cluster count when `None`.
    pub grid: Option<Vec<(f64, f64)>>,
    /// Methods to run; all four by default.
    pub methods: Vec<Method>,
}

impl Default for StudyOptions {
    fn default() -> Self {
        Self {
            gee: GeeConfig::default(),
            bandwidth: Bandwidth::Cv,
            grid: None,
            methods: Method::ALL.to_vec(),
        }
    }
}

fn failed(rep: usize, method: Method, message: String) -> RepRecord {
    RepRecord {
        rep,
        method,
        ok: false,
        r2: f64::NAN,
        tn: 0,
        tp: 0,
        beta: Vec::new(),
        se: Vec::new(),
        message: Some(message),
    }
}

fn record(
    rep: usize,
    method: Method,
    beta0: &[f64],
    beta: &[f64],
    se: &[f64],
    converged: bool,
) -> Result<RepRecord> {
    let active: Vec<usize> = (0..beta.len()).filter(|&i| beta[i] != 0.0).collect();
    let (tn, tp) = tn_tp(&active, beta0);
    Ok(RepRecord {
        rep,
        method,
        ok: converged,
        r2: r_squared(beta, beta0)?,
        tn,
        tp,
        beta: beta.to_vec(),
        se: se.to_vec(),
        message: (!converged).then(|| "did not converge".to_string()),
    })
}

fn run_method(ds: &ClusteredDataset, spec: &ExampleSpec, wf: &WorkingFit<'_>, method: Method, opts: &StudyOptions, rep: usize) -> Result<RepRecord> {
    let grid = opts.grid.clone().unwrap_or_else(|| sgee::default_tuning_grid(ds.n()));
    match method {
        Method::Oracle => {
            let support = spec.support();
            let sub = ds.select_columns(&support)?;
            let fit = crate::gee::solve_bc_gee(&sub, &WorkingCorrelationSpec::PooledResidual, &opts.bandwidth, &opts.gee)?;
            let mut beta = vec![0.0; spec.p()];
            let mut se = vec![0.0; spec.p()];
            for (k, &i) in support.iter().enumerate() {
                beta[i] = fit.beta.beta()[k];
                se[i] = fit.se[k];
            }
            record(rep, method, &spec.beta0, &beta, &se, fit.converged)
        }
        Method::Unselected => {
            let fit = wf.problem(&WorkingCorrelationSpec::PooledResidual)?.solve(&opts.gee)?;
            record(rep, method, &spec.beta0, fit.beta.beta(), &fit.se, fit.converged)
        }
        Method::Selected | Method::SelectedIdentity => {
            let problem = if method == Method::Selected {
                wf.problem(&WorkingCorrelationSpec::PooledResidual)?
            } else {
                let base = wf.problem(&WorkingCorrelationSpec::Identity)?;
                base.with_r_inverses(WorkingCovariance::Identity.inverses(ds)?)?
            };
            let sel = sgee::tune(&problem, &grid, &opts.gee)?;
            record(rep, method, &spec.beta0, sel.beta.beta(), &sel.fit.se, sel.fit.converged)
        }
    }
}

fn run_rep(spec: &ExampleSpec, opts: &StudyOptions, rep: usize) -> Vec<RepRecord> {
    let ds = generate_example(spec, rep as u64);
    let wf = match WorkingFit::new(&ds, &opts.bandwidth, &opts.gee) {
        Ok(wf) => wf,
        Err(e) => {
            return opts
                .methods
                .iter()
                .map(|&m| failed(rep, m, format!("initial estimate: {e}")))
                .collect()
        }
    };
    opts.methods
        .iter()
        .map(|&m| run_method(&ds, spec, &wf, m, opts, rep).unwrap_or_else(|e| failed(rep, m, e.to_string())))
        .collect()
}

fn summarize(method: Method, records: &[RepRecord], total: usize) -> MethodSummary {
    let ok: Vec<&RepRecord> = records.iter().filter(|r| r.method == method && r.ok).collect();
    let k = ok.len() as f64;
    let mean = |f: &dyn Fn(&RepRecord) -> f64| {
        if ok.is_empty() {
            f64::NAN
        } else {
            ok.iter().map(|r| f(r)).sum::<f64>() / k
        }
    };
    MethodSummary {
        method,
        mean_r2: mean(&|r| r.r2),
        mean_tn: mean(&|r| r.tn as f64),
        mean_tp: mean(&|r| r.tp as f64),
        successes: ok.len(),
        total,
    }
}

/// Runs every replication (in parallel) and aggregates in replication
/// order. Failed fits are recorded and excluded from the means; the report
/// is returned regardless of the failure rate.
pub fn run_study_partial(spec: &ExampleSpec, opts: &StudyOptions) -> Result<StudyReport> {
    spec.validate()?;
    opts.gee.validate()?;
    if opts.methods.is_empty() {
        return Err(Error::Config("no methods selected".into()));
    }
    let records: Vec<RepRecord> = (0..spec.reps)
        .into_par_iter()
        .map(|rep| run_rep(spec, opts, rep))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    let summaries = opts
        .methods
        .iter()
        .map(|&m| summarize(m, &records, spec.reps))
        .collect();
    Ok(StudyReport {
        spec: spec.clone(),
        summaries,
        records,
    })
}

/// As [`run_study_partial`], but more than 20% failed replications for any
/// method is an error.
pub fn run_study(spec: &ExampleSpec, opts: &StudyOptions) -> Result<StudyReport> {
    let report = run_study_partial(spec, opts)?;
    report.check_failures()?;
    Ok(report)
}

/// Markdown table with one block of method rows per cluster count.
pub fn render_markdown(reports: &[StudyReport]) -> String {
    let mut out = String::new();
    if let Some(first) = reports.first() {
        let _ = writeln!(out, "Example {}: {} replications, seed {}", first.spec.example_id, first.spec.reps, first.spec.base_seed);
        out.push('\n');
    }
    out.push_str("| n | Method | R² | TN | TP |\n|---|---|---|---|---|\n");
    for rep in reports {
        for (k, s) in rep.summaries.iter().enumerate() {
            let n = if k == 0 { rep.spec.n.to_string() } else { String::new() };
            let _ = writeln!(
                out,
                "| {} | {} | {:.4} | {:.3} | {:.3} |",
                n,
                s.method.label(),
                s.mean_r2,
                s.mean_tn,
                s.mean_tp
            );
        }
    }
    out
}

/// Summary CSV: `n,method,r2,tn,tp,successes,reps`.
pub fn write_summary_csv<W: std::io::Write>(reports: &[StudyReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["n", "method", "r2", "tn", "tp", "successes", "reps"])?;
    for rep in reports {
        for s in &rep.summaries {
            w.write_record([
                rep.spec.n.to_string(),
                s.method.key().to_string(),
                s.mean_r2.to_string(),
                s.mean_tn.to_string(),
                s.mean_tp.to_string(),
                s.successes.to_string(),
                s.total.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<summary csv>", e))?;
    Ok(())
}

/// Per-replication CSV: `n,rep,method,ok,r2,tn,tp,beta_1..beta_p,se_1..se_p`.
/// Failed records leave the numeric fields empty.
pub fn write_records_csv<W: std::io::Write>(reports: &[StudyReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let p = reports.first().map_or(0, |r| r.spec.p());
    let mut header: Vec<String> = ["n", "rep", "method", "ok", "r2", "tn", "tp"].iter().map(|s| s.to_string()).collect();
    header.extend((1..=p).map(|i| format!("beta_{i}")));
    header.extend((1..=p).map(|i| format!("se_{i}")));
    w.write_record(&header)?;
    for rep in reports {
        for r in &rep.records {
            let mut row = vec![rep.spec.n.to_string(), r.rep.to_string(), r.method.key().to_string(), r.ok.to_string()];
            if r.beta.is_empty() {
                row.extend(std::iter::repeat_n(String::new(), 3 + 2 * p));
            } else {
                row.extend([r.r2.to_string(), r.tn.to_string(), r.tp.to_string()]);
                row.extend(r.beta.iter().map(|v| v.to_string()));
                row.extend(r.se.iter().map(|v| v.to_string()));
            }
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io("<records csv>", e))?;
    Ok(())
}

/// Writes `table_exampleK.md`, `table_exampleK.csv` and
/// `records_exampleK.csv` into `dir`.
pub fn write_reports(reports: &[StudyReport], dir: &Path) -> Result<()> {
    let Some(first) = reports.first() else {
        return Ok(());
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let k = first.spec.example_id;
    let md = dir.join(format!("table_example{k}.md"));
    std::fs::write(&md, render_markdown(reports)).map_err(|e| Error::io(&md, e))?;
    let csv_path = dir.join(format!("table_example{k}.csv"));
    let f = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    write_summary_csv(reports, f)?;
    let rec_path = dir.join(format!("records_example{k}.csv"));
    let f = std::fs::File::create(&rec_path).map_err(|e| Error::io(&rec_path, e))?;
    write_records_csv(reports, f)
}
