//! Command-line front end: `fit`, `select` and `simulate`.
//!
//! Options can also come from a plain `key = value` file passed with
//! `--config`; its entries are spliced in right after the subcommand, so
//! anything given on the command line wins.

use std::ffi::OsString;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::correlation::WorkingCorrelationSpec;
use crate::data::{load_csv, ClusteredDataset, CsvSchema};
use crate::error::{Error, Result};
use crate::gee::{Bandwidth, FitResult, GeeConfig, IterationRecord, WorkingFit};
use crate::sgee::{self, SelectionResult};
use crate::sim::{self, ExampleSpec, StudyOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "sigee", version, about = "Bias-corrected GEE and SGEE selection for clustered single-index models")]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Bias-corrected GEE fit of a CSV dataset.
    Fit(FitArgs),
    /// Smooth-threshold variable selection with BIC tuning.
    Select(SelectArgs),
    /// Monte Carlo study for one of the four simulation designs.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Plain-text `key = value` file; command-line flags override it.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(short, long, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, value_name = "CSV")]
    pub input: PathBuf,
    #[arg(long, default_value = "cluster_id")]
    pub cluster_column: String,
    #[arg(long, default_value = "y")]
    pub response_column: String,
    /// Time column; a column named `time` is used when present.
    #[arg(long)]
    pub time_column: Option<String>,
    /// Comma-separated covariate columns (default: x1, x2, ...).
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
    /// identity | exchangeable | time_power | pooled
    #[arg(long, default_value = "pooled")]
    pub correlation: String,
    /// Fixed correlation parameter for exchangeable or time_power.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Fixed bandwidth; cross-validated when omitted.
    #[arg(long, conflicts_with = "cv_grid")]
    pub bandwidth: Option<f64>,
    /// Comma-separated bandwidth grid for cross-validation.
    #[arg(long, value_delimiter = ',')]
    pub cv_grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = 100)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    /// Also write the Newton iteration trace to `trace.csv`.
    #[arg(long)]
    pub trace: bool,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated lambda values (default grid scales with ln(n)/sqrt(n)).
    #[arg(long, value_delimiter = ',', num_args = 0..=1, allow_hyphen_values = true)]
    pub lambda_grid: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',', num_args = 0..=1)]
    pub gamma_grid: Option<Vec<String>>,
    #[arg(long, conflicts_with = "lambda_grid")]
    pub fixed_lambda: Option<f64>,
    #[arg(long, conflicts_with = "gamma_grid")]
    pub fixed_gamma: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Design 1..4.
    #[arg(long)]
    pub example: u8,
    /// Comma-separated cluster counts.
    #[arg(long, value_delimiter = ',', default_value = "50,100")]
    pub n: Vec<usize>,
    #[arg(long, default_value_t = 200)]
    pub reps: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Fixed bandwidth for every fit; cross-validated when omitted.
    #[arg(long)]
    pub bandwidth: Option<f64>,
}

/// Exit code for an error: 1 for bad input or configuration, 2 for numerical
/// trouble.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. }
        | Error::Csv(_)
        | Error::Schema(_)
        | Error::Parse { .. }
        | Error::Validation(_)
        | Error::Domain(_)
        | Error::Config(_) => EXIT_USAGE,
        _ => EXIT_NUMERICAL,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Messages go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match splice_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cli: &Cli) -> Result<i32> {
    let common = match &cli.command {
        Command::Fit(a) => &a.common,
        Command::Select(a) => &a.common,
        Command::Simulate(a) => &a.common,
    };
    std::fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = common.threads {
        if t == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        pool = pool.num_threads(t);
    }
    let pool = pool.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Select(a) => cmd_select(a),
        Command::Simulate(a) => cmd_simulate(a),
    })
}

/// Reads `--config FILE` (if any) and inserts its entries as flags right
/// after the subcommand token.
fn splice_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut path = None;
    for (i, a) in args.iter().enumerate() {
        let s = a.to_string_lossy();
        if s == "--config" {
            path = args.get(i + 1).map(PathBuf::from);
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        }
    }
    let Some(path) = path else { return Ok(args) };
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let extra = config_flags(&text)?;
    let Some(sub) = args.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')) else {
        return Ok(args);
    };
    let at = sub + 2;
    let mut out = args[..at].to_vec();
    out.extend(extra.into_iter().map(OsString::from));
    out.extend_from_slice(&args[at..]);
    Ok(out)
}

/// Turns `key = value` lines into long flags. Blank lines and `#` comments
/// are skipped; `true`/`false` toggle switches.
pub fn config_flags(text: &str) -> Result<Vec<String>> {
    let mut flags = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected `key = value`", i + 1)))?;
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("config line {}: empty key", i + 1)));
        }
        if key == "config" {
            continue;
        }
        match (key.as_str(), value) {
            (_, "true") => flags.push(format!("--{key}")),
            (_, "false") => {}
            ("verbose", v) => {
                let count: usize = v
                    .parse()
                    .map_err(|_| Error::Config(format!("config line {}: verbose must be a count", i + 1)))?;
                flags.extend(std::iter::repeat_n("--verbose".to_string(), count));
            }
            _ => flags.push(format!("--{key}={value}")),
        }
    }
    Ok(flags)
}

impl ModelArgs {
    fn schema(&self) -> CsvSchema {
        CsvSchema {
            cluster_column: self.cluster_column.clone(),
            response_column: self.response_column.clone(),
            time_column: self.time_column.clone(),
            covariate_columns: self.covariates.clone(),
        }
    }

    fn load(&self) -> Result<ClusteredDataset> {
        load_csv(&self.input, &self.schema())
    }

    fn correlation(&self) -> Result<WorkingCorrelationSpec> {
        let spec: WorkingCorrelationSpec = self.correlation.parse()?;
        if self.alpha.is_some() && !matches!(spec, WorkingCorrelationSpec::Exchangeable(_) | WorkingCorrelationSpec::TimePower(_)) {
            return Err(Error::Config(format!("--alpha does not apply to `{spec}` correlation")));
        }
        Ok(spec.with_alpha(self.alpha))
    }

    fn bandwidth(&self) -> Result<Bandwidth> {
        Ok(match (&self.bandwidth, &self.cv_grid) {
            (Some(h), _) => Bandwidth::Fixed(*h),
            (None, Some(g)) if g.is_empty() => return Err(Error::Config("--cv-grid is empty".into())),
            (None, Some(g)) => Bandwidth::CvGrid(g.clone()),
            (None, None) => Bandwidth::Cv,
        })
    }

    fn gee(&self) -> Result<GeeConfig> {
        let cfg = GeeConfig {
            max_iter: self.max_iter,
            tol: self.tol,
            ..GeeConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn variable_names(&self, p: usize) -> Vec<String> {
        match &self.covariates {
            Some(names) if names.len() == p => names.clone(),
            _ => (1..=p).map(|k| format!("x{k}")).collect(),
        }
    }
}

fn create(dir: &Path, name: &str) -> Result<(PathBuf, csv::Writer<File>)> {
    let path = dir.join(name);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    Ok((path, csv::Writer::from_writer(file)))
}

fn finish(path: &Path, mut w: csv::Writer<File>) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_fit(dir: &Path, names: &[String], fit: &FitResult, correlation: &str) -> Result<()> {
    let (path, mut w) = create(dir, "fit.csv")?;
    w.write_record([
        "variable",
        "estimate",
        "se",
        "converged",
        "iterations",
        "residual_norm",
        "bandwidth",
        "correlation",
    ])?;
    for (q, name) in names.iter().enumerate() {
        w.write_record([
            name.clone(),
            fit.beta.beta()[q].to_string(),
            fit.se[q].to_string(),
            fit.converged.to_string(),
            fit.iterations.to_string(),
            fit.final_residual_norm.to_string(),
            fit.bandwidth.to_string(),
            correlation.to_string(),
        ])?;
    }
    finish(&path, w)
}

fn write_ghat(dir: &Path, fit: &FitResult) -> Result<()> {
    let (path, mut w) = create(dir, "ghat.csv")?;
    w.write_record(["t", "g", "dg"])?;
    for pt in &fit.g_grid {
        w.write_record([pt.t.to_string(), pt.g.to_string(), pt.dg.to_string()])?;
    }
    finish(&path, w)
}

fn write_trace(dir: &Path, stages: &[(&str, &[IterationRecord])]) -> Result<()> {
    let (path, mut w) = create(dir, "trace.csv")?;
    w.write_record(["stage", "iteration", "residual_norm", "step_norm"])?;
    for (stage, trace) in stages {
        for rec in trace.iter() {
            w.write_record([
                stage.to_string(),
                rec.iteration.to_string(),
                rec.residual_norm.to_string(),
                rec.step_norm.to_string(),
            ])?;
        }
    }
    finish(&path, w)
}

fn write_selection(dir: &Path, names: &[String], sel: &SelectionResult) -> Result<()> {
    let (path, mut w) = create(dir, "selection.csv")?;
    w.write_record(["variable", "estimate", "active", "lambda_star", "gamma_star", "converged"])?;
    for (q, name) in names.iter().enumerate() {
        w.write_record([
            name.clone(),
            sel.beta.beta()[q].to_string(),
            sel.active_set.contains(&q).to_string(),
            sel.lambda_star.to_string(),
            sel.gamma_star.to_string(),
            sel.fit.converged.to_string(),
        ])?;
    }
    finish(&path, w)?;

    let (path, mut w) = create(dir, "bic_path.csv")?;
    w.write_record(["lambda", "gamma", "bic", "df", "converged", "error"])?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    for e in &sel.bic_path {
        w.write_record([
            e.lambda.to_string(),
            e.gamma.to_string(),
            opt(e.bic.map(|b| b.to_string())),
            opt(e.df.map(|d| d.to_string())),
            e.converged.to_string(),
            opt(e.error.clone()),
        ])?;
    }
    finish(&path, w)
}

fn parse_list(values: &[String], what: &str) -> Result<Vec<f64>> {
    values
        .iter()
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|e| Error::Config(format!("{what}: `{s}`: {e}")))
        })
        .collect()
}

pub fn cmd_fit(args: &FitArgs) -> Result<i32> {
    let m = &args.model;
    let ds = m.load()?;
    let spec = m.correlation()?;
    let cfg = m.gee()?;
    let working = WorkingFit::new(&ds, &m.bandwidth()?, &cfg)?;
    let fit = working.problem(&spec)?.solve(&cfg)?;
    let names = m.variable_names(ds.p());
    let out = &args.common.out;
    write_fit(out, &names, &fit, spec.name())?;
    write_ghat(out, &fit)?;
    if m.trace {
        write_trace(out, &[("initial", &working.initial.trace), ("bc_gee", &fit.trace)])?;
    }
    if args.common.verbose > 0 {
        eprintln!(
            "fit: {} clusters, p = {}, h = {:.4}, {} iterations, |G|/n = {:.2e}",
            ds.n(),
            ds.p(),
            fit.bandwidth,
            fit.iterations,
            fit.final_residual_norm
        );
    }
    if !fit.converged {
        eprintln!("warning: bias-corrected GEE did not converge (|G|/n = {:.3e})", fit.final_residual_norm);
        return Ok(EXIT_NUMERICAL);
    }
    Ok(EXIT_OK)
}

pub fn cmd_select(args: &SelectArgs) -> Result<i32> {
    let m = &args.model;
    let ds = m.load()?;
    let spec = m.correlation()?;
    let cfg = m.gee()?;

    let lambdas = match (&args.fixed_lambda, &args.lambda_grid) {
        (Some(l), _) => vec![*l],
        (None, Some(g)) => parse_list(g, "--lambda-grid")?,
        (None, None) => sgee::default_lambda_grid(ds.n()),
    };
    let gammas = match (&args.fixed_gamma, &args.gamma_grid) {
        (Some(g), _) => vec![*g],
        (None, Some(g)) => parse_list(g, "--gamma-grid")?,
        (None, None) => sgee::DEFAULT_GAMMAS.to_vec(),
    };
    if lambdas.is_empty() {
        return Err(Error::Config("lambda grid is empty".into()));
    }
    if gammas.is_empty() {
        return Err(Error::Config("gamma grid is empty".into()));
    }
    let grid = sgee::cross_grid(&lambdas, &gammas);

    let working = WorkingFit::new(&ds, &m.bandwidth()?, &cfg)?;
    let sel = sgee::tune(&working.problem(&spec)?, &grid, &cfg)?;
    let names = m.variable_names(ds.p());
    let out = &args.common.out;
    write_selection(out, &names, &sel)?;
    write_ghat(out, &sel.fit)?;
    if m.trace {
        write_trace(out, &[("initial", &working.initial.trace), ("sgee", &sel.fit.trace)])?;
    }
    let active: Vec<&str> = sel.active_set.iter().map(|&q| names[q].as_str()).collect();
    if args.common.verbose > 0 {
        eprintln!(
            "select: lambda* = {:.4e}, gamma* = {}, active = {{{}}}",
            sel.lambda_star,
            sel.gamma_star,
            active.join(", ")
        );
    }
    let mut code = EXIT_OK;
    if !sel.fit.converged {
        eprintln!("warning: selected fit did not converge");
        code = EXIT_NUMERICAL;
    }
    if let Some(w) = &sel.warning {
        eprintln!("warning: {w}");
        code = EXIT_NUMERICAL;
    }
    Ok(code)
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<i32> {
    if args.n.is_empty() {
        return Err(Error::Config("--n needs at least one cluster count".into()));
    }
    let opts = StudyOptions {
        bandwidth: args.bandwidth.map_or(Bandwidth::Cv, Bandwidth::Fixed),
        ..StudyOptions::default()
    };
    let mut reports = Vec::with_capacity(args.n.len());
    for &n in &args.n {
        let spec = ExampleSpec::new(args.example, n, args.reps, args.seed)?;
        if args.common.verbose > 0 {
            eprintln!("simulate: example {}, n = {n}, {} reps", args.example, args.reps);
        }
        reports.push(sim::run_study_partial(&spec, &opts)?);
    }
    sim::write_reports(&reports, &args.common.out)?;
    let mut stdout = std::io::stdout().lock();
    let _ = stdout.write_all(sim::render_markdown(&reports).as_bytes());

    let mut code = EXIT_OK;
    for r in &reports {
        if let Err(e) = r.check_failures() {
            eprintln!("warning: n = {}: {e}", r.spec.n);
            code = EXIT_NUMERICAL;
        }
    }
    Ok(code)
}
