//! Smooth-threshold selection tuned by BIC over the default grid, plus the
//! BIC path.
//!
//! cargo run --release --example select_variables -- [path.csv]

use sigee::correlation::WorkingCorrelationSpec;
use sigee::data::{load_csv, CsvSchema};
use sigee::gee::{Bandwidth, GeeConfig, WorkingFit};
use sigee::sgee;
use sigee::sim::{generate_example, ExampleSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = match std::env::args().nth(1) {
        Some(path) => load_csv(path, &CsvSchema::default())?,
        None => generate_example(&ExampleSpec::new(1, 100, 1, 7)?, 0),
    };
    let cfg = GeeConfig::default();
    let problem = WorkingFit::new(&ds, &Bandwidth::Cv, &cfg)?.problem(&WorkingCorrelationSpec::PooledResidual)?;

    let sel = sgee::select(&problem, None, &cfg)?;
    println!("lambda* = {:.4e}, gamma* = {}", sel.lambda_star, sel.gamma_star);
    println!("beta_hat = {:?}", sel.beta.beta());
    println!(
        "active   = {:?}",
        sel.active_set.iter().map(|q| format!("x{}", q + 1)).collect::<Vec<_>>()
    );
    if let Some(w) = &sel.warning {
        println!("warning: {w}");
    }

    println!("\n{:>10} {:>5} {:>10} {:>3}", "lambda", "gamma", "bic", "df");
    for e in &sel.bic_path {
        match (e.bic, e.df) {
            (Some(b), Some(df)) => println!("{:>10.3e} {:>5} {:>10.3} {:>3}", e.lambda, e.gamma, b, df),
            _ => println!("{:>10.3e} {:>5} {:>10} {:>3}", e.lambda, e.gamma, "-", "-"),
        }
    }
    Ok(())
}
