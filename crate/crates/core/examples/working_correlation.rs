//! Resolves each working correlation structure from working-independence
//! residuals and prints the matrix used for a three-observation cluster.
//!
//! cargo run --release --example working_correlation

use sigee::correlation::{build_r, WorkingCorrelationSpec};
use sigee::gee::{Bandwidth, GeeConfig, WorkingFit};
use sigee::sim::{generate_example, ExampleSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // errors are generated with correlation 0.5^|j - k|
    let ds = generate_example(&ExampleSpec::new(1, 200, 1, 7)?, 0);
    let working = WorkingFit::new(&ds, &Bandwidth::Cv, &GeeConfig::default())?;

    for spec in [
        WorkingCorrelationSpec::Identity,
        WorkingCorrelationSpec::Exchangeable(None),
        WorkingCorrelationSpec::TimePower(None),
        WorkingCorrelationSpec::PooledResidual,
    ] {
        let cov = working.working_covariance(&spec)?;
        let r = build_r(&cov, 0, &ds.clusters()[0])?;
        println!("{spec}:{r:.3}");
    }
    Ok(())
}
