//! Runs a small Monte Carlo study and prints the summary table.
//!
//! cargo run --release --example simulation_table -- [example] [n] [reps] [seed]

use std::time::Instant;

use sigee::sim::{render_markdown, run_study_partial, ExampleSpec, StudyOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: u64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(default);
    let spec = ExampleSpec::new(arg(0, 1) as u8, arg(1, 50) as usize, arg(2, 10) as usize, arg(3, 7))?;

    let start = Instant::now();
    let report = run_study_partial(&spec, &StudyOptions::default())?;
    println!("{}", render_markdown(std::slice::from_ref(&report)));
    for s in &report.summaries {
        println!("{:<10} converged {}/{}", s.method.key(), s.successes, s.total);
    }
    println!("elapsed {:.1?}", start.elapsed());
    Ok(())
}
