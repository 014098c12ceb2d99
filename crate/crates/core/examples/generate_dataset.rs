//! Writes one replication of a simulation design as CSV, ready for
//! `sigee fit --input ...`.
//!
//! cargo run --example generate_dataset -- [example] [n] [seed] [path]

use sigee::sim::{generate_example, ExampleSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let example: u8 = args.first().map_or(Ok(1), |s| s.parse())?;
    let n: usize = args.get(1).map_or(Ok(100), |s| s.parse())?;
    let seed: u64 = args.get(2).map_or(Ok(7), |s| s.parse())?;
    let path = args.get(3).cloned().unwrap_or_else(|| format!("example{example}_n{n}.csv"));

    let spec = ExampleSpec::new(example, n, 1, seed)?;
    let ds = generate_example(&spec, 0);
    ds.write_csv(&path)?;
    println!("wrote {path}: {} clusters, {} rows, p = {}", ds.n(), ds.total_obs(), ds.p());
    println!("true index: {:?}", spec.beta0);
    Ok(())
}
