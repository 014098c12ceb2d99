//! Local-linear estimate of the link and its derivative at a fixed index,
//! with the bandwidth chosen by leave-one-observation-out cross-validation.
//!
//! cargo run --release --example link_smoother

use sigee::smoother::{cv_bandwidth, default_cv_grid, SmootherConfig, SmootherFit};
use sigee::sim::{generate_example, ExampleSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = ExampleSpec::new(1, 100, 1, 7)?;
    let ds = generate_example(&spec, 0);
    let beta = &spec.beta0;

    let cv = cv_bandwidth(&ds, beta, &default_cv_grid(&ds, beta))?;
    println!("cross-validated h = {:.4}", cv.h);

    let fit = SmootherFit::new(&ds, beta)?;
    let cfg = SmootherConfig::new(cv.h)?;
    println!("{:>6} {:>9} {:>9} {:>9} {:>9}", "t", "g_hat", "exp(t)", "dg_hat", "exp(t)");
    for pt in fit.link_grid(&cfg, 11) {
        println!("{:>6.2} {:>9.4} {:>9.4} {:>9.4} {:>9.4}", pt.t, pt.g, pt.t.exp(), pt.dg, pt.t.exp());
    }
    Ok(())
}
