//! Runs the finite-difference gradient suites and prints the worst relative
//! error per probed parameter or input.
//!
//! cargo run --example grad_check -- [all|tensor|fgfe|fusion|model]

use xdlf::gradcheck::GradCheckConfig;
use xdlf::selfcheck::{run_suite, Suite};

fn main() -> xdlf::Result<()> {
    let suite: Suite = std::env::args().nth(1).as_deref().unwrap_or("all").parse()?;
    let reports = run_suite(suite, &GradCheckConfig::default())?;
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed()).count();
    println!("{} checks, {failed} failed", reports.len());
    if failed > 0 {
        std::process::exit(1);
    }
    Ok(())
}
