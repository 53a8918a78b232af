//! Central finite differences against the analytic gradients of every op,
//! the fusion blocks and a toy model under each variant.
//!
//! `cargo run --release --example gradient_check`

use trimf::gradcheck::{run_gradcheck, GradcheckReport};
use trimf::Result;

pub fn run_example() -> Result<GradcheckReport> {
    run_gradcheck(0)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let report = run_example()?;
    for r in &report.results {
        println!("{:<4} {:<28} worst rel {:.2e}", if r.passed() { "ok" } else { "FAIL" }, r.name, r.worst_rel);
    }
    println!("{} cases, {:.1}s, all passed: {}", report.results.len(), report.seconds, report.passed());
    Ok(())
}
