//! The ablation suite on a reduced budget: four variants, one seed, a small
//! dataset and a few epochs. Tables go to the given directory.
//!
//! `cargo run --release --example ablation_suite [out_dir]`

use std::path::Path;

use trimf::data::SynthSpec;
use trimf::experiment::{DataSource, ExperimentConfig, Runner, Suite, SuiteOutput};
use trimf::Result;

pub fn run_example(out: &Path) -> Result<SuiteOutput> {
    let mut config = ExperimentConfig::desk();
    config.seeds = vec![0];
    config.run.trainer.max_epochs = 3;
    config.data = DataSource::Synthetic(SynthSpec { sample_count: 300, ..SynthSpec::default() });
    let mut runner = Runner::new(config)?;
    let output = runner.run_suite(Suite::Ablation)?;
    output.write(out)?;
    Ok(output)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "runs/ablation_example".into());
    let out = run_example(Path::new(&dir))?;
    for r in &out.rows {
        println!(
            "{:<16} params {:>7}  AUROC {:.4}  {}",
            r.model,
            r.param_count.unwrap_or(0),
            r.macro_auroc.unwrap_or(f64::NAN),
            r.status
        );
    }
    println!("tables in {dir}");
    Ok(())
}
