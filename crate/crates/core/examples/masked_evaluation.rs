//! Train once on complete samples, then evaluate with each modality masked
//! out of the test split in turn.
//!
//! `cargo run --release --example masked_evaluation`

use trimf::config::RunConfig;
use trimf::data::{generate_synthetic, split_811, SynthSpec};
use trimf::metrics::{evaluate, EvalReport};
use trimf::modality::{ModalityId, ModalityMask};
use trimf::trainer::{train, EVAL_BATCH};
use trimf::{Error, Result};

pub struct Output {
    pub reports: Vec<EvalReport>,
    /// The error for a view with only one modality left.
    pub single_modality: Error,
}

pub fn run_example(samples: usize, epochs: usize) -> Result<Output> {
    let data = generate_synthetic(&SynthSpec { sample_count: samples, ..SynthSpec::default() })?;
    let mut run = RunConfig::desk();
    run.trainer.max_epochs = epochs;
    let outcome = train::<f32>(&run, &data, None)?;
    let test = data.subset(&split_811(&data, run.seed)?.test);
    let mut reports = vec![evaluate(&outcome.model, &outcome.store, &test, EVAL_BATCH)?];
    for m in ModalityId::ALL {
        let view = test.with_mask(ModalityMask::ALL.without(m));
        reports.push(evaluate(&outcome.model, &outcome.store, &view, EVAL_BATCH)?);
    }
    let image_only = test.with_mask(ModalityMask::NONE.with(ModalityId::Image));
    let single_modality = evaluate(&outcome.model, &outcome.store, &image_only, EVAL_BATCH)
        .expect_err("one modality cannot be fused");
    Ok(Output { reports, single_modality })
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let out = run_example(2000, 15)?;
    for r in &out.reports {
        let pairs: Vec<&str> = r.active_pairs.iter().map(|p| p.name()).collect();
        println!("{:<9} AUROC {:.4}  AUPRC {:.4}  pairs {}", r.mask, r.macro_auroc, r.macro_auprc, pairs.join(", "));
    }
    println!("image only: {}", out.single_modality);
    Ok(())
}
