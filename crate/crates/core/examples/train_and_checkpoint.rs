//! Train a small tri-modal model, then rebuild it from `checkpoint.best` and
//! check the restored model scores the test split identically.
//!
//! `cargo run --release --example train_and_checkpoint [out_dir]`

use std::path::Path;

use trimf::config::RunConfig;
use trimf::data::{generate_synthetic, split_811, SynthSpec};
use trimf::metrics::evaluate;
use trimf::model::TriMF;
use trimf::trainer::{load_checkpoint, restore_into, train, EVAL_BATCH};
use trimf::Result;

pub struct Output {
    pub epochs: usize,
    pub best_epoch: usize,
    pub test_auroc: f64,
    pub restored_auroc: f64,
    pub files: Vec<String>,
}

pub fn run_example(dir: &Path) -> Result<Output> {
    let spec = SynthSpec { sample_count: 400, ..SynthSpec::default() };
    let data = generate_synthetic(&spec)?;
    let mut run = RunConfig::desk();
    run.trainer.max_epochs = 6;
    let outcome = train::<f32>(&run, &data, Some(dir))?;

    let ckpt = load_checkpoint::<f32>(&dir.join("checkpoint.best"))?;
    let (model, mut store) = TriMF::new::<f32>(ckpt.meta.arch.clone(), ckpt.meta.seed)?;
    restore_into(&mut store, &ckpt)?;
    let test = data.subset(&split_811(&data, run.seed)?.test);
    let restored = evaluate(&model, &store, &test, EVAL_BATCH)?;

    let mut files: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| trimf::Error::Data(e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect();
    files.sort();
    Ok(Output {
        epochs: outcome.report.epochs_run,
        best_epoch: outcome.report.best_epoch,
        test_auroc: outcome.report.test.macro_auroc,
        restored_auroc: restored.macro_auroc,
        files,
    })
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "runs/example".into());
    let out = run_example(Path::new(&dir))?;
    println!("{} epochs, best {}; files {:?}", out.epochs, out.best_epoch, out.files);
    println!("test macro AUROC {:.4}, after reload {:.4}", out.test_auroc, out.restored_auroc);
    Ok(())
}
