//! AUROC and average precision on small hand-checkable cases.
//!
//! `cargo run --example metrics`

use trimf::metrics::{auprc, auroc, auroc_pairwise};
use trimf::Result;

pub struct Output {
    pub auroc: f64,
    pub auroc_pairwise: f64,
    pub auprc: f64,
    pub tied_auroc: f64,
}

pub fn run_example() -> Result<Output> {
    // one of the four positive/negative pairs is misordered: 3/4
    let scores = [0.9, 0.4, 0.6, 0.2];
    let labels = [true, true, false, false];
    // positives at ranks 1 and 3: (1/1 + 2/3) / 2
    let ap_scores = [0.9, 0.8, 0.7, 0.1];
    let ap_labels = [true, false, true, false];
    Ok(Output {
        auroc: auroc(&scores, &labels)?,
        auroc_pairwise: auroc_pairwise(&scores, &labels)?,
        auprc: auprc(&ap_scores, &ap_labels)?,
        tied_auroc: auroc(&[0.5, 0.5, 0.5], &[true, false, false])?,
    })
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let out = run_example()?;
    println!("AUROC {:.4} (pairwise count {:.4})", out.auroc, out.auroc_pairwise);
    println!("average precision {:.4}", out.auprc);
    println!("all scores tied: AUROC {:.4}", out.tied_auroc);
    Ok(())
}
