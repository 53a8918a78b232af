//! Logistic probes on single modalities and on all three concatenated, as
//! the cross-modal strength moves label signal into an interaction term.
//!
//! `cargo run --release --example logistic_probes`

use trimf::data::{generate_synthetic, split_811, SynthSpec};
use trimf::modality::ModalityId;
use trimf::probe::{probe_report, ProbeFeatures};
use trimf::Result;

pub struct Row {
    pub strength: f64,
    pub best_unimodal: f64,
    pub tri_modal: f64,
}

pub fn probes(strength: f64, samples: usize) -> Result<Row> {
    let spec = SynthSpec { sample_count: samples, cross_modal_strength: strength, ..SynthSpec::default() };
    let data = generate_synthetic(&spec)?;
    let split = split_811(&data, 0)?;
    let (train, val, test) = (data.subset(&split.train), data.subset(&split.val), data.subset(&split.test));
    let mut best_unimodal: f64 = 0.0;
    for m in ModalityId::ALL {
        best_unimodal = best_unimodal.max(probe_report(&train, &val, &test, ProbeFeatures::Unimodal(m))?.macro_auroc);
    }
    let tri_modal = probe_report(&train, &val, &test, ProbeFeatures::TriModal)?.macro_auroc;
    Ok(Row { strength, best_unimodal, tri_modal })
}

pub fn run_example() -> Result<Vec<Row>> {
    [0.0, 0.5, 1.0].into_iter().map(|s| probes(s, 2000)).collect()
}

#[allow(dead_code)]
fn main() -> Result<()> {
    println!("strength  best unimodal  tri-modal   (macro AUROC)");
    for r in run_example()? {
        println!("{:>8.1}  {:>13.3}  {:>9.3}", r.strength, r.best_unimodal, r.tri_modal);
    }
    Ok(())
}
