//! The combined objective of one forward pass: BCE plus the three weighted
//! contrastive terms, and the same batch under the no_frcl variant.
//!
//! `cargo run --example losses`

use trimf::autodiff::Tape;
use trimf::config::RunConfig;
use trimf::data::{generate_synthetic, SynthSpec};
use trimf::losses::combined_loss;
use trimf::modality::ModalityMask;
use trimf::model::{Batch, TriMF, Variant};
use trimf::nn::Ctx;
use trimf::Result;

pub struct Output {
    pub total: f64,
    pub classification: f64,
    pub contrastive: Vec<(String, f64, f64)>,
    /// Total minus λ₁·BCE under no_frcl.
    pub no_frcl_excess: f64,
}

pub fn run_example() -> Result<Output> {
    let spec = SynthSpec { sample_count: 16, ..SynthSpec::default() };
    let data = generate_synthetic(&spec)?;
    let samples: Vec<_> = data.samples.iter().collect();
    let batch = Batch::<f64>::from_samples(&samples, &spec.modalities, data.header.label_count, ModalityMask::ALL)?;

    let mut out = None;
    let mut excess = 0.0;
    for variant in [Variant::Full, Variant::NoFrcl] {
        let run = RunConfig { variant, ..RunConfig::desk() };
        let (arch, plan) = run.build(spec.modalities.clone(), data.header.label_count)?;
        let (model, store) = TriMF::new::<f64>(arch, 1)?;
        let tape = Tape::new();
        let vars = model.forward(Ctx::new(&tape, &store), &batch)?;
        let parts = combined_loss(&vars, &batch.targets, &plan)?;
        match variant {
            Variant::Full => {
                out = Some(Output {
                    total: parts.total.item(),
                    classification: parts.classification.item(),
                    contrastive: parts
                        .contrastive
                        .iter()
                        .map(|(t, v)| (format!("{}~{}", t.first, t.second), t.weight, v.item()))
                        .collect(),
                    no_frcl_excess: 0.0,
                })
            }
            _ => excess = parts.total.item() - plan.lambda1 * parts.classification.item(),
        }
    }
    let mut out = out.expect("full variant ran");
    out.no_frcl_excess = excess;
    Ok(out)
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let out = run_example()?;
    println!("total {:.6} = BCE {:.6}", out.total, out.classification);
    for (name, w, v) in &out.contrastive {
        println!("  + {w} × frcl({name}) = {w} × {v:.3e}");
    }
    println!("no_frcl: total − λ₁·BCE = {}", out.no_frcl_excess);
    Ok(())
}
