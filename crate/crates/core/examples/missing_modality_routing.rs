//! Forward passes of an untrained tri-modal model with and without the
//! tabular modality. Under the mask only the image/text encoder runs and its
//! fusion vector is the model's fused output.
//!
//! `cargo run --example missing_modality_routing`

use trimf::autodiff::Tape;
use trimf::config::RunConfig;
use trimf::data::{generate_synthetic, SynthSpec};
use trimf::modality::{ModalityId, ModalityMask, Pair};
use trimf::model::{Batch, TriMF};
use trimf::nn::Ctx;
use trimf::Result;

pub struct Output {
    pub served_full: Vec<Pair>,
    pub served_masked: Vec<Pair>,
    /// |tri − (F_IT + F_IS + F_TS)|∞ with every modality present.
    pub sum_gap: f64,
    /// Masked tri vector equals the image/text vector bit for bit.
    pub masked_identical: bool,
}

pub fn run_example() -> Result<Output> {
    let spec = SynthSpec { sample_count: 8, ..SynthSpec::default() };
    let data = generate_synthetic(&spec)?;
    let run = RunConfig::desk();
    let (arch, _) = run.build(spec.modalities.clone(), data.header.label_count)?;
    let (model, store) = TriMF::new::<f64>(arch, 5)?;
    let samples: Vec<_> = data.samples.iter().collect();
    let shapes = &spec.modalities;
    let labels = data.header.label_count;

    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store);
    let full = model.forward(ctx, &Batch::from_samples(&samples, shapes, labels, ModalityMask::ALL)?)?;
    let tri = full.tri.to_vec();
    let mut sum = vec![0.0; tri.len()];
    for (_, f) in &full.bimf {
        for (s, v) in sum.iter_mut().zip(f.to_vec()) {
            *s += v;
        }
    }
    let sum_gap = tri.iter().zip(&sum).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let mask = ModalityMask::ALL.without(ModalityId::Tabular);
    let masked = model.forward(ctx, &Batch::from_samples(&samples, shapes, labels, mask)?)?;
    let pair_vec = masked.fusion(Pair::ImageText).expect("image/text is served").to_vec();
    Ok(Output {
        served_full: full.bimf.iter().map(|(p, _)| *p).collect(),
        served_masked: masked.bimf.iter().map(|(p, _)| *p).collect(),
        sum_gap,
        masked_identical: masked.tri.to_vec() == pair_vec,
    })
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let out = run_example()?;
    println!("all present: pairs {:?}, |tri − ΣF|∞ = {}", out.served_full, out.sum_gap);
    println!("tabular masked: pairs {:?}, tri == F_IT: {}", out.served_masked, out.masked_identical);
    Ok(())
}
