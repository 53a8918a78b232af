//! Multi-head attention and the SA / CA units on random token streams.
//!
//! `cargo run --example attention`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trimf::autodiff::Tape;
use trimf::blocks::{AttentionParams, CaUnit, SaUnit};
use trimf::nn::Ctx;
use trimf::params::{Init, ParamStore};
use trimf::Result;

pub struct Output {
    pub weight_shape: Vec<usize>,
    /// Largest deviation of an attention row sum from 1.
    pub row_sum_error: f64,
    pub sa_shape: Vec<usize>,
    pub ca_shapes: (Vec<usize>, Vec<usize>),
}

pub fn run_example() -> Result<Output> {
    let (batch, d_model, heads) = (2, 8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let mut init = Init::new(&mut rng);
    let attn = AttentionParams::new(&mut store, &mut init, "attn", d_model, heads)?;
    let sa = SaUnit::new(&mut store, &mut init, "sa", d_model, heads, 16)?;
    let ca = CaUnit::new(&mut store, &mut init, "ca", d_model, heads)?;
    let image = init.normal(&[batch * 5, d_model], 1.0);
    let text = init.normal(&[batch * 3, d_model], 1.0);

    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store);
    let (image, text) = (tape.constant(image), tape.constant(text));
    // text queries attend over image keys
    let attended = attn.forward(ctx, text, image, batch)?;
    let weights = attended.weights.value();
    let cols = weights.shape()[2];
    let row_sum_error = weights
        .data()
        .chunks(cols)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let sa_out = sa.forward(ctx, image, batch)?;
    let (ca_image, ca_text) = ca.forward(ctx, image, text, batch)?;
    Ok(Output {
        weight_shape: weights.shape().to_vec(),
        row_sum_error,
        sa_shape: sa_out.shape(),
        ca_shapes: (ca_image.shape(), ca_text.shape()),
    })
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let out = run_example()?;
    println!("attention weights {:?} (batch·heads, text tokens, image tokens)", out.weight_shape);
    println!("max |row sum − 1| = {:.2e}", out.row_sum_error);
    println!("SA unit keeps the stream shape: {:?}", out.sa_shape);
    println!("CA unit returns both streams: {:?} and {:?}", out.ca_shapes.0, out.ca_shapes.1);
    Ok(())
}
