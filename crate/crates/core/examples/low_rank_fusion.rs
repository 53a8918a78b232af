//! Low-rank fusion of two vectors, compared with the explicit index-loop
//! evaluation, plus the bilinearity it implies.
//!
//! `cargo run --example low_rank_fusion`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trimf::autodiff::Tape;
use trimf::lmf::{lmf_fuse, lmf_oracle, LmfParams};
use trimf::nn::Ctx;
use trimf::params::{Init, ParamStore};
use trimf::tensor::Tensor;
use trimf::Result;

pub struct Output {
    pub fused: Vec<f64>,
    pub oracle_gap: f64,
    /// |fuse(2·a, b) − 2·fuse(a, b)|∞
    pub scaling_gap: f64,
}

pub fn run_example() -> Result<Output> {
    let (rank, d_z, d_h) = (3, 4, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::<f64>::new();
    let mut init = Init::new(&mut rng);
    let lmf = LmfParams::new(&mut store, &mut init, "lmf", rank, d_z, d_h, false)?;
    let a = [0.3, -1.2, 0.8, 0.05];
    let b = [1.0, 0.4, -0.6, 2.0];
    let a2: Vec<f64> = a.iter().map(|x| 2.0 * x).collect();

    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store);
    let row = |v: &[f64]| Tensor::from_f64(&[1, d_z], v).map(|t| tape.constant(t));
    let fused = lmf_fuse(ctx, row(&a)?, row(&b)?, &lmf)?.to_vec();
    let doubled = lmf_fuse(ctx, row(&a2)?, row(&b)?, &lmf)?.to_vec();
    let oracle = lmf_oracle(&a, &b, store.get(lmf.w_a), store.get(lmf.w_b), false)?;
    let gap = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    let twice: Vec<f64> = fused.iter().map(|x| 2.0 * x).collect();
    Ok(Output {
        oracle_gap: gap(&fused, &oracle),
        scaling_gap: gap(&doubled, &twice),
        fused,
    })
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let out = run_example()?;
    println!("fused vector: {:?}", out.fused);
    println!("max gap to the index-loop evaluation: {:.2e}", out.oracle_gap);
    println!("linear in each input: fuse(2a, b) vs 2·fuse(a, b) gap {:.2e}", out.scaling_gap);
    Ok(())
}
