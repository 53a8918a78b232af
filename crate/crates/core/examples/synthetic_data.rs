//! Generate a synthetic dataset, write it in the binary format, read it back.
//!
//! `cargo run --example synthetic_data`

use trimf::data::{generate_synthetic, read_dataset, write_dataset, SynthSpec};
use trimf::Result;

pub struct Output {
    pub bytes: usize,
    pub round_trip_equal: bool,
    pub target_rates: Vec<f64>,
    pub observed_rates: Vec<f64>,
}

pub fn run_example() -> Result<Output> {
    let spec = SynthSpec { sample_count: 4000, seed: 7, ..SynthSpec::default() };
    let data = generate_synthetic(&spec)?;
    let mut bytes = Vec::new();
    write_dataset(&mut bytes, &data)?;
    let back = read_dataset(bytes.as_slice())?;
    Ok(Output {
        bytes: bytes.len(),
        round_trip_equal: back == data,
        observed_rates: data.label_rates(),
        target_rates: spec.label_rates,
    })
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let out = run_example()?;
    println!("{} bytes, read back identical: {}", out.bytes, out.round_trip_equal);
    for (l, (t, o)) in out.target_rates.iter().zip(&out.observed_rates).enumerate() {
        println!("  label {l:>2}: target {t:.2}, observed {o:.3}");
    }
    Ok(())
}
