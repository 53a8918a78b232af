//! Reverse-mode gradients on a small graph, checked against a central
//! difference on one weight.
//!
//! `cargo run --example autodiff`

use trimf::autodiff::Tape;
use trimf::tensor::Tensor;
use trimf::Result;

pub struct Output {
    pub loss: f64,
    pub analytic: f64,
    pub numeric: f64,
}

fn loss_at(w: &[f64]) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let x = tape.constant(Tensor::from_f64(&[2, 3], &[0.5, -1.0, 2.0, 1.5, 0.3, -0.7])?);
    let w = tape.var(Tensor::from_f64(&[3, 2], w)?.with_requires_grad(true));
    // mean(gelu(x·w)²)
    let loss = x.matmul(w)?.gelu()?.square()?.mean()?;
    let grads = loss.backward()?;
    Ok((loss.item(), grads.get(w).to_f64_vec()))
}

pub fn run_example() -> Result<Output> {
    let w = [0.1, -0.2, 0.4, 0.3, -0.5, 0.2];
    let (loss, grad) = loss_at(&w)?;
    let h = 1e-6;
    let (mut up, mut down) = (w, w);
    up[2] += h;
    down[2] -= h;
    let numeric = (loss_at(&up)?.0 - loss_at(&down)?.0) / (2.0 * h);
    Ok(Output { loss, analytic: grad[2], numeric })
}

#[allow(dead_code)]
fn main() -> Result<()> {
    let out = run_example()?;
    println!("loss {:.6}", out.loss);
    println!("d loss / d w[1,0]: analytic {:.9}, central difference {:.9}", out.analytic, out.numeric);
    Ok(())
}
