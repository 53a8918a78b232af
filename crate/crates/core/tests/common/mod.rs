//! Reference implementations written independently of the library, with
//! plain loops over `Vec<f64>`.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // Box-Muller, so the oracles do not share the library's sampler
    (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Row-major matrix.
#[derive(Clone, Debug)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows);
        let mut out = vec![0.0; self.rows * other.cols];
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut s = 0.0;
                for k in 0..self.cols {
                    s += self.at(i, k) * other.at(k, j);
                }
                out[i * other.cols + j] = s;
            }
        }
        Mat::new(self.rows, other.cols, out)
    }

    pub fn add_row(&self, bias: &[f64]) -> Mat {
        let mut out = self.data.clone();
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[r * self.cols + c] += bias[c];
            }
        }
        Mat::new(self.rows, self.cols, out)
    }

    pub fn add(&self, other: &Mat) -> Mat {
        Mat::new(self.rows, self.cols, self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat::new(self.rows, self.cols, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn cols_range(&self, start: usize, end: usize) -> Mat {
        let mut out = Vec::new();
        for r in 0..self.rows {
            for c in start..end {
                out.push(self.at(r, c));
            }
        }
        Mat::new(self.rows, end - start, out)
    }
}

/// `x·W + b` with `W` stored `[d_in, d_out]`.
pub struct Affine {
    pub w: Mat,
    pub b: Vec<f64>,
}

impl Affine {
    pub fn apply(&self, x: &Mat) -> Mat {
        x.matmul(&self.w).add_row(&self.b)
    }
}

pub fn softmax_rows(m: &Mat) -> Mat {
    let mut out = m.data.clone();
    for r in 0..m.rows {
        let row = &mut out[r * m.cols..(r + 1) * m.cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Mat::new(m.rows, m.cols, out)
}

/// Multi-head attention of `q_in` over `kv_in` for one sample, one head at a
/// time with explicit dot products.
pub fn mha(q_in: &Mat, kv_in: &Mat, wq: &Affine, wk: &Affine, wv: &Affine, wo: &Affine, heads: usize) -> Mat {
    let d = wq.w.cols;
    let dh = d / heads;
    let (q, k, v) = (wq.apply(q_in), wk.apply(kv_in), wv.apply(kv_in));
    let mut merged = vec![0.0; q.rows * d];
    for h in 0..heads {
        let (qh, kh, vh) = (q.cols_range(h * dh, (h + 1) * dh), k.cols_range(h * dh, (h + 1) * dh), v.cols_range(h * dh, (h + 1) * dh));
        let mut scores = vec![0.0; qh.rows * kh.rows];
        for i in 0..qh.rows {
            for j in 0..kh.rows {
                let mut s = 0.0;
                for c in 0..dh {
                    s += qh.at(i, c) * kh.at(j, c);
                }
                scores[i * kh.rows + j] = s / (dh as f64).sqrt();
            }
        }
        let p = softmax_rows(&Mat::new(qh.rows, kh.rows, scores));
        for i in 0..qh.rows {
            for c in 0..dh {
                let mut s = 0.0;
                for j in 0..kh.rows {
                    s += p.at(i, j) * vh.at(j, c);
                }
                merged[i * d + h * dh + c] = s;
            }
        }
    }
    wo.apply(&Mat::new(q.rows, d, merged))
}

pub fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64], eps: f64) -> Mat {
    let mut out = x.data.clone();
    for r in 0..x.rows {
        let row = &mut out[r * x.cols..(r + 1) * x.cols];
        let mean = row.iter().sum::<f64>() / x.cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / x.cols as f64;
        for (c, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) / (var + eps).sqrt() * gain[c] + bias[c];
        }
    }
    Mat::new(x.rows, x.cols, out)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// `h_j = (Σᵢ Σₖ Wa[i][j][k]·a_k)(Σᵢ Σₖ Wb[i][j][k]·b_k)` with a trailing 1
/// on both inputs when `bias_augment`.
pub fn lmf(a: &[f64], b: &[f64], wa: &[f64], wb: &[f64], rank: usize, d_h: usize, bias_augment: bool) -> Vec<f64> {
    let ext = |z: &[f64]| -> Vec<f64> {
        let mut v = z.to_vec();
        if bias_augment {
            v.push(1.0);
        }
        v
    };
    let (a, b) = (ext(a), ext(b));
    let d_in = a.len();
    (0..d_h)
        .map(|j| {
            let mut pa = 0.0;
            let mut pb = 0.0;
            for i in 0..rank {
                for k in 0..d_in {
                    pa += wa[(i * d_h + j) * d_in + k] * a[k];
                    pb += wb[(i * d_h + j) * d_in + k] * b[k];
                }
            }
            pa * pb
        })
        .collect()
}

/// Counts positive/negative pairs; ties score one half.
pub fn auroc_pairs(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            den += 1.0;
            if scores[i] > scores[j] {
                num += 1.0;
            } else if scores[i] == scores[j] {
                num += 0.5;
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

/// Mean precision at each positive's rank in a stable descending sort
/// (distinct scores only).
pub fn average_precision(scores: &[f64], labels: &[bool]) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut hits = 0.0;
    let mut sum = 0.0;
    for (rank, &i) in idx.iter().enumerate() {
        if labels[i] {
            hits += 1.0;
            sum += hits / (rank + 1) as f64;
        }
    }
    sum / hits
}

/// Adam with L2 added to the gradient, on a single flat parameter vector.
pub struct AdamOracle {
    pub lr: f64,
    pub wd: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: i32,
}

impl AdamOracle {
    pub fn new(lr: f64, wd: f64, n: usize) -> Self {
        Self { lr, wd, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        self.t += 1;
        for i in 0..theta.len() {
            let g = grad[i] + self.wd * theta[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mh = self.m[i] / (1.0 - b1.powi(self.t));
            let vh = self.v[i] / (1.0 - b2.powi(self.t));
            theta[i] -= self.lr * mh / (vh.sqrt() + eps);
        }
    }
}

/// Largest relative gap between `analytic` and central differences of `f`
/// at `x`, with the denominator floored at `floor`.
pub fn fd_rel_error(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], h: f64, floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut up = x.to_vec();
        let mut down = x.to_vec();
        up[i] += h;
        down[i] -= h;
        let numeric = (f(&up) - f(&down)) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(floor);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}
