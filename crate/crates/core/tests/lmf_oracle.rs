mod common;

use common::{lmf, max_abs_diff, randn, rng};
use rand::Rng;
use trimf::autodiff::Tape;
use trimf::lmf::{lmf_fuse, LmfParams};
use trimf::nn::Ctx;
use trimf::params::ParamStore;
use trimf::tensor::Tensor;

struct Instance {
    rank: usize,
    d_z: usize,
    d_h: usize,
    wa: Vec<f64>,
    wb: Vec<f64>,
}

impl Instance {
    fn random(seed: u64, max_rank: usize, max_d: usize) -> Self {
        let mut r = rng(seed);
        let rank = r.gen_range(1..=max_rank);
        let d_z = r.gen_range(1..=max_d);
        let d_h = r.gen_range(1..=max_d);
        let n = rank * d_h * d_z;
        Self { rank, d_z, d_h, wa: randn(&mut r, n), wb: randn(&mut r, n) }
    }

    fn fuse(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut store = ParamStore::<f64>::new();
        let shape = [self.rank, self.d_h, self.d_z];
        let params = LmfParams {
            rank: self.rank,
            d_z: self.d_z,
            d_h: self.d_h,
            bias_augment: false,
            w_a: store.add("w_a", Tensor::from_f64(&shape, &self.wa).unwrap()),
            w_b: store.add("w_b", Tensor::from_f64(&shape, &self.wb).unwrap()),
        };
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let row = |v: &[f64]| tape.constant(Tensor::from_f64(&[1, v.len()], v).unwrap());
        lmf_fuse(ctx, row(a), row(b), &params).unwrap().to_vec()
    }
}

#[test]
fn fixed_instance_matches_loops() {
    let mut r = rng(0);
    let inst = Instance { rank: 3, d_z: 4, d_h: 5, wa: randn(&mut r, 60), wb: randn(&mut r, 60) };
    let (a, b) = (randn(&mut r, 4), randn(&mut r, 4));
    let got = inst.fuse(&a, &b);
    let want = lmf(&a, &b, &inst.wa, &inst.wb, 3, 5, false);
    assert!(max_abs_diff(&got, &want) < 1e-12);
}

#[test]
fn hundred_random_instances_match_loops() {
    for seed in 0..100 {
        let inst = Instance::random(seed, 4, 8);
        let mut r = rng(1000 + seed);
        let (a, b) = (randn(&mut r, inst.d_z), randn(&mut r, inst.d_z));
        let got = inst.fuse(&a, &b);
        let want = lmf(&a, &b, &inst.wa, &inst.wb, inst.rank, inst.d_h, false);
        let gap = max_abs_diff(&got, &want);
        assert!(gap < 1e-12, "seed {seed}: gap {gap}");
    }
}

#[test]
fn bilinear_in_each_input() {
    for seed in 0..100 {
        let inst = Instance::random(seed, 4, 8);
        let mut r = rng(2000 + seed);
        let n = inst.d_z;
        let (a, a2, b, b2) = (randn(&mut r, n), randn(&mut r, n), randn(&mut r, n), randn(&mut r, n));
        let c: f64 = r.gen_range(-3.0..3.0);
        let base = inst.fuse(&a, &b);
        // scaling either side
        let ca: Vec<f64> = a.iter().map(|x| c * x).collect();
        let scaled: Vec<f64> = base.iter().map(|x| c * x).collect();
        assert!(max_abs_diff(&inst.fuse(&ca, &b), &scaled) < 1e-10, "seed {seed}");
        let cb: Vec<f64> = b.iter().map(|x| c * x).collect();
        assert!(max_abs_diff(&inst.fuse(&a, &cb), &scaled) < 1e-10, "seed {seed}");
        // additivity in a, then in b
        let sum_a: Vec<f64> = a.iter().zip(&a2).map(|(x, y)| x + y).collect();
        let add_a: Vec<f64> = base.iter().zip(inst.fuse(&a2, &b)).map(|(x, y)| x + y).collect();
        assert!(max_abs_diff(&inst.fuse(&sum_a, &b), &add_a) < 1e-10, "seed {seed}");
        let sum_b: Vec<f64> = b.iter().zip(&b2).map(|(x, y)| x + y).collect();
        let add_b: Vec<f64> = base.iter().zip(inst.fuse(&a, &b2)).map(|(x, y)| x + y).collect();
        assert!(max_abs_diff(&inst.fuse(&a, &sum_b), &add_b) < 1e-10, "seed {seed}");
    }
}

#[test]
fn identity_factors_and_zero_input() {
    let inst = Instance { rank: 1, d_z: 2, d_h: 2, wa: vec![1.0, 0.0, 0.0, 1.0], wb: vec![1.0, 0.0, 0.0, 1.0] };
    assert_eq!(inst.fuse(&[1.0, 2.0], &[3.0, 4.0]), vec![3.0, 8.0]);
    let inst = Instance::random(5, 4, 8);
    let z = vec![0.0; inst.d_z];
    let b = vec![1.0; inst.d_z];
    assert!(inst.fuse(&z, &b).iter().all(|&v| v == 0.0));
}
