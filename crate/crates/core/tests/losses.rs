mod common;

use common::{randn, rng};
use trimf::autodiff::{Tape, Var};
use trimf::losses::{bce_multilabel, combined_loss, frcl, LossPlan, LossWeights};
use trimf::modality::{ModalityMask, Pair};
use trimf::model::FusionVars;
use trimf::tensor::Tensor;

fn row<'t>(tape: &'t Tape<f64>, v: &[f64]) -> Var<'t, f64> {
    tape.constant(Tensor::from_f64(&[1, v.len()], v).unwrap())
}

fn outputs<'t>(tape: &'t Tape<f64>, f: [&[f64]; 3], logits: &[f64]) -> FusionVars<'t, f64> {
    let bimf: Vec<(Pair, Var<'t, f64>)> = Pair::ALL.iter().zip(f).map(|(p, v)| (*p, row(tape, v))).collect();
    let tri = bimf[0].1.add(bimf[1].1).unwrap().add(bimf[2].1).unwrap();
    FusionVars { active: ModalityMask::ALL, bimf, cls: Vec::new(), tri, logits: row(tape, logits) }
}

#[test]
fn bce_matches_naive_sigmoid_log() {
    let tape = Tape::new();
    let logits: Vec<f64> = (0..41).map(|i| -5.0 + 0.25 * i as f64).collect();
    for target in [0.0, 1.0] {
        let t = Tensor::from_f64(&[1, logits.len()], &vec![target; logits.len()]).unwrap();
        let got = bce_multilabel(row(&tape, &logits), &t).unwrap().item();
        let naive = logits
            .iter()
            .map(|&x| {
                let p = 1.0 / (1.0 + (-x).exp());
                -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / logits.len() as f64;
        assert!((got - naive).abs() < 1e-10, "{got} vs {naive}");
    }
}

#[test]
fn frcl_symmetric_non_negative_zero_iff_equal() {
    let tape = Tape::new();
    let mut r = rng(9);
    for _ in 0..200 {
        let (a, b) = (randn(&mut r, 6), randn(&mut r, 6));
        for mean in [false, true] {
            let ab = frcl(row(&tape, &a), row(&tape, &b), mean).unwrap().item();
            let ba = frcl(row(&tape, &b), row(&tape, &a), mean).unwrap().item();
            assert_eq!(ab, ba);
            assert!(ab > 0.0);
            assert_eq!(frcl(row(&tape, &a), row(&tape, &a), mean).unwrap().item(), 0.0);
        }
    }
}

#[test]
fn coinciding_vectors_leave_only_classification() {
    let tape = Tape::new();
    let f = [0.3, -1.0, 2.0];
    let out = outputs(&tape, [&f, &f, &f], &[0.2, -0.7]);
    let targets = Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap();
    let plan = LossPlan::new(&LossWeights::DEFAULT, &Pair::ALL, false);
    let parts = combined_loss(&out, &targets, &plan).unwrap();
    assert_eq!(parts.total.item(), plan.lambda1 * parts.classification.item());
}

#[test]
fn no_frcl_plan_is_classification_only() {
    let tape = Tape::new();
    let out = outputs(&tape, [&[1.0, 0.0], &[0.0, 2.0], &[-1.0, 5.0]], &[0.4]);
    let targets = Tensor::from_f64(&[1, 1], &[1.0]).unwrap();
    let plan = LossPlan::new(&LossWeights::classification_only(1.0), &Pair::ALL, false);
    let parts = combined_loss(&out, &targets, &plan).unwrap();
    assert!(parts.contrastive.is_empty());
    assert_eq!(parts.total.item(), parts.classification.item());
}

#[test]
fn published_weights_give_ten() {
    // BCE = 1 at logit −ln(e − 1) with target 1; unit-distance simplex corners
    let tape = Tape::new();
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let logit = -(std::f64::consts::E - 1.0).ln();
    let out = outputs(&tape, [&[s, 0.0, 0.0], &[0.0, s, 0.0], &[0.0, 0.0, s]], &[logit]);
    let targets = Tensor::from_f64(&[1, 1], &[1.0]).unwrap();
    let plan = LossPlan::new(&LossWeights::DEFAULT, &Pair::ALL, false);
    let parts = combined_loss(&out, &targets, &plan).unwrap();
    assert!((parts.classification.item() - 1.0).abs() < 1e-12);
    for (_, v) in &parts.contrastive {
        assert!((v.item() - 1.0).abs() < 1e-12);
    }
    assert!((parts.total.item() - 10.0).abs() < 1e-11);
}
