mod common;

use common::{auroc_pairs, average_precision, rng};
use rand::Rng;
use trimf::config::RunConfig;
use trimf::data::{generate_synthetic, SynthSpec};
use trimf::metrics::{auprc, auroc, auroc_pairwise, evaluate, predict_view, EvalReport};
use trimf::model::TriMF;

fn random_instance(r: &mut impl Rng, n: usize, levels: u32) -> (Vec<f64>, Vec<bool>) {
    loop {
        let scores: Vec<f64> = (0..n).map(|_| r.gen_range(0..levels) as f64 / 4.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| r.gen_bool(0.3)).collect();
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            return (scores, labels);
        }
    }
}

#[test]
fn sorted_auroc_equals_pairwise_counting_exactly() {
    let mut r = rng(11);
    for _ in 0..1000 {
        let n = r.gen_range(2..60);
        let levels = r.gen_range(1..8);
        let (s, y) = random_instance(&mut r, n, levels);
        let fast = auroc(&s, &y).unwrap();
        assert_eq!(fast, auroc_pairwise(&s, &y).unwrap());
        assert_eq!(fast, auroc_pairs(&s, &y).unwrap());
    }
}

#[test]
fn worked_examples() {
    let (s, y) = ([0.1, 0.4, 0.35, 0.8], [false, false, true, true]);
    assert!((auroc(&s, &y).unwrap() - 0.75).abs() < 1e-12);
    assert!((auprc(&s, &y).unwrap() - 5.0 / 6.0).abs() < 1e-12);
    let inverted: Vec<f64> = s.iter().map(|v| -v).collect();
    assert!((auroc(&inverted, &y).unwrap() - 0.25).abs() < 1e-12);
    assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[true, true, false, false]).unwrap(), 0.0);
    assert_eq!(auroc(&[3.0; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
}

#[test]
fn monotone_transforms_do_not_change_ranks() {
    let mut r = rng(12);
    for _ in 0..200 {
        let (s, y) = random_instance(&mut r, 40, 6);
        let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
        assert_eq!(auroc(&s, &y).unwrap(), auroc(&t, &y).unwrap());
        assert_eq!(auprc(&s, &y).unwrap(), auprc(&t, &y).unwrap());
    }
}

fn permutations(items: &[bool]) -> Vec<Vec<bool>> {
    if items.is_empty() {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

#[test]
fn tied_precision_matches_reference_over_every_order() {
    let labels = [true, true, false, false, false, true];
    let mut lib = 0.0;
    let mut reference = 0.0;
    let orders = permutations(&labels);
    for order in &orders {
        let scores = vec![1.0; order.len()];
        lib += auprc(&scores, order).unwrap();
        reference += average_precision(&[6.0, 5.0, 4.0, 3.0, 2.0, 1.0], order);
    }
    assert!((lib - reference).abs() < 1e-12);

    // one constant score over many samples: AP tends to the prevalence
    let mut r = rng(13);
    let y: Vec<bool> = (0..20_000).map(|_| r.gen_bool(0.3)).collect();
    let pi = y.iter().filter(|&&l| l).count() as f64 / y.len() as f64;
    let ap = auprc(&vec![0.0; y.len()], &y).unwrap();
    assert!((ap - pi).abs() < 0.02, "{ap} vs {pi}");
}

#[test]
fn single_class_labels_are_undefined_and_skipped_in_macro() {
    assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
    assert!(auprc(&[0.1, 0.2], &[false, false]).is_err());
    assert!(auroc(&[f64::NAN, 0.2], &[true, false]).is_err());

    let scores = vec![vec![0.9, 0.1, 0.5], vec![0.2, 0.3, 0.5], vec![0.6, 0.7, 0.5], vec![0.4, 0.2, 0.5]];
    let labels = vec![vec![true, false, true], vec![false, true, true], vec![true, false, true], vec![false, false, true]];
    let report = EvalReport::from_scores(&scores, &labels, "Im_Tx_Tb".into(), vec![]).unwrap();
    assert_eq!(report.auroc[2], None);
    let defined = [report.auroc[0].unwrap(), report.auroc[1].unwrap()];
    assert_eq!(report.macro_auroc, (defined[0] + defined[1]) / 2.0);
    assert_eq!(report.positive_counts, vec![2, 1, 4]);
}

#[test]
fn evaluate_agrees_with_pairwise_reference() {
    let data = generate_synthetic(&SynthSpec { sample_count: 200, ..SynthSpec::default() }).unwrap();
    let run = RunConfig::desk();
    let (arch, _) = run.build(data.header.shapes().unwrap(), data.header.label_count).unwrap();
    let (model, store) = TriMF::new::<f64>(arch, 3).unwrap();
    let view = data.view();
    let report = evaluate(&model, &store, &view, 64).unwrap();
    let logits = predict_view(&model, &store, &view, 17).unwrap();
    let mut sum = 0.0;
    let mut defined = 0;
    for l in 0..data.header.label_count {
        let s: Vec<f64> = logits.iter().map(|row| 1.0 / (1.0 + (-row[l]).exp())).collect();
        let y = view.labels(l);
        let want = auroc_pairs(&s, &y);
        match (report.auroc[l], want) {
            (Some(got), Some(want)) => {
                assert!((got - want).abs() < 1e-12, "label {l}: {got} vs {want}");
                sum += want;
                defined += 1;
            }
            (None, None) => {}
            other => panic!("label {l}: {other:?}"),
        }
    }
    assert!((report.macro_auroc - sum / defined as f64).abs() < 1e-12);
}
