//! Ranking metrics per label and their macro averages.

use serde::{Deserialize, Serialize};

use crate::data::DatasetView;
use crate::error::{Error, Result};
use crate::modality::Pair;
use crate::model::{group_by_presence, Batch, TriMF};
use crate::params::ParamStore;
use crate::tensor::Scalar;

fn class_counts(labels: &[bool]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l).count();
    (pos, labels.len() - pos)
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::shape("metric", &[scores.len()], &[labels.len()]));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("score is NaN".into()));
    }
    Ok(())
}

/// Probability that a positive outscores a negative, ties counting half.
/// Computed from the integer count `2·#(s⁺ > s⁻) + #(s⁺ = s⁻)` so the result
/// is exactly reproducible by pairwise counting.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes ({pos} positives, {neg} negatives)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // walk tie groups in ascending score order
    let mut half_units: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        half_units += p * (2 * neg_below + n);
        neg_below += n;
        i = j;
    }
    Ok(half_units as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// Pairwise reference for [`auroc`], `O(n²)`.
pub fn auroc_pairwise(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both classes".into()));
    }
    let mut half_units: u128 = 0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            if si > sj {
                half_units += 2;
            } else if si == sj {
                half_units += 1;
            }
        }
    }
    Ok(half_units as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// Average precision: mean over positives of the precision at the positive's
/// rank in descending-score order. Equal scores keep their input order.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let (pos, _) = class_counts(labels);
    if pos == 0 {
        return Err(Error::UndefinedMetric("AUPRC needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / pos as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Condition label such as `Im_Tx`.
    pub mask: String,
    pub active_pairs: Vec<Pair>,
    pub sample_count: usize,
    pub positive_counts: Vec<usize>,
    /// `None` where the label has a single class in the evaluated set.
    pub auroc: Vec<Option<f64>>,
    pub auprc: Vec<Option<f64>>,
    pub macro_auroc: f64,
    pub macro_auprc: f64,
}

impl EvalReport {
    /// Builds a report from per-sample scores (`scores[i][l]`) and labels.
    pub fn from_scores(scores: &[Vec<f64>], labels: &[Vec<bool>], mask: String, active_pairs: Vec<Pair>) -> Result<Self> {
        if scores.len() != labels.len() || scores.is_empty() {
            return Err(Error::shape("evaluate", &[scores.len()], &[labels.len()]));
        }
        let label_count = labels[0].len();
        let mut report = EvalReport {
            mask,
            active_pairs,
            sample_count: scores.len(),
            positive_counts: Vec::with_capacity(label_count),
            auroc: Vec::with_capacity(label_count),
            auprc: Vec::with_capacity(label_count),
            macro_auroc: 0.0,
            macro_auprc: 0.0,
        };
        let mut defined = 0usize;
        for l in 0..label_count {
            let s: Vec<f64> = scores.iter().map(|row| row[l]).collect();
            let y: Vec<bool> = labels.iter().map(|row| row[l]).collect();
            let (pos, neg) = class_counts(&y);
            report.positive_counts.push(pos);
            if pos == 0 || neg == 0 {
                log::warn!("label {l}: single class in evaluation set, excluded from macro average");
                report.auroc.push(None);
                report.auprc.push(None);
                continue;
            }
            let ctx = |e: Error| Error::UndefinedMetric(format!("label {l}: {e}"));
            let roc = auroc(&s, &y).map_err(ctx)?;
            let pr = auprc(&s, &y).map_err(ctx)?;
            report.auroc.push(Some(roc));
            report.auprc.push(Some(pr));
            report.macro_auroc += roc;
            report.macro_auprc += pr;
            defined += 1;
        }
        if defined == 0 {
            return Err(Error::UndefinedMetric(
                "no label has both classes in the evaluation set".into(),
            ));
        }
        report.macro_auroc /= defined as f64;
        report.macro_auprc /= defined as f64;
        Ok(report)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Raw logits for every view position, in view order.
pub fn predict_view<T: Scalar>(
    model: &TriMF,
    store: &ParamStore<T>,
    view: &DatasetView<'_>,
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut out = vec![Vec::new(); view.len()];
    for (_, positions) in group_by_presence(view) {
        for chunk in positions.chunks(batch_size.max(1)) {
            let batch = Batch::from_view(view, chunk, &model.arch.inputs)?;
            let logits = model.predict(store, &batch)?;
            for (row, &pos) in chunk.iter().enumerate() {
                out[pos] = logits.row(row).iter().map(|v| v.f64()).collect();
            }
        }
    }
    Ok(out)
}

/// Sigmoid scores of the model over the (masked) view, summarised per label.
pub fn evaluate<T: Scalar>(
    model: &TriMF,
    store: &ParamStore<T>,
    view: &DatasetView<'_>,
    batch_size: usize,
) -> Result<EvalReport> {
    if view.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty split".into()));
    }
    let groups = group_by_presence(view);
    let mut active = Vec::new();
    for (mask, _) in &groups {
        for p in model.served_pairs(*mask)? {
            if !active.contains(&p) {
                active.push(p);
            }
        }
    }
    let scores: Vec<Vec<f64>> = predict_view(model, store, view, batch_size)?
        .into_iter()
        .map(|row| row.into_iter().map(sigmoid).collect())
        .collect();
    let label_count = view.dataset.header.label_count;
    let labels: Vec<Vec<bool>> = view.samples().map(|s| s.labels.to_bools(label_count)).collect();
    let mask = if groups.len() == 1 {
        groups[0].0.to_string()
    } else {
        "mixed".to_string()
    };
    EvalReport::from_scores(&scores, &labels, mask, active)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.3, 0.2], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.2, 0.9], &[true, false]).unwrap(), 0.0);
        assert_eq!(auroc(&[0.9, 0.4, 0.6, 0.2], &[true, true, false, false]).unwrap(), 0.75);
        let ap = auprc(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(auprc(&[0.3, 0.9, 0.1], &[false, true, false]).unwrap(), 1.0);
    }

    #[test]
    fn undefined_cases() {
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(auprc(&[0.1, 0.2], &[false, false]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn ties_count_half() {
        assert_eq!(auroc(&[0.5; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert_eq!(auroc_pairwise(&[0.5; 4], &[true, false, true, false]).unwrap(), 0.5);
    }

    #[test]
    fn report_skips_single_class_labels() {
        let scores = vec![vec![0.9, 0.1], vec![0.2, 0.3], vec![0.4, 0.5]];
        let labels = vec![vec![true, false], vec![false, false], vec![true, false]];
        let r = EvalReport::from_scores(&scores, &labels, "Im_Tx_Tb".into(), Pair::ALL.to_vec()).unwrap();
        assert_eq!(r.auroc[1], None);
        assert_eq!(r.macro_auroc, 1.0);
        assert_eq!(r.positive_counts, vec![2, 0]);
    }
}
