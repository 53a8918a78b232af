//! Logistic-regression probes on raw embeddings, used as non-fusion
//! baselines and to check how much signal a synthetic dataset carries.

use crate::data::{DatasetView, Sample};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::modality::{ModalityId, ModalityMask, Pair};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeFeatures {
    /// Flattened embedding of one modality.
    Unimodal(ModalityId),
    /// Per-modality summaries of all three modalities plus every pairwise
    /// product of summaries across modalities.
    TriModal,
}

impl ProbeFeatures {
    pub fn name(self) -> String {
        match self {
            ProbeFeatures::Unimodal(m) => format!("probe_{m}"),
            ProbeFeatures::TriModal => "probe_trimodal".into(),
        }
    }
}

/// Mean over tokens, except tabular whose scalar tokens are kept as is.
fn summary(sample: &Sample, m: ModalityId, token_count: usize) -> Result<Vec<f64>> {
    let e = sample
        .embedding(m)
        .ok_or_else(|| Error::Data(format!("probe needs the {m} embedding")))?;
    let dim = e.len() / token_count;
    if m == ModalityId::Tabular || dim == 1 {
        return Ok(e.iter().map(|&v| f64::from(v)).collect());
    }
    let mut out = vec![0.0; dim];
    for tok in e.chunks_exact(dim) {
        for (o, &v) in out.iter_mut().zip(tok) {
            *o += f64::from(v);
        }
    }
    out.iter_mut().for_each(|o| *o /= token_count as f64);
    Ok(out)
}

pub fn features(view: &DatasetView<'_>, kind: ProbeFeatures) -> Result<Vec<Vec<f64>>> {
    let header = &view.dataset.header;
    let tokens = |m: ModalityId| -> Result<usize> {
        header
            .shape(m)
            .map(|s| s.token_count)
            .ok_or_else(|| Error::Data(format!("dataset does not declare {m}")))
    };
    (0..view.len())
        .map(|pos| {
            let s = view.sample(pos);
            let presence = view.presence(pos);
            match kind {
                ProbeFeatures::Unimodal(m) => {
                    if !presence.contains(m) {
                        return Err(Error::Data(format!("sample at position {pos} lacks {m}")));
                    }
                    Ok(s.embedding(m).expect("present").iter().map(|&v| f64::from(v)).collect())
                }
                ProbeFeatures::TriModal => {
                    if presence != ModalityMask::ALL {
                        return Err(Error::Data(format!("sample at position {pos} is incomplete")));
                    }
                    let sums: Vec<Vec<f64>> = ModalityId::ALL
                        .iter()
                        .map(|&m| summary(s, m, tokens(m)?))
                        .collect::<Result<_>>()?;
                    let mut f: Vec<f64> = sums.concat();
                    for p in Pair::ALL {
                        let (a, b) = p.modalities();
                        for x in &sums[a.index()] {
                            for y in &sums[b.index()] {
                                f.push(x * y);
                            }
                        }
                    }
                    Ok(f)
                }
            }
        })
        .collect()
}

/// Per-feature standardisation fitted on training rows.
#[derive(Clone, Debug)]
pub struct Standardizer {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let d = rows.first().map_or(0, Vec::len);
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let inv_std = var.iter().map(|v| if *v > 1e-12 { 1.0 / v.sqrt() } else { 0.0 }).collect();
        Self { mean, inv_std }
    }

    /// Row-major `[n, d + 1]` with a trailing constant column.
    pub fn apply(&self, rows: &[Vec<f64>]) -> Vec<f64> {
        let d = self.mean.len();
        let mut out = Vec::with_capacity(rows.len() * (d + 1));
        for r in rows {
            for j in 0..d {
                out.push((r[j] - self.mean[j]) * self.inv_std[j]);
            }
            out.push(1.0);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    /// L2 penalty on the non-bias weights.
    pub l2: f64,
    pub iterations: usize,
    pub learning_rate: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            l2: 1e-2,
            iterations: 300,
            learning_rate: 0.05,
        }
    }
}

/// Independent logistic regressions, one per label, fitted jointly by
/// full-batch Adam on the mean log-loss.
#[derive(Clone, Debug)]
pub struct LogisticProbe {
    scaler: Standardizer,
    /// `[d + 1, labels]`, last row is the bias.
    weights: Vec<f64>,
    labels: usize,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl LogisticProbe {
    pub fn fit(rows: &[Vec<f64>], targets: &[Vec<bool>], cfg: ProbeConfig) -> Result<Self> {
        if rows.is_empty() || rows.len() != targets.len() {
            return Err(Error::shape("probe", &[rows.len()], &[targets.len()]));
        }
        let labels = targets[0].len();
        let scaler = Standardizer::fit(rows);
        let x = scaler.apply(rows);
        let n = rows.len();
        let d1 = x.len() / n;
        let y: Vec<f64> = targets.iter().flatten().map(|&b| f64::from(u8::from(b))).collect();
        let mut w = vec![0.0; d1 * labels];
        let (mut m, mut v) = (vec![0.0; w.len()], vec![0.0; w.len()]);
        let mut z = vec![0.0; n * labels];
        let mut grad = vec![0.0; w.len()];
        for t in 1..=cfg.iterations {
            f64::gemm(n, d1, labels, &x, false, &w, false, &mut z, false);
            for (zi, yi) in z.iter_mut().zip(&y) {
                *zi = (sigmoid(*zi) - yi) / n as f64;
            }
            f64::gemm(d1, n, labels, &x, true, &z, false, &mut grad, false);
            for j in 0..(d1 - 1) * labels {
                grad[j] += cfg.l2 * w[j];
            }
            let (b1, b2) = (0.9f64, 0.999f64);
            for j in 0..w.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * grad[j];
                v[j] = b2 * v[j] + (1.0 - b2) * grad[j] * grad[j];
                let mh = m[j] / (1.0 - b1.powi(t as i32));
                let vh = v[j] / (1.0 - b2.powi(t as i32));
                w[j] -= cfg.learning_rate * mh / (vh.sqrt() + 1e-8);
            }
        }
        Ok(Self { scaler, weights: w, labels })
    }

    /// Probabilities `[n][labels]`.
    pub fn predict(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let x = self.scaler.apply(rows);
        let n = rows.len();
        if n == 0 {
            return Vec::new();
        }
        let d1 = x.len() / n;
        let mut z = vec![0.0; n * self.labels];
        f64::gemm(n, d1, self.labels, &x, false, &self.weights, false, &mut z, false);
        z.chunks_exact(self.labels)
            .map(|r| r.iter().map(|&v| sigmoid(v)).collect())
            .collect()
    }
}

fn targets(view: &DatasetView<'_>) -> Vec<Vec<bool>> {
    let l = view.dataset.header.label_count;
    view.samples().map(|s| s.labels.to_bools(l)).collect()
}

/// Fits on `train`, picks the L2 strength with the best macro AUROC on
/// `val` and reports on `test`.
pub fn probe_report(
    train: &DatasetView<'_>,
    val: &DatasetView<'_>,
    test: &DatasetView<'_>,
    kind: ProbeFeatures,
) -> Result<EvalReport> {
    let (xtr, xva, xte) = (features(train, kind)?, features(val, kind)?, features(test, kind)?);
    let (ytr, yva, yte) = (targets(train), targets(val), targets(test));
    let mut best: Option<(f64, LogisticProbe)> = None;
    for l2 in [1e-3, 1e-2, 1e-1] {
        let probe = LogisticProbe::fit(&xtr, &ytr, ProbeConfig { l2, ..ProbeConfig::default() })?;
        let score = EvalReport::from_scores(&probe.predict(&xva), &yva, String::new(), Vec::new())?.macro_auroc;
        if best.as_ref().map_or(true, |(s, _)| score > *s) {
            best = Some((score, probe));
        }
    }
    let (_, probe) = best.expect("grid is non-empty");
    let mask = match kind {
        ProbeFeatures::Unimodal(m) => ModalityMask::NONE.with(m).to_string(),
        ProbeFeatures::TriModal => ModalityMask::ALL.to_string(),
    };
    EvalReport::from_scores(&probe.predict(&xte), &yte, mask, Vec::new())
}
