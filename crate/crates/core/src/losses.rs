//! Classification loss, the fusion-representation contrastive term and the
//! weighted combination used for training.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::modality::Pair;
use crate::model::FusionVars;
use crate::tensor::{Scalar, Tensor};

/// `λ₁` scales classification, `λ₂..λ₄` the three pairwise contrastive terms
/// `(IT, IS)`, `(IT, TS)`, `(IS, TS)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl LossWeights {
    pub const DEFAULT: LossWeights = LossWeights {
        lambda1: 1.0,
        lambda2: 3.0,
        lambda3: 3.0,
        lambda4: 3.0,
    };

    pub fn classification_only(lambda1: f64) -> Self {
        Self {
            lambda1,
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if all.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative, got {all:?}"
            )));
        }
        if self.lambda1 <= 0.0 {
            return Err(Error::Config("loss.lambda1 must be positive".into()));
        }
        Ok(())
    }

    /// The contrastive terms in fixed order with their weights.
    pub fn contrastive_terms(&self) -> [(f64, Pair, Pair); 3] {
        [
            (self.lambda2, Pair::ImageText, Pair::ImageTabular),
            (self.lambda3, Pair::ImageText, Pair::TextTabular),
            (self.lambda4, Pair::ImageTabular, Pair::TextTabular),
        ]
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::DEFAULT
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrclTerm {
    pub weight: f64,
    pub first: Pair,
    pub second: Pair,
}

/// What the training objective consists of for one model.
#[derive(Clone, Debug, PartialEq)]
pub struct LossPlan {
    pub lambda1: f64,
    /// Terms with zero weight are dropped, so a classification-only plan has
    /// no contrastive nodes at all.
    pub terms: Vec<FrclTerm>,
    /// Divide each squared-difference sum by the vector length.
    pub frcl_mean: bool,
}

impl LossPlan {
    /// Keeps only terms whose pairs are both served by `pairs`.
    pub fn new(weights: &LossWeights, pairs: &[Pair], frcl_mean: bool) -> Self {
        let terms = weights
            .contrastive_terms()
            .into_iter()
            .filter(|(w, p, q)| *w > 0.0 && pairs.contains(p) && pairs.contains(q))
            .map(|(weight, first, second)| FrclTerm {
                weight,
                first,
                second,
            })
            .collect();
        Self {
            lambda1: weights.lambda1,
            terms,
            frcl_mean,
        }
    }

    pub fn effective_weights(&self) -> LossWeights {
        let mut w = LossWeights::classification_only(self.lambda1);
        for t in &self.terms {
            match (t.first, t.second) {
                (Pair::ImageText, Pair::ImageTabular) => w.lambda2 = t.weight,
                (Pair::ImageText, Pair::TextTabular) => w.lambda3 = t.weight,
                _ => w.lambda4 = t.weight,
            }
        }
        w
    }
}

/// Mean over samples and labels of the logit-form binary cross-entropy.
pub fn bce_multilabel<'t, T: Scalar>(logits: Var<'t, T>, targets: &Tensor<T>) -> Result<Var<'t, T>> {
    logits.bce_with_logits(targets)
}

/// `Σᵢ (f1ᵢ − f2ᵢ)²` per row, averaged over rows (`[B, N]` inputs). With
/// `mean` the per-row sum is divided by `N`.
pub fn frcl<'t, T: Scalar>(f1: Var<'t, T>, f2: Var<'t, T>, mean: bool) -> Result<Var<'t, T>> {
    let shape = f1.shape();
    if shape != f2.shape() || shape.len() != 2 {
        return Err(Error::shape("frcl", &shape, &f2.shape()));
    }
    let per_row = f1.sub(f2)?.square()?.sum()?;
    let denom = shape[0] * if mean { shape[1] } else { 1 };
    per_row.scale(T::of(1.0 / denom as f64))
}

pub struct LossParts<'t, T> {
    pub total: Var<'t, T>,
    pub classification: Var<'t, T>,
    pub contrastive: Vec<(FrclTerm, Var<'t, T>)>,
}

pub fn combined_loss<'t, T: Scalar>(
    out: &FusionVars<'t, T>,
    targets: &Tensor<T>,
    plan: &LossPlan,
) -> Result<LossParts<'t, T>> {
    let classification = bce_multilabel(out.logits, targets)?;
    let mut total = classification.scale(T::of(plan.lambda1))?;
    let mut contrastive = Vec::with_capacity(plan.terms.len());
    for term in &plan.terms {
        let lookup = |p: Pair| {
            out.fusion(p).ok_or_else(|| {
                Error::Contract(format!(
                    "contrastive term needs the {p} fusion vector, which this batch does not produce"
                ))
            })
        };
        let value = frcl(lookup(term.first)?, lookup(term.second)?, plan.frcl_mean)?;
        total = total.add(value.scale(T::of(term.weight))?)?;
        contrastive.push((*term, value));
    }
    Ok(LossParts {
        total,
        classification,
        contrastive,
    })
}
