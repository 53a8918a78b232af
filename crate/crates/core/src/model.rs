//! The tri-modal model: per-modality projections, one two-stream encoder
//! plus low-rank fuser per modality pair, summation of the pair vectors and
//! a linear classifier. Pairs lacking a present modality are skipped.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::blocks::{BimfEncoder, ClsPair, EncoderSpec};
use crate::data::{DatasetView, ModalityShapes, Sample};
use crate::error::{Error, Result};
use crate::lmf::LmfParams;
use crate::losses::{LossPlan, LossWeights};
use crate::modality::{ModalityId, ModalityMask, Pair};
use crate::nn::{Ctx, Linear};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// Every self-attention unit replaced by an extra co-attention unit.
    NoSa,
    /// Fusers removed; the `[cls]` vectors are concatenated.
    NoLmf,
    /// Architecture unchanged, contrastive weights zeroed.
    NoFrcl,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoSa, Variant::NoLmf, Variant::NoFrcl];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSa => "no_sa",
            Variant::NoLmf => "no_lmf",
            Variant::NoFrcl => "no_frcl",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {s:?} (expected full, no_sa, no_lmf or no_frcl)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    /// Hidden width of the feed-forward inside each self-attention unit.
    pub d_ff: usize,
    pub lmf_rank: usize,
    pub fusion_dim: usize,
    /// Output width of the per-feature tabular embedder.
    pub tabular_embed_dim: usize,
    pub lmf_bias_augment: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("model.{field}: {why}")));
        for (field, v) in [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("lmf_rank", self.lmf_rank),
            ("fusion_dim", self.fusion_dim),
            ("tabular_embed_dim", self.tabular_embed_dim),
        ] {
            if v == 0 {
                return bad(field, "must be positive".into());
            }
        }
        if self.d_model % self.heads != 0 {
            return bad(
                "heads",
                format!("{} heads do not divide d_model {}", self.heads, self.d_model),
            );
        }
        if self.d_ff < self.d_model {
            return bad("d_ff", format!("{} is below d_model {}", self.d_ff, self.d_model));
        }
        Ok(())
    }
}

/// Everything needed to build the parameter tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub model: ModelConfig,
    pub inputs: ModalityShapes,
    pub label_count: usize,
    /// Pairs with their own encoder; all three for the tri-modal model.
    pub pairs: Vec<Pair>,
    pub variant: Variant,
}

impl ArchConfig {
    pub fn new(model: ModelConfig, inputs: ModalityShapes, label_count: usize) -> Self {
        Self {
            model,
            inputs,
            label_count,
            pairs: Pair::ALL.to_vec(),
            variant: Variant::Full,
        }
    }

    pub fn single_pair(&self, pair: Pair) -> Self {
        Self {
            pairs: vec![pair],
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.label_count == 0 {
            return Err(Error::Config("label_count must be positive".into()));
        }
        if self.pairs.is_empty() {
            return Err(Error::Config("at least one modality pair is required".into()));
        }
        let mut sorted = self.pairs.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.pairs.len() {
            return Err(Error::Config(format!("duplicate pairs in {:?}", self.pairs)));
        }
        if self.inputs.tabular.native_dim != 1 {
            return Err(Error::Config("inputs.tabular.native_dim must be 1".into()));
        }
        Ok(())
    }

    /// Modalities touched by any configured pair.
    pub fn modalities(&self) -> ModalityMask {
        self.pairs
            .iter()
            .fold(ModalityMask::NONE, |m, p| {
                let (a, b) = p.modalities();
                m.with(a).with(b)
            })
    }

    pub fn classifier_input_dim(&self) -> usize {
        match self.variant {
            Variant::NoLmf => 2 * self.model.d_model * self.pairs.len(),
            _ => self.model.fusion_dim,
        }
    }

    /// Parameter count from the configuration alone.
    pub fn param_count(&self) -> usize {
        let m = &self.model;
        let d = m.d_model;
        let attn = 4 * (d * d + d);
        let sa = attn + (d * m.d_ff + m.d_ff) + (m.d_ff * d + d) + 4 * d;
        let ca = 2 * attn + 4 * d;
        let mixer = if self.variant == Variant::NoSa { ca } else { 2 * sa };
        let layer = mixer + ca;
        let tokens = |id: ModalityId| self.inputs.get(id).token_count;
        let encoders: usize = self
            .pairs
            .iter()
            .map(|p| {
                let (a, b) = p.modalities();
                m.layers * layer + (tokens(a) + 1 + tokens(b) + 1) * d + 2 * d
            })
            .sum();
        let fusers = if self.variant == Variant::NoLmf {
            0
        } else {
            self.pairs.len() * 2 * m.lmf_rank * m.fusion_dim * (d + usize::from(m.lmf_bias_augment))
        };
        let inputs: usize = self
            .modalities()
            .present()
            .map(|id| match id {
                ModalityId::Tabular => 2 * m.tabular_embed_dim + m.tabular_embed_dim * d + d,
                _ => self.inputs.get(id).native_dim * d + d,
            })
            .sum();
        let classifier = self.classifier_input_dim() * self.label_count + self.label_count;
        encoders + fusers + inputs + classifier
    }
}

/// Maps each scalar feature to `x·w + b`.
#[derive(Clone, Debug)]
pub struct TabularEmbedder {
    pub weight: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl TabularEmbedder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, dim: usize) -> Self {
        let weight = store.add(format!("{name}.w"), init.normal(&[1, dim], 1.0));
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[dim]));
        Self { weight, bias, dim }
    }

    /// `[rows, 1]` → `[rows, dim]`.
    pub fn forward<'t, T: Scalar>(&self, ctx: Ctx<'t, T>, features: Var<'t, T>) -> Result<Var<'t, T>> {
        features.matmul(ctx.p(self.weight))?.add_row(ctx.p(self.bias))
    }
}

/// Row `i` of the result is `features[i]·weight + bias`.
pub fn embed_tabular<T: Scalar>(
    features: &[T],
    params: &TabularEmbedder,
    store: &ParamStore<T>,
) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store);
    let x = tape.constant(Tensor::new(&[features.len(), 1], features.to_vec())?);
    Ok(params.forward(ctx, x)?.value())
}

#[derive(Clone, Debug)]
pub struct PairModule {
    pub pair: Pair,
    pub encoder: BimfEncoder,
    pub fuser: Option<LmfParams>,
}

#[derive(Clone, Debug)]
pub struct TriMF {
    pub arch: ArchConfig,
    /// Native width → `d_model` per modality (tabular: embed width → `d_model`).
    pub projections: [Option<Linear>; 3],
    pub tabular: Option<TabularEmbedder>,
    pub pairs: Vec<PairModule>,
    pub classifier: Linear,
}

/// Stacked samples sharing one presence mask.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub size: usize,
    /// `[B·tokens, native_dim]` per present modality.
    pub inputs: [Option<Tensor<T>>; 3],
    /// `[B, labels]` with 0/1 entries.
    pub targets: Tensor<T>,
    pub presence: ModalityMask,
}

impl<T: Scalar> Batch<T> {
    /// Every sample must store each modality of `mask`.
    pub fn from_samples(
        samples: &[&Sample],
        shapes: &ModalityShapes,
        label_count: usize,
        mask: ModalityMask,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let inputs = ModalityId::ALL.map(|m| {
            if !mask.contains(m) {
                return Ok(None);
            }
            let shape = shapes.get(m);
            let mut data = Vec::with_capacity(samples.len() * shape.numel());
            for (i, s) in samples.iter().enumerate() {
                let e = s.embedding(m).ok_or_else(|| {
                    Error::Data(format!("batch sample {i}: {m} is marked present but not stored"))
                })?;
                if e.len() != shape.numel() {
                    return Err(Error::Data(format!(
                        "batch sample {i}: {m} has {} values, model expects {}×{}",
                        e.len(),
                        shape.token_count,
                        shape.native_dim
                    )));
                }
                data.extend(e.iter().map(|&v| T::of(f64::from(v))));
            }
            Tensor::new(&[samples.len() * shape.token_count, shape.native_dim], data).map(Some)
        });
        let [a, b, c] = inputs;
        let targets: Vec<T> = samples
            .iter()
            .flat_map(|s| (0..label_count).map(|l| if s.labels.get(l) { T::one() } else { T::zero() }))
            .collect();
        Ok(Self {
            size: samples.len(),
            inputs: [a?, b?, c?],
            targets: Tensor::new(&[samples.len(), label_count], targets)?,
            presence: mask,
        })
    }

    /// Batch of view positions; presence is taken from the first and must be
    /// shared by all.
    pub fn from_view(view: &DatasetView<'_>, positions: &[usize], shapes: &ModalityShapes) -> Result<Self> {
        let first = *positions
            .first()
            .ok_or_else(|| Error::Contract("empty batch".into()))?;
        let mask = view.presence(first);
        if let Some(&p) = positions.iter().find(|&&p| view.presence(p) != mask) {
            return Err(Error::Contract(format!(
                "batch mixes presence masks {mask} and {}",
                view.presence(p)
            )));
        }
        let samples: Vec<&Sample> = positions.iter().map(|&p| view.sample(p)).collect();
        Self::from_samples(&samples, shapes, view.dataset.header.label_count, mask)
    }
}

/// Groups view positions by effective presence, keeping view order inside a
/// group; groups are ordered by mask bits.
pub fn group_by_presence(view: &DatasetView<'_>) -> Vec<(ModalityMask, Vec<usize>)> {
    let mut groups: Vec<(ModalityMask, Vec<usize>)> = Vec::new();
    for pos in 0..view.len() {
        let mask = view.presence(pos);
        match groups.iter_mut().find(|(m, _)| *m == mask) {
            Some((_, v)) => v.push(pos),
            None => groups.push((mask, vec![pos])),
        }
    }
    groups.sort_by_key(|(m, _)| m.bits());
    groups
}

/// Graph handles of one forward pass.
pub struct FusionVars<'t, T> {
    pub active: ModalityMask,
    /// Fusion vector per served pair, `[B, d_h]` (`[B, 2·d_model]` without fusers).
    pub bimf: Vec<(Pair, Var<'t, T>)>,
    pub cls: Vec<(Pair, ClsPair<'t, T>)>,
    /// Classifier input.
    pub tri: Var<'t, T>,
    pub logits: Var<'t, T>,
}

impl<'t, T: Scalar> FusionVars<'t, T> {
    pub fn fusion(&self, pair: Pair) -> Option<Var<'t, T>> {
        self.bimf.iter().find(|(p, _)| *p == pair).map(|(_, v)| *v)
    }

    pub fn served(&self) -> Vec<Pair> {
        self.bimf.iter().map(|(p, _)| *p).collect()
    }
}

/// Values of a single-sample forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionOutput<T> {
    pub bimf: Vec<(Pair, Vec<T>)>,
    pub tri: Vec<T>,
    pub logits: Vec<T>,
}

impl TriMF {
    /// Builds the parameter tree; all draws come from one ChaCha8 stream
    /// seeded by `seed`, in construction order.
    pub fn new<T: Scalar>(arch: ArchConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        arch.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut rng);
        let m = &arch.model;
        let d = m.d_model;
        let used = arch.modalities();

        let tabular = used
            .contains(ModalityId::Tabular)
            .then(|| TabularEmbedder::new(&mut store, &mut init, "tabular_embed", m.tabular_embed_dim));
        let projections = ModalityId::ALL.map(|id| {
            used.contains(id).then(|| {
                let fan_in = match id {
                    ModalityId::Tabular => m.tabular_embed_dim,
                    _ => arch.inputs.get(id).native_dim,
                };
                Linear::new(&mut store, &mut init, &format!("proj.{id}"), fan_in, d)
            })
        });

        let mut pairs = Vec::with_capacity(arch.pairs.len());
        for &pair in &arch.pairs {
            let (a, b) = pair.modalities();
            let spec = EncoderSpec {
                d_model: d,
                heads: m.heads,
                d_ff: m.d_ff,
                layers: m.layers,
                max_tokens_a: arch.inputs.get(a).token_count,
                max_tokens_b: arch.inputs.get(b).token_count,
                cross_only: arch.variant == Variant::NoSa,
            };
            let encoder = BimfEncoder::new(&mut store, &mut init, &format!("bimf.{pair}"), spec)?;
            let fuser = if arch.variant == Variant::NoLmf {
                None
            } else {
                Some(LmfParams::new(
                    &mut store,
                    &mut init,
                    &format!("lmf.{pair}"),
                    m.lmf_rank,
                    d,
                    m.fusion_dim,
                    m.lmf_bias_augment,
                )?)
            };
            pairs.push(PairModule { pair, encoder, fuser });
        }
        let classifier = Linear::new(
            &mut store,
            &mut init,
            "classifier",
            arch.classifier_input_dim(),
            arch.label_count,
        );
        let model = Self {
            arch,
            projections,
            tabular,
            pairs,
            classifier,
        };
        debug_assert_eq!(store.scalar_count(), model.arch.param_count());
        Ok((model, store))
    }

    pub fn sa_unit_count(&self) -> usize {
        self.pairs.iter().map(|p| p.encoder.sa_unit_count()).sum()
    }

    /// Pairs this model can serve under `mask`, in configuration order.
    pub fn served_pairs(&self, mask: ModalityMask) -> Result<Vec<Pair>> {
        if mask.count() < 2 {
            return Err(Error::UnsupportedMask {
                mask: mask.to_string(),
            });
        }
        let served: Vec<Pair> = self
            .arch
            .pairs
            .iter()
            .copied()
            .filter(|&p| mask.has_pair(p))
            .collect();
        if served.is_empty() {
            return Err(Error::UnsupportedMask {
                mask: format!("{mask} (no configured pair is fully present)"),
            });
        }
        Ok(served)
    }

    fn embed<'t, T: Scalar>(&self, ctx: Ctx<'t, T>, id: ModalityId, batch: &Batch<T>) -> Result<Var<'t, T>> {
        let raw = batch.inputs[id.index()]
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("batch has no {id} input")))?;
        let shape = self.arch.inputs.get(id);
        if raw.shape() != [batch.size * shape.token_count, shape.native_dim] {
            return Err(Error::Data(format!(
                "{id} input has shape {:?}, model expects {} samples of {}×{}",
                raw.shape(),
                batch.size,
                shape.token_count,
                shape.native_dim
            )));
        }
        let x = ctx.tape.constant(raw.clone());
        let x = match (id, &self.tabular) {
            (ModalityId::Tabular, Some(t)) => t.forward(ctx, x)?,
            _ => x,
        };
        let proj = self.projections[id.index()]
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("model has no projection for {id}")))?;
        proj.forward(ctx, x)
    }

    /// Batched forward pass; only pairs whose modalities are both present
    /// in `batch.presence` are run.
    pub fn forward<'t, T: Scalar>(&self, ctx: Ctx<'t, T>, batch: &Batch<T>) -> Result<FusionVars<'t, T>> {
        let active = batch.presence;
        let served = self.served_pairs(active)?;
        let mut embedded: [Option<Var<'t, T>>; 3] = [None, None, None];
        for p in &served {
            let (a, b) = p.modalities();
            for id in [a, b] {
                if embedded[id.index()].is_none() {
                    embedded[id.index()] = Some(self.embed(ctx, id, batch)?);
                }
            }
        }

        let mut bimf = Vec::with_capacity(served.len());
        let mut cls = Vec::with_capacity(served.len());
        for module in self.pairs.iter().filter(|m| served.contains(&m.pair)) {
            let (a, b) = module.pair.modalities();
            let za = embedded[a.index()].expect("embedded above");
            let zb = embedded[b.index()].expect("embedded above");
            let pair_cls = module.encoder.forward(ctx, za, zb, batch.size)?;
            let fused = match &module.fuser {
                Some(lmf) => lmf.fuse(ctx, pair_cls.z_a, pair_cls.z_b)?,
                None => Var::concat(&[pair_cls.z_a, pair_cls.z_b], 1)?,
            };
            bimf.push((module.pair, fused));
            cls.push((module.pair, pair_cls));
        }

        let tri = if self.arch.variant == Variant::NoLmf {
            // fixed slot per configured pair, zeros for pairs not served
            let width = 2 * self.arch.model.d_model;
            let parts = self
                .arch
                .pairs
                .iter()
                .map(|p| match bimf.iter().find(|(q, _)| q == p) {
                    Some((_, v)) => *v,
                    None => ctx.tape.constant(Tensor::zeros(&[batch.size, width])),
                })
                .collect::<Vec<_>>();
            if parts.len() == 1 {
                parts[0]
            } else {
                Var::concat(&parts, 1)?
            }
        } else {
            let mut iter = bimf.iter().map(|(_, v)| *v);
            let first = iter.next().expect("at least one served pair");
            iter.try_fold(first, |acc, v| acc.add(v))?
        };
        let logits = self.classifier.forward(ctx, tri)?;
        Ok(FusionVars {
            active,
            bimf,
            cls,
            tri,
            logits,
        })
    }

    /// Logits as `[B, labels]` without keeping the graph around.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, batch: &Batch<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let out = self.forward(Ctx::new(&tape, store), batch)?;
        Ok(out.logits.value())
    }
}

/// Single-sample forward pass under `mask` (intersected with what the sample
/// stores).
pub fn trimf_forward<T: Scalar>(
    model: &TriMF,
    store: &ParamStore<T>,
    sample: &Sample,
    mask: ModalityMask,
) -> Result<FusionOutput<T>> {
    let presence = sample.presence().intersect(mask);
    let batch = Batch::from_samples(&[sample], &model.arch.inputs, model.arch.label_count, presence)?;
    let tape = Tape::new();
    let out = model.forward(Ctx::new(&tape, store), &batch)?;
    Ok(FusionOutput {
        bimf: out.bimf.iter().map(|(p, v)| (*p, v.to_vec())).collect(),
        tri: out.tri.to_vec(),
        logits: out.logits.to_vec(),
    })
}

/// Architecture and objective for an ablation variant of `base`.
pub fn make_variant(
    base: &ArchConfig,
    weights: &LossWeights,
    frcl_mean: bool,
    variant: Variant,
) -> (ArchConfig, LossPlan) {
    let arch = ArchConfig {
        variant,
        ..base.clone()
    };
    let weights = match variant {
        Variant::NoFrcl => LossWeights::classification_only(weights.lambda1),
        _ => *weights,
    };
    let plan = LossPlan::new(&weights, &arch.pairs, frcl_mean);
    (arch, plan)
}
