//! Multi-head attention, the self-attention (SA) and co-attention (CA)
//! units, and the stacked two-stream encoder that turns a modality pair
//! into two `[cls]` summaries.
//!
//! All forward functions work on a batch of `B` samples. A stream of `s`
//! tokens is carried as a `[B·s, d_model]` matrix (sample-major), so every
//! linear layer is one matmul; attention reshapes to `[B·h, s, d/h]`.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Ctx, LayerNorm, Linear};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Scalar;

/// Standard deviation of the position-embedding and `[cls]` initializers.
pub const EMBED_INIT_STD: f64 = 0.02;

/// Per-head query/key/value projections stored as column blocks: head `h`
/// owns columns `h·d_head .. (h+1)·d_head` of `wq`, `wk` and `wv`.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub heads: usize,
    pub d_model: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

/// Output of one attention call; `weights` is `[B·h, s_q, s_kv]`.
pub struct Attended<'t, T> {
    pub out: Var<'t, T>,
    pub weights: Var<'t, T>,
}

impl AttentionParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        d_model: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by head count {heads}"
            )));
        }
        Ok(Self {
            heads,
            d_model,
            wq: Linear::new(store, init, &format!("{name}.wq"), d_model, d_model),
            wk: Linear::new(store, init, &format!("{name}.wk"), d_model, d_model),
            wv: Linear::new(store, init, &format!("{name}.wv"), d_model, d_model),
            wo: Linear::new(store, init, &format!("{name}.wo"), d_model, d_model),
        })
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn param_count(&self) -> usize {
        4 * (self.d_model * self.d_model + self.d_model)
    }

    fn split_heads<'t, T: Scalar>(&self, x: Var<'t, T>, batch: usize) -> Result<Var<'t, T>> {
        let seq = x.shape()[0] / batch;
        let (h, dh) = (self.heads, self.d_head());
        x.reshape(&[batch, seq, h, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[batch * h, seq, dh])
    }

    /// Scaled dot-product attention of `queries` (`[B·s_q, d]`) over
    /// `keys_values` (`[B·s_kv, d]`), heads concatenated then projected.
    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: Ctx<'t, T>,
        queries: Var<'t, T>,
        keys_values: Var<'t, T>,
        batch: usize,
    ) -> Result<Attended<'t, T>> {
        let (qs, ks) = (queries.shape(), keys_values.shape());
        if qs.len() != 2
            || ks.len() != 2
            || qs[1] != self.d_model
            || ks[1] != self.d_model
            || batch == 0
            || qs[0] % batch != 0
            || ks[0] % batch != 0
        {
            return Err(Error::shape("attention", &qs, &ks));
        }
        let s_q = qs[0] / batch;
        let q = self.split_heads(self.wq.forward(ctx, queries)?, batch)?;
        let k = self.split_heads(self.wk.forward(ctx, keys_values)?, batch)?;
        let v = self.split_heads(self.wv.forward(ctx, keys_values)?, batch)?;
        let scale = T::one() / T::of(self.d_head() as f64).sqrt();
        let weights = q.bmm(k.transpose()?)?.scale(scale)?.softmax(2)?;
        let merged = weights
            .bmm(v)?
            .reshape(&[batch, self.heads, s_q, self.d_head()])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[batch * s_q, self.d_model])?;
        Ok(Attended {
            out: self.wo.forward(ctx, merged)?,
            weights,
        })
    }
}

/// Single-sample multi-head attention: `[s_q×d] × [s_kv×d] → [s_q×d]`.
pub fn multi_head_attention<'t, T: Scalar>(
    ctx: Ctx<'t, T>,
    queries: Var<'t, T>,
    keys_values: Var<'t, T>,
    params: &AttentionParams,
) -> Result<Var<'t, T>> {
    Ok(params.forward(ctx, queries, keys_values, 1)?.out)
}

/// Self-attention unit: post-norm attention sublayer then a GeLU MLP.
#[derive(Clone, Debug)]
pub struct SaUnit {
    pub attn: AttentionParams,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
}

impl SaUnit {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        d_model: usize,
        heads: usize,
        d_ff: usize,
    ) -> Result<Self> {
        if d_ff < d_model {
            return Err(Error::Config(format!(
                "feed-forward width {d_ff} is below d_model {d_model}"
            )));
        }
        Ok(Self {
            attn: AttentionParams::new(store, init, &format!("{name}.attn"), d_model, heads)?,
            ff1: Linear::new(store, init, &format!("{name}.ff1"), d_model, d_ff),
            ff2: Linear::new(store, init, &format!("{name}.ff2"), d_ff, d_model),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d_model),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d_model),
        })
    }

    pub fn param_count(&self) -> usize {
        self.attn.param_count()
            + self.ff1.param_count()
            + self.ff2.param_count()
            + 4 * self.attn.d_model
    }

    /// `x' = LN(x + Attn(x, x))`, `out = LN(x' + W2·gelu(W1·x'))`.
    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: Ctx<'t, T>,
        x: Var<'t, T>,
        batch: usize,
    ) -> Result<Var<'t, T>> {
        let attended = self.attn.forward(ctx, x, x, batch)?.out;
        let x1 = self.ln1.forward(ctx, x.add(attended)?)?;
        let ff = self.ff2.forward(ctx, self.ff1.forward(ctx, x1)?.gelu()?)?;
        self.ln2.forward(ctx, x1.add(ff)?)
    }
}

/// Co-attention unit: two mirrored cross-attention directions with
/// independent weights; each stream queries the other.
#[derive(Clone, Debug)]
pub struct CaUnit {
    pub attn_a: AttentionParams,
    pub attn_b: AttentionParams,
    pub ln_a: LayerNorm,
    pub ln_b: LayerNorm,
}

impl CaUnit {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        d_model: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            attn_a: AttentionParams::new(store, init, &format!("{name}.attn_a"), d_model, heads)?,
            attn_b: AttentionParams::new(store, init, &format!("{name}.attn_b"), d_model, heads)?,
            ln_a: LayerNorm::new(store, &format!("{name}.ln_a"), d_model),
            ln_b: LayerNorm::new(store, &format!("{name}.ln_b"), d_model),
        })
    }

    pub fn param_count(&self) -> usize {
        self.attn_a.param_count() + self.attn_b.param_count() + 4 * self.attn_a.d_model
    }

    /// The same unit with its two directions exchanged.
    pub fn mirrored(&self) -> Self {
        Self {
            attn_a: self.attn_b.clone(),
            attn_b: self.attn_a.clone(),
            ln_a: self.ln_b.clone(),
            ln_b: self.ln_a.clone(),
        }
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: Ctx<'t, T>,
        x_a: Var<'t, T>,
        x_b: Var<'t, T>,
        batch: usize,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let from_b = self.attn_a.forward(ctx, x_a, x_b, batch)?.out;
        let from_a = self.attn_b.forward(ctx, x_b, x_a, batch)?.out;
        let out_a = self.ln_a.forward(ctx, x_a.add(from_b)?)?;
        let out_b = self.ln_b.forward(ctx, x_b.add(from_a)?)?;
        Ok((out_a, out_b))
    }
}

/// What updates each stream before the co-attention step of a layer.
#[derive(Clone, Debug)]
pub enum StreamMixer {
    /// Independent self-attention per stream.
    SelfAttention { sa_a: SaUnit, sa_b: SaUnit },
    /// Ablation: an extra co-attention unit takes the place of both SA
    /// units, so each stream attends to the other one instead of itself.
    CrossAttention(CaUnit),
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub mixer: StreamMixer,
    pub ca: CaUnit,
}

/// Architecture knobs for one two-stream encoder.
#[derive(Clone, Copy, Debug)]
pub struct EncoderSpec {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers: usize,
    /// Longest sequence (tokens, excluding `[cls]`) accepted per stream.
    pub max_tokens_a: usize,
    pub max_tokens_b: usize,
    /// Replace SA units with CA units.
    pub cross_only: bool,
}

#[derive(Clone, Debug)]
pub struct BimfEncoder {
    pub spec: EncoderSpec,
    pub layers: Vec<EncoderLayer>,
    pub pos_a: ParamId,
    pub pos_b: ParamId,
    pub cls_a: ParamId,
    pub cls_b: ParamId,
}

/// Final hidden vectors at the two `[cls]` positions, `[B, d_model]` each.
pub struct ClsPair<'t, T> {
    pub z_a: Var<'t, T>,
    pub z_b: Var<'t, T>,
}

impl BimfEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        spec: EncoderSpec,
    ) -> Result<Self> {
        let EncoderSpec { d_model: d, heads, d_ff, .. } = spec;
        let pos_a = store.add(
            format!("{name}.pos_a"),
            init.normal(&[spec.max_tokens_a + 1, d], EMBED_INIT_STD),
        );
        let pos_b = store.add(
            format!("{name}.pos_b"),
            init.normal(&[spec.max_tokens_b + 1, d], EMBED_INIT_STD),
        );
        let cls_a = store.add(format!("{name}.cls_a"), init.normal(&[1, d], EMBED_INIT_STD));
        let cls_b = store.add(format!("{name}.cls_b"), init.normal(&[1, d], EMBED_INIT_STD));
        let mut layers = Vec::with_capacity(spec.layers);
        for l in 0..spec.layers {
            let prefix = format!("{name}.layer{l}");
            let mixer = if spec.cross_only {
                StreamMixer::CrossAttention(CaUnit::new(
                    store,
                    init,
                    &format!("{prefix}.ca_mix"),
                    d,
                    heads,
                )?)
            } else {
                StreamMixer::SelfAttention {
                    sa_a: SaUnit::new(store, init, &format!("{prefix}.sa_a"), d, heads, d_ff)?,
                    sa_b: SaUnit::new(store, init, &format!("{prefix}.sa_b"), d, heads, d_ff)?,
                }
            };
            let ca = CaUnit::new(store, init, &format!("{prefix}.ca"), d, heads)?;
            layers.push(EncoderLayer { mixer, ca });
        }
        Ok(Self {
            spec,
            layers,
            pos_a,
            pos_b,
            cls_a,
            cls_b,
        })
    }

    pub fn sa_unit_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l.mixer, StreamMixer::SelfAttention { .. }))
            .count()
            * 2
    }

    /// Closed-form parameter count (must agree with the store).
    pub fn param_count(&self) -> usize {
        let d = self.spec.d_model;
        let embeds = (self.spec.max_tokens_a + 1 + self.spec.max_tokens_b + 1) * d + 2 * d;
        let per_layer: usize = self
            .layers
            .iter()
            .map(|l| {
                let mix = match &l.mixer {
                    StreamMixer::SelfAttention { sa_a, sa_b } => sa_a.param_count() + sa_b.param_count(),
                    StreamMixer::CrossAttention(ca) => ca.param_count(),
                };
                mix + l.ca.param_count()
            })
            .sum();
        embeds + per_layer
    }

    fn prepare<'t, T: Scalar>(
        &self,
        ctx: Ctx<'t, T>,
        x: Var<'t, T>,
        cls: ParamId,
        pos: ParamId,
        max_tokens: usize,
        batch: usize,
    ) -> Result<(Var<'t, T>, usize)> {
        let shape = x.shape();
        let d = self.spec.d_model;
        if shape.len() != 2 || shape[1] != d || batch == 0 || shape[0] % batch != 0 {
            return Err(Error::shape("bimf_encode", &shape, &[batch, d]));
        }
        let tokens = shape[0] / batch;
        if tokens > max_tokens {
            return Err(Error::Config(format!(
                "sequence of {tokens} tokens exceeds the position table ({max_tokens} + [cls])"
            )));
        }
        let seq = tokens + 1;
        let cls_rows = ctx.p(cls).tile(batch)?;
        let body = x.reshape(&[batch, tokens, d])?;
        let pos_rows = ctx.p(pos).slice(0, 0, seq)?.tile(batch)?;
        let stream = Var::concat(&[cls_rows, body], 1)?
            .add(pos_rows)?
            .reshape(&[batch * seq, d])?;
        Ok((stream, seq))
    }

    fn cls_rows<'t, T: Scalar>(&self, x: Var<'t, T>, seq: usize, batch: usize) -> Result<Var<'t, T>> {
        let d = self.spec.d_model;
        x.reshape(&[batch, seq, d])?
            .slice(1, 0, 1)?
            .reshape(&[batch, d])
    }

    /// Prepends `[cls]`, adds position embeddings, runs the layer stack
    /// (stream mixer on each stream, then co-attention) and returns the
    /// final `[cls]` rows. Inputs are `[B·s_a, d]` and `[B·s_b, d]`.
    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: Ctx<'t, T>,
        emb_a: Var<'t, T>,
        emb_b: Var<'t, T>,
        batch: usize,
    ) -> Result<ClsPair<'t, T>> {
        let (mut a, seq_a) =
            self.prepare(ctx, emb_a, self.cls_a, self.pos_a, self.spec.max_tokens_a, batch)?;
        let (mut b, seq_b) =
            self.prepare(ctx, emb_b, self.cls_b, self.pos_b, self.spec.max_tokens_b, batch)?;
        for layer in &self.layers {
            (a, b) = match &layer.mixer {
                StreamMixer::SelfAttention { sa_a, sa_b } => {
                    (sa_a.forward(ctx, a, batch)?, sa_b.forward(ctx, b, batch)?)
                }
                StreamMixer::CrossAttention(ca) => ca.forward(ctx, a, b, batch)?,
            };
            (a, b) = layer.ca.forward(ctx, a, b, batch)?;
        }
        Ok(ClsPair {
            z_a: self.cls_rows(a, seq_a, batch)?,
            z_b: self.cls_rows(b, seq_b, batch)?,
        })
    }
}

/// Single-sample encoder call: `[s_a×d]`, `[s_b×d]` → two `[1×d]` vectors.
pub fn bimf_encode<'t, T: Scalar>(
    ctx: Ctx<'t, T>,
    emb_a: Var<'t, T>,
    emb_b: Var<'t, T>,
    params: &BimfEncoder,
) -> Result<ClsPair<'t, T>> {
    params.forward(ctx, emb_a, emb_b, 1)
}
