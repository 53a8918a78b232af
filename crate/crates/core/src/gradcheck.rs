//! Central finite-difference checks of tape gradients at 64-bit.
//!
//! Two kinds of case: a primitive case differentiates a closure of input
//! vars; a store case differentiates a closure of a [`Ctx`], perturbing every
//! scalar in the parameter store (inputs can be stored there too). Non-scalar
//! outputs are reduced with a fixed random projection so every output entry
//! contributes a distinct weight.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::blocks::{multi_head_attention, AttentionParams, CaUnit, SaUnit};
use crate::data::{generate_synthetic, ModalityShape, ModalityShapes, SynthSpec};
use crate::error::{Error, Result};
use crate::lmf::LmfParams;
use crate::losses::{combined_loss, frcl, LossWeights};
use crate::model::{make_variant, ArchConfig, Batch, ModelConfig, TriMF, Variant};
use crate::modality::{ModalityId, ModalityMask};
use crate::nn::Ctx;
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so gradients that are zero up to
/// rounding are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub type PrimitiveFn = Box<dyn for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>>;

pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    pub f: PrimitiveFn,
}

impl GradCase {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<Tensor<f64>>,
        f: impl for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>> + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            inputs,
            f: Box::new(f),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub checked: usize,
    pub worst_rel: f64,
    /// Input (or parameter) name and flat index of the worst entry.
    pub worst_at: String,
    pub analytic: f64,
    pub numeric: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.worst_rel < TOLERANCE
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub results: Vec<CaseResult>,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CaseResult::passed)
    }

    pub fn failures(&self) -> Vec<&CaseResult> {
        self.results.iter().filter(|r| !r.passed()).collect()
    }

    pub fn worst(&self) -> Option<&CaseResult> {
        self.results.iter().max_by(|a, b| a.worst_rel.total_cmp(&b.worst_rel))
    }
}

struct Tracker {
    result: CaseResult,
}

impl Tracker {
    fn new(name: &str) -> Self {
        Self {
            result: CaseResult {
                name: name.to_string(),
                checked: 0,
                worst_rel: 0.0,
                worst_at: String::new(),
                analytic: 0.0,
                numeric: 0.0,
            },
        }
    }

    fn record(&mut self, at: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let r = &mut self.result;
        r.checked += 1;
        let e = rel_error(analytic, numeric);
        // NaN must surface as a failure
        if e > r.worst_rel || e.is_nan() {
            r.worst_rel = if e.is_nan() { f64::INFINITY } else { e };
            r.worst_at = at();
            r.analytic = analytic;
            r.numeric = numeric;
        }
    }
}

/// `Σ out ⊙ R`, or `out` itself when it is already a scalar.
fn reduce<'t>(out: Var<'t, f64>, weights: &Option<Tensor<f64>>) -> Result<Var<'t, f64>> {
    match weights {
        None => Ok(out),
        Some(w) => out.mul(out.tape().constant(w.clone()))?.sum(),
    }
}

fn projection(shape: &[usize], rng: &mut ChaCha8Rng) -> Option<Tensor<f64>> {
    let n: usize = shape.iter().product();
    (n != 1).then(|| Init::new(rng).normal(shape, 1.0))
}

pub fn check_case(case: &GradCase, seed: u64) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tape = Tape::new();
    let vars: Vec<Var<'_, f64>> = case
        .inputs
        .iter()
        .map(|t| tape.var(t.clone().with_requires_grad(true)))
        .collect();
    let out = (case.f)(&vars)?;
    let weights = projection(&out.shape(), &mut rng);
    let grads = reduce(out, &weights)?.backward()?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get(v)).collect();

    let value_at = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_, f64>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(reduce((case.f)(&vars)?, &weights)?.item())
    };
    let mut tracker = Tracker::new(&case.name);
    let mut inputs = case.inputs.clone();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let x = inputs[i].data()[j];
            inputs[i].data_mut()[j] = x + FD_STEP;
            let plus = value_at(&inputs)?;
            inputs[i].data_mut()[j] = x - FD_STEP;
            let minus = value_at(&inputs)?;
            inputs[i].data_mut()[j] = x;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            tracker.record(|| format!("input {i}[{j}]"), analytic[i].data()[j], numeric);
        }
    }
    Ok(tracker.result)
}

/// Checks the gradient of `f` with respect to every scalar in `store`.
pub fn check_store<F>(name: &str, store: &mut ParamStore<f64>, seed: u64, f: F) -> Result<CaseResult>
where
    F: for<'t> Fn(Ctx<'t, f64>) -> Result<Var<'t, f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = {
        let tape = Tape::new();
        let out = f(Ctx::new(&tape, store))?;
        projection(&out.shape(), &mut rng)
    };
    store.zero_grads();
    let grads = {
        let tape = Tape::new();
        reduce(f(Ctx::new(&tape, store))?, &weights)?.backward()?
    };
    grads.accumulate_into(store)?;
    let ids: Vec<_> = store.ids().collect();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            let t = store.get(id);
            t.grad().map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
        })
        .collect();

    let value = |store: &ParamStore<f64>| -> Result<f64> {
        let tape = Tape::new();
        Ok(reduce(f(Ctx::new(&tape, store))?, &weights)?.item())
    };
    let mut tracker = Tracker::new(name);
    for (k, &id) in ids.iter().enumerate() {
        for j in 0..store.get(id).numel() {
            let x = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = x + FD_STEP;
            let plus = value(store)?;
            store.get_mut(id).data_mut()[j] = x - FD_STEP;
            let minus = value(store)?;
            store.get_mut(id).data_mut()[j] = x;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            tracker.record(|| format!("{}[{j}]", store.name(id)), analytic[k][j], numeric);
        }
    }
    Ok(tracker.result)
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Init::new(rng).normal(shape, 1.0)
}

/// One case per differentiable primitive on small random inputs.
pub fn primitive_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let targets = Tensor::from_f64(&[2, 3], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).expect("static shape");
    vec![
        GradCase::new("add", vec![randn(r, &[2, 3]), randn(r, &[2, 3])], |v| v[0].add(v[1])),
        GradCase::new("sub", vec![randn(r, &[2, 3]), randn(r, &[2, 3])], |v| v[0].sub(v[1])),
        GradCase::new("mul", vec![randn(r, &[3, 3]), randn(r, &[3, 3])], |v| v[0].mul(v[1])),
        GradCase::new("square", vec![randn(r, &[5])], |v| v[0].square()),
        GradCase::new("add_row", vec![randn(r, &[3, 4]), randn(r, &[4])], |v| v[0].add_row(v[1])),
        GradCase::new("scale", vec![randn(r, &[2, 2])], |v| v[0].scale(-1.7)),
        GradCase::new("add_scalar", vec![randn(r, &[2, 2])], |v| v[0].add_scalar(0.3)),
        GradCase::new("matmul", vec![randn(r, &[2, 3]), randn(r, &[3, 4])], |v| v[0].matmul(v[1])),
        GradCase::new("bmm", vec![randn(r, &[2, 2, 3]), randn(r, &[2, 3, 2])], |v| v[0].bmm(v[1])),
        GradCase::new("permute", vec![randn(r, &[2, 3, 4])], |v| v[0].permute(&[2, 0, 1])),
        GradCase::new("transpose", vec![randn(r, &[2, 3])], |v| v[0].transpose()),
        GradCase::new("reshape", vec![randn(r, &[2, 6])], |v| v[0].reshape(&[3, 4])),
        GradCase::new("concat", vec![randn(r, &[2, 3]), randn(r, &[2, 2])], |v| {
            Var::concat(&[v[0], v[1]], 1)
        }),
        GradCase::new("slice", vec![randn(r, &[4, 3])], |v| v[0].slice(0, 1, 3)),
        GradCase::new("tile", vec![randn(r, &[2, 3])], |v| v[0].tile(3)),
        GradCase::new("sum", vec![randn(r, &[3, 2])], |v| v[0].sum()),
        GradCase::new("mean", vec![randn(r, &[3, 2])], |v| v[0].mean()),
        GradCase::new("sum_axis", vec![randn(r, &[2, 3, 2])], |v| v[0].sum_axis(1)),
        GradCase::new("softmax", vec![randn(r, &[2, 5])], |v| v[0].softmax(1)),
        GradCase::new("softmax_axis0", vec![randn(r, &[3, 2, 2])], |v| v[0].softmax(0)),
        GradCase::new("gelu", vec![randn(r, &[8])], |v| v[0].gelu()),
        GradCase::new("layer_norm", vec![randn(r, &[3, 5]), randn(r, &[5]), randn(r, &[5])], |v| {
            v[0].layer_norm(v[1], v[2], 1e-5)
        }),
        GradCase::new("bce_with_logits", vec![randn(r, &[2, 3])], move |v| v[0].bce_with_logits(&targets)),
        GradCase::new("frcl", vec![randn(r, &[2, 4]), randn(r, &[2, 4])], |v| frcl(v[0], v[1], false)),
        GradCase::new("frcl_mean", vec![randn(r, &[2, 4]), randn(r, &[2, 4])], |v| frcl(v[0], v[1], true)),
    ]
}

fn toy_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 4,
        heads: 2,
        layers: 1,
        d_ff: 6,
        lmf_rank: 2,
        fusion_dim: 3,
        tabular_embed_dim: 3,
        lmf_bias_augment: false,
    }
}

fn toy_inputs() -> ModalityShapes {
    let shape = |token_count, native_dim| ModalityShape { token_count, native_dim };
    ModalityShapes {
        image: shape(2, 3),
        text: shape(3, 2),
        tabular: shape(2, 1),
    }
}

/// Two synthetic samples in the toy shapes.
pub fn toy_batch(mask: ModalityMask) -> Result<Batch<f64>> {
    let spec = SynthSpec {
        sample_count: 2,
        modalities: toy_inputs(),
        label_rates: vec![0.5, 0.3, 0.2],
        ..SynthSpec::default()
    };
    let data = generate_synthetic(&spec)?;
    let samples: Vec<_> = data.samples.iter().collect();
    Batch::from_samples(&samples, &spec.modalities, spec.label_rates.len(), mask)
}

/// Attention, SA/CA units and LMF with their inputs held in the store.
fn block_cases(seed: u64) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let mut init = Init::new(&mut rng);
    let attn = AttentionParams::new(&mut store, &mut init, "attn", 4, 2)?;
    let q = store.add("q", init.normal(&[2, 4], 1.0));
    let kv = store.add("kv", init.normal(&[3, 4], 1.0));
    out.push(check_store("multi_head_attention", &mut store, seed, |ctx| {
        multi_head_attention(ctx, ctx.p(q), ctx.p(kv), &attn)
    })?);

    let mut store = ParamStore::new();
    let sa = SaUnit::new(&mut store, &mut init, "sa", 4, 2, 6)?;
    let x = store.add("x", init.normal(&[2 * 3, 4], 1.0));
    out.push(check_store("sa_unit", &mut store, seed, |ctx| sa.forward(ctx, ctx.p(x), 2))?);

    let mut store = ParamStore::new();
    let ca = CaUnit::new(&mut store, &mut init, "ca", 4, 2)?;
    let xa = store.add("xa", init.normal(&[2 * 2, 4], 1.0));
    let xb = store.add("xb", init.normal(&[2 * 3, 4], 1.0));
    out.push(check_store("ca_unit", &mut store, seed, |ctx| {
        let (a, b) = ca.forward(ctx, ctx.p(xa), ctx.p(xb), 2)?;
        Var::concat(&[a.slice(0, 0, 4)?, b.slice(0, 2, 6)?], 1)
    })?);

    for augment in [false, true] {
        let mut store = ParamStore::new();
        let lmf = LmfParams::new(&mut store, &mut init, "lmf", 3, 4, 5, augment)?;
        // lift the small default init so products are not vanishingly small
        for (_, t) in store.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= 10.0);
        }
        let za = store.add("za", init.normal(&[2, 4], 1.0));
        let zb = store.add("zb", init.normal(&[2, 4], 1.0));
        let name = if augment { "lmf_bias_augment" } else { "lmf" };
        out.push(check_store(name, &mut store, seed, |ctx| lmf.fuse(ctx, ctx.p(za), ctx.p(zb)))?);
    }
    Ok(out)
}

/// Combined loss of a toy model per variant, plus one masked condition.
fn model_cases(seed: u64) -> Result<Vec<CaseResult>> {
    let base = ArchConfig::new(toy_model_config(), toy_inputs(), 3);
    let mut out = Vec::new();
    let conditions = [
        (Variant::Full, ModalityMask::ALL),
        (Variant::NoSa, ModalityMask::ALL),
        (Variant::NoLmf, ModalityMask::ALL),
        (Variant::NoFrcl, ModalityMask::ALL),
        (Variant::Full, ModalityMask::ALL.without(ModalityId::Tabular)),
    ];
    for (variant, mask) in conditions {
        for frcl_mean in [false, true] {
            if frcl_mean && (variant == Variant::NoFrcl || mask != ModalityMask::ALL) {
                continue;
            }
            let (arch, plan) = make_variant(&base, &LossWeights::DEFAULT, frcl_mean, variant);
            let (model, mut store) = TriMF::new::<f64>(arch, seed)?;
            let batch = toy_batch(mask)?;
            let plan = if mask == ModalityMask::ALL {
                plan
            } else {
                // a masked batch serves one pair, so no contrastive term applies
                crate::losses::LossPlan { terms: Vec::new(), ..plan }
            };
            let name = format!(
                "model_{variant}{}{}",
                if mask == ModalityMask::ALL { String::new() } else { format!("_{mask}") },
                if frcl_mean { "_mean" } else { "" }
            );
            out.push(check_store(&name, &mut store, seed, |ctx| {
                let fused = model.forward(ctx, &batch)?;
                Ok(combined_loss(&fused, &batch.targets, &plan)?.total)
            })?);
        }
    }
    Ok(out)
}

/// Every primitive, the building blocks and the toy model variants.
pub fn run_gradcheck(seed: u64) -> Result<GradcheckReport> {
    let started = Instant::now();
    let mut results = Vec::new();
    for (i, case) in primitive_cases(seed).iter().enumerate() {
        results.push(check_case(case, seed.wrapping_add(i as u64))?);
    }
    results.extend(block_cases(seed)?);
    results.extend(model_cases(seed)?);
    if results.iter().any(|r| r.checked == 0) {
        return Err(Error::Contract("a gradient check case had no entries".into()));
    }
    Ok(GradcheckReport {
        results,
        seconds: started.elapsed().as_secs_f64(),
    })
}
