//! Acceptance criteria, one PASS/FAIL line each. Lines go straight to the
//! process stdout so they show up without `--nocapture`.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::{auroc_pairs, lmf, max_abs_diff, randn, rng};
use rand::Rng;
use trimf::autodiff::{Tape, Var};
use trimf::config::RunConfig;
use trimf::data::{generate_synthetic, split_811, Dataset, SynthSpec};
use trimf::experiment::{ExperimentConfig, Runner, SuiteOutput, Suite};
use trimf::gradcheck::run_gradcheck;
use trimf::lmf::{lmf_fuse, LmfParams};
use trimf::losses::{combined_loss, frcl, LossPlan, LossWeights};
use trimf::metrics::{auprc, auroc, auroc_pairwise, predict_view};
use trimf::modality::{ModalityId, ModalityMask, Pair};
use trimf::model::{make_variant, trimf_forward, Batch, FusionVars, TriMF, Variant};
use trimf::nn::Ctx;
use trimf::params::ParamStore;
use trimf::tensor::Tensor;
use trimf::trainer::{decode_checkpoint, encode_checkpoint, loss_and_logits, restore_into, CheckpointMeta, EpochAction, Trainer};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn report(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn run(id: usize, name: &str, f: impl FnOnce() -> Check) -> bool {
    let started = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
    });
    let secs = started.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d.as_str()),
        Err(d) => ("FAIL", d.as_str()),
    };
    report(&format!("criterion {id} {name}: {tag} ({secs:.1}s) {detail}"));
    outcome.is_ok()
}

fn gradient_oracle() -> Check {
    let r = run_gradcheck(0).map_err(|e| e.to_string())?;
    let worst = r.worst().ok_or("no cases")?;
    ensure(r.passed(), || format!("{} failing, worst {} at {}: {:.2e}", r.failures().len(), worst.name, worst.worst_at, worst.worst_rel))?;
    ensure(r.seconds < 60.0, || format!("took {:.1}s", r.seconds))?;
    Ok(format!("{} cases, worst rel {:.2e} ({}), {:.1}s", r.results.len(), worst.worst_rel, worst.name, r.seconds))
}

fn fuse(rank: usize, d_z: usize, d_h: usize, wa: &[f64], wb: &[f64], a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut store = ParamStore::<f64>::new();
    let shape = [rank, d_h, d_z];
    let params = LmfParams {
        rank,
        d_z,
        d_h,
        bias_augment: false,
        w_a: store.add("w_a", Tensor::from_f64(&shape, wa).unwrap()),
        w_b: store.add("w_b", Tensor::from_f64(&shape, wb).unwrap()),
    };
    let tape = Tape::new();
    let row = |v: &[f64]| tape.constant(Tensor::from_f64(&[1, v.len()], v).unwrap());
    lmf_fuse(Ctx::new(&tape, &store), row(a), row(b), &params).unwrap().to_vec()
}

fn lmf_oracle() -> Check {
    let mut r = rng(2024);
    let (mut worst, mut worst_bilinear) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let rank = r.gen_range(1..=4);
        let (d_z, d_h) = (r.gen_range(1..=8), r.gen_range(1..=8));
        let n = rank * d_h * d_z;
        let (wa, wb) = (randn(&mut r, n), randn(&mut r, n));
        let (a, b, a2) = (randn(&mut r, d_z), randn(&mut r, d_z), randn(&mut r, d_z));
        let got = fuse(rank, d_z, d_h, &wa, &wb, &a, &b);
        worst = worst.max(max_abs_diff(&got, &lmf(&a, &b, &wa, &wb, rank, d_h, false)));

        let alpha: f64 = r.gen_range(-3.0..3.0);
        let scaled: Vec<f64> = a.iter().map(|x| alpha * x).collect();
        let lhs = fuse(rank, d_z, d_h, &wa, &wb, &scaled, &b);
        worst_bilinear = worst_bilinear.max(max_abs_diff(&lhs, &got.iter().map(|x| alpha * x).collect::<Vec<_>>()));
        let scaled_b: Vec<f64> = b.iter().map(|x| alpha * x).collect();
        let lhs = fuse(rank, d_z, d_h, &wa, &wb, &a, &scaled_b);
        worst_bilinear = worst_bilinear.max(max_abs_diff(&lhs, &got.iter().map(|x| alpha * x).collect::<Vec<_>>()));
        let sum: Vec<f64> = a.iter().zip(&a2).map(|(x, y)| x + y).collect();
        let lhs = fuse(rank, d_z, d_h, &wa, &wb, &sum, &b);
        let rhs: Vec<f64> = got.iter().zip(fuse(rank, d_z, d_h, &wa, &wb, &a2, &b)).map(|(x, y)| x + y).collect();
        worst_bilinear = worst_bilinear.max(max_abs_diff(&lhs, &rhs));
    }
    ensure(worst <= 1e-12, || format!("oracle gap {worst:.2e}"))?;
    ensure(worst_bilinear <= 1e-10, || format!("bilinearity gap {worst_bilinear:.2e}"))?;
    Ok(format!("oracle gap {worst:.1e}, bilinearity gap {worst_bilinear:.1e} over 100 instances"))
}

fn desk_model(data: &Dataset, variant: Variant, seed: u64) -> (TriMF, ParamStore<f64>, LossPlan) {
    let mut run = RunConfig::desk();
    run.variant = variant;
    let (arch, plan) = run.build(data.header.shapes().unwrap(), data.header.label_count).unwrap();
    let (model, store) = TriMF::new::<f64>(arch, seed).unwrap();
    (model, store, plan)
}

fn routing_identity() -> Check {
    let mut checked = 0;
    for seed in 0..5 {
        let data = generate_synthetic(&SynthSpec { sample_count: 4, seed, ..SynthSpec::default() }).unwrap();
        let (model, store, _) = desk_model(&data, Variant::Full, seed);
        for sample in &data.samples {
            let full = trimf_forward(&model, &store, sample, ModalityMask::ALL).map_err(|e| e.to_string())?;
            let sum: Vec<f64> = (0..full.tri.len()).map(|i| full.bimf[0].1[i] + full.bimf[1].1[i] + full.bimf[2].1[i]).collect();
            ensure(full.tri == sum, || format!("seed {seed}: tri differs from the pair sum"))?;
            for m in ModalityId::ALL {
                let mask = ModalityMask::ALL.without(m);
                let survivor = Pair::from_mask(mask).unwrap();
                let masked = trimf_forward(&model, &store, sample, mask).map_err(|e| e.to_string())?;
                let pair_vec = &full.bimf.iter().find(|(p, _)| *p == survivor).unwrap().1;
                let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                ensure(masked.bimf.len() == 1 && bits(&masked.tri) == bits(pair_vec), || {
                    format!("seed {seed}, {m} masked: tri is not the {} vector", survivor.name())
                })?;
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} masked forwards bit-identical, unmasked sums exact"))
}

fn row<'t>(tape: &'t Tape<f64>, v: &[f64]) -> Var<'t, f64> {
    tape.constant(Tensor::from_f64(&[1, v.len()], v).unwrap())
}

fn loss_contracts() -> Check {
    let tape = Tape::new();
    let mut r = rng(7);
    for _ in 0..500 {
        let (a, b) = (randn(&mut r, 8), randn(&mut r, 8));
        for mean in [false, true] {
            let ab = frcl(row(&tape, &a), row(&tape, &b), mean).unwrap().item();
            let ba = frcl(row(&tape, &b), row(&tape, &a), mean).unwrap().item();
            let aa = frcl(row(&tape, &a), row(&tape, &a), mean).unwrap().item();
            ensure(ab == ba && ab > 0.0 && aa == 0.0, || format!("frcl {ab} {ba} {aa}"))?;
        }
    }

    // coinciding fusion vectors
    let f = [0.4, -1.2, 0.9];
    let bimf: Vec<(Pair, Var<'_, f64>)> = Pair::ALL.iter().map(|p| (*p, row(&tape, &f))).collect();
    let tri = bimf[0].1.add(bimf[1].1).unwrap().add(bimf[2].1).unwrap();
    let out = FusionVars { active: ModalityMask::ALL, bimf, cls: Vec::new(), tri, logits: row(&tape, &[0.3, -0.8]) };
    let targets = Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap();
    for mean in [false, true] {
        let plan = LossPlan::new(&LossWeights::DEFAULT, &Pair::ALL, mean);
        let parts = combined_loss(&out, &targets, &plan).unwrap();
        ensure(parts.total.item() == plan.lambda1 * parts.classification.item(), || "coinciding vectors left a contrastive term".into())?;
    }

    // no_frcl through the real model
    let data = generate_synthetic(&SynthSpec { sample_count: 8, ..SynthSpec::default() }).unwrap();
    let (base, _, _) = desk_model(&data, Variant::Full, 1);
    let (arch, plan) = make_variant(&base.arch, &LossWeights::DEFAULT, true, Variant::NoFrcl);
    let (model, store) = TriMF::new::<f64>(arch, 1).unwrap();
    let samples: Vec<_> = data.samples.iter().collect();
    let batch = Batch::<f64>::from_samples(&samples, &model.arch.inputs, data.header.label_count, ModalityMask::ALL).unwrap();
    let tape = Tape::new();
    let vars = model.forward(Ctx::new(&tape, &store), &batch).unwrap();
    let parts = combined_loss(&vars, &batch.targets, &plan).unwrap();
    ensure(parts.contrastive.is_empty(), || "no_frcl plan has contrastive terms".into())?;
    ensure(parts.total.item() == plan.lambda1 * parts.classification.item(), || "no_frcl total differs from λ₁·BCE".into())?;
    Ok("FRCL exact on 500 pairs; coinciding and no_frcl totals equal λ₁·BCE exactly".into())
}

fn metric_oracles() -> Check {
    let mut r = rng(99);
    let mut done = 0;
    while done < 1000 {
        let n = r.gen_range(2..80);
        let levels = r.gen_range(1..10);
        let s: Vec<f64> = (0..n).map(|_| r.gen_range(0..levels) as f64 * 0.1).collect();
        let y: Vec<bool> = (0..n).map(|_| r.gen_bool(0.4)).collect();
        let Some(want) = auroc_pairs(&s, &y) else { continue };
        let got = auroc(&s, &y).map_err(|e| e.to_string())?;
        ensure(got == want && got == auroc_pairwise(&s, &y).unwrap(), || format!("{got} vs {want}"))?;
        let t: Vec<f64> = s.iter().map(|v| (2.0 * v).exp() + 1.0).collect();
        ensure(auroc(&t, &y).unwrap() == got && auprc(&t, &y).unwrap() == auprc(&s, &y).unwrap(), || "monotone transform changed a metric".into())?;
        done += 1;
    }
    let (s, y) = ([0.1, 0.4, 0.35, 0.8], [false, false, true, true]);
    let (roc, ap) = (auroc(&s, &y).unwrap(), auprc(&s, &y).unwrap());
    ensure((roc - 0.75).abs() < 1e-12, || format!("AUROC {roc}"))?;
    ensure((ap - 5.0 / 6.0).abs() < 1e-12, || format!("AP {ap}"))?;
    Ok(format!("1000 instances exact; worked AUROC {roc}, AP {ap:.4}"))
}

fn trainer_protocol() -> Check {
    let data = generate_synthetic(&SynthSpec { sample_count: 64, ..SynthSpec::default() }).unwrap();
    let run = RunConfig::desk();
    let make = || {
        let (arch, plan) = run.build(data.header.shapes().unwrap(), data.header.label_count).unwrap();
        let (model, store) = TriMF::new::<f32>(arch, run.seed).unwrap();
        Trainer::new(model, store, plan, &run.trainer, run.seed)
    };

    // plateaus: improvement at epoch 2, then flat
    let mut t = make();
    let mut decays = 0;
    let mut stopped = None;
    for (e, loss) in [1.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5].into_iter().enumerate() {
        match t.finish_epoch(loss).1 {
            EpochAction::DecayLr => decays += 1,
            EpochAction::Stop => {
                stopped = Some(e + 1);
                break;
            }
            EpochAction::Continue => {}
        }
        let want = 0.001 * 0.8f64.powi(decays);
        ensure((t.lr() - want).abs() <= 1e-15 * want, || format!("epoch {}: lr {} vs {want}", e + 1, t.lr()))?;
    }
    ensure(decays >= 2, || format!("{decays} decays"))?;
    ensure(stopped == Some(2 + 6) && t.schedule.best_epoch == 2, || format!("stopped at {stopped:?}, best {}", t.schedule.best_epoch))?;

    // overfit, then checkpoint the trained state
    let mut t = make();
    let all = data.view();
    let bce_only = LossPlan::new(&LossWeights::classification_only(1.0), &t.model.arch.pairs, false);
    let mut reached = None;
    for epoch in 1..=100 {
        t.train_epoch(&all, epoch).map_err(|e| e.to_string())?;
        let (bce, _) = loss_and_logits(&t.model, &t.store, &bce_only, &all).map_err(|e| e.to_string())?;
        if bce < 0.05 {
            reached = Some((epoch, bce));
            break;
        }
    }
    let (epoch, bce) = reached.ok_or("train BCE stayed at or above 0.05 for 100 epochs")?;

    let meta = CheckpointMeta { epoch, val_loss: bce, seed: run.seed, arch: t.model.arch.clone(), run: serde_json::to_value(&run).unwrap() };
    let bytes = encode_checkpoint(&meta, &t.store, Some(&t.adam)).map_err(|e| e.to_string())?;
    let back = decode_checkpoint::<f32>(&bytes).map_err(|e| e.to_string())?;
    let again = encode_checkpoint(&back.meta, &back.params, back.adam.as_ref()).map_err(|e| e.to_string())?;
    ensure(again == bytes, || "re-encoded checkpoint differs".into())?;
    let split = split_811(&data, 0).unwrap();
    let view = data.subset(&split.test);
    let (fresh, mut restored) = TriMF::new::<f32>(t.model.arch.clone(), 1234).unwrap();
    restore_into(&mut restored, &back).map_err(|e| e.to_string())?;
    let before = predict_view(&t.model, &t.store, &view, 8).unwrap();
    let after = predict_view(&fresh, &restored, &view, 8).unwrap();
    ensure(before == after, || "restored parameters predict differently".into())?;
    Ok(format!("lr trace with {decays} decays, stop at 8 (best 2), round trip {} bytes, BCE {bce:.4} at epoch {epoch}", bytes.len()))
}

fn mean(out: &SuiteOutput, model: &str, regime: &str, condition: &str) -> Result<f64, String> {
    let s = out.summary_for(model, regime, condition).ok_or_else(|| format!("no summary for {model} {regime} {condition}"))?;
    ensure(s.seeds_failed == 0, || format!("{model}: {} failed seeds", s.seeds_failed))?;
    s.auroc_mean.ok_or_else(|| format!("{model}: no AUROC"))
}

fn fusion_ordering(out: &SuiteOutput) -> Check {
    let all = ModalityMask::ALL.to_string();
    let tri = mean(out, "trimf", "", &all)?;
    let mut pairs = Vec::new();
    for p in Pair::ALL {
        pairs.push((format!("bimf_{}", p.name()), mean(out, &format!("bimf_{}", p.name()), "", &all)?));
    }
    let mut probes = Vec::new();
    for m in ModalityId::ALL {
        let name = format!("probe_{}", m.name());
        probes.push((name.clone(), mean(out, &name, "", &ModalityMask::NONE.with(m).to_string())?));
    }
    let best = |v: &[(String, f64)]| v.iter().cloned().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    let (best_pair, best_uni) = (best(&pairs), best(&probes));
    let detail = format!(
        "trimf {tri:.4} >= {} {:.4} >= {} {:.4}; margin {:.4}; {:.0}s",
        best_pair.0,
        best_pair.1,
        best_uni.0,
        best_uni.1,
        tri - best_uni.1,
        out.seconds
    );
    ensure(tri >= best_pair.1 && best_pair.1 >= best_uni.1 && tri - best_uni.1 >= 0.03, || detail.clone())?;
    ensure(out.seconds < 15.0 * 60.0, || format!("{detail} (over 15 min)"))?;
    Ok(detail)
}

fn robustness(out: &SuiteOutput) -> Check {
    let mut parts = Vec::new();
    let (mut sum_a, mut sum_b) = (0.0, 0.0);
    for m in ModalityId::ALL {
        let mask = ModalityMask::ALL.without(m);
        let pair = Pair::from_mask(mask).unwrap();
        let a = mean(out, "trimf", "A", &mask.to_string())?;
        let b = mean(out, &format!("bimf_{}", pair.name()), "B", &mask.to_string())?;
        sum_a += a;
        sum_b += b;
        parts.push(format!("{mask} A {a:.4} B {b:.4}"));
        ensure(a >= b - 0.01, || parts.join(", "))?;
    }
    let full = out.mean_masked_drop("trimf").ok_or("no drops for trimf")?;
    let plain = out.mean_masked_drop("trimf_no_frcl").ok_or("no drops for trimf_no_frcl")?;
    parts.push(format!("mean A {:.4} B {:.4}", sum_a / 3.0, sum_b / 3.0));
    parts.push(format!("drop full {full:.4} vs no_frcl {plain:.4}"));
    ensure(full <= plain + 0.01, || parts.join(", "))?;
    Ok(parts.join(", "))
}

fn ablation(out: &SuiteOutput) -> Check {
    let mut parts = Vec::new();
    for v in Variant::ALL {
        let name = if v == Variant::Full { "trimf".to_string() } else { format!("trimf_{}", v.name()) };
        let a = mean(out, &name, "", &ModalityMask::ALL.to_string())?;
        ensure(a.is_finite() && (0.0..=1.0).contains(&a), || format!("{name}: {a}"))?;
        parts.push(format!("{} {a:.4}", v.name()));
    }
    let data = generate_synthetic(&SynthSpec { sample_count: 4, ..SynthSpec::default() }).unwrap();
    let (no_lmf, _, _) = desk_model(&data, Variant::NoLmf, 0);
    let d = no_lmf.arch.model.d_model;
    ensure(no_lmf.arch.classifier_input_dim() == 6 * d && no_lmf.classifier.fan_in == 6 * d, || {
        format!("no_lmf classifier width {}", no_lmf.classifier.fan_in)
    })?;
    let (no_sa, store, _) = desk_model(&data, Variant::NoSa, 0);
    ensure(no_sa.sa_unit_count() == 0 && store.iter().all(|(n, _)| !n.contains(".sa_")), || "no_sa still has SA units".into())?;
    parts.push(format!("no_lmf width {} = 6·{d}, no_sa SA units 0", no_lmf.classifier.fan_in));
    Ok(parts.join(", "))
}

#[test]
fn acceptance() {
    let mut passed = Vec::new();
    passed.push(run(1, "gradient oracle", gradient_oracle));
    passed.push(run(2, "LMF oracle", lmf_oracle));
    passed.push(run(3, "routing identity", routing_identity));
    passed.push(run(4, "loss contracts", loss_contracts));
    passed.push(run(5, "metric oracles", metric_oracles));
    passed.push(run(6, "trainer protocol", trainer_protocol));

    let mut runner = Runner::new(ExperimentConfig::desk()).expect("runner");
    let comparative = runner.run_suite(Suite::Comparative);
    passed.push(run(7, "fusion ordering", || fusion_ordering(comparative.as_ref().map_err(|e| e.to_string())?)));
    let robust = runner.run_suite(Suite::Robustness);
    passed.push(run(8, "robustness", || robustness(robust.as_ref().map_err(|e| e.to_string())?)));
    runner.config.seeds = vec![0];
    let ablate = runner.run_suite(Suite::Ablation);
    passed.push(run(9, "ablation plumbing", || ablation(ablate.as_ref().map_err(|e| e.to_string())?)));

    let failed: Vec<usize> = passed.iter().enumerate().filter(|(_, ok)| !**ok).map(|(i, _)| i + 1).collect();
    report(&format!("acceptance: {}/9 passed", 9 - failed.len()));
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
