use trimf::autodiff::Tape;
use trimf::config::RunConfig;
use trimf::data::{generate_synthetic, mask_modality, Dataset, ModalityShapes, SynthSpec};
use trimf::losses::LossWeights;
use trimf::metrics::predict_view;
use trimf::modality::{ModalityId, ModalityMask, Pair};
use trimf::model::{embed_tabular, make_variant, trimf_forward, ArchConfig, Batch, ModelConfig, TriMF, Variant};
use trimf::nn::Ctx;
use trimf::params::ParamStore;
use trimf::tensor::Tensor;

fn small_model() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        heads: 2,
        layers: 1,
        d_ff: 12,
        lmf_rank: 2,
        fusion_dim: 6,
        tabular_embed_dim: 4,
        lmf_bias_augment: false,
    }
}

fn data(seed: u64) -> Dataset {
    generate_synthetic(&SynthSpec { sample_count: 6, seed, ..SynthSpec::default() }).unwrap()
}

fn arch(d: &Dataset, variant: Variant) -> ArchConfig {
    let inputs = SynthSpec::default().modalities;
    let base = ArchConfig::new(small_model(), inputs, d.header.label_count);
    make_variant(&base, &LossWeights::DEFAULT, false, variant).0
}

#[test]
fn routing_identity_over_seeds() {
    for seed in 0..10 {
        let d = data(seed);
        let (model, store) = TriMF::new::<f64>(arch(&d, Variant::Full), seed).unwrap();
        for sample in &d.samples {
            let full = trimf_forward(&model, &store, sample, ModalityMask::ALL).unwrap();
            assert_eq!(full.bimf.len(), 3);
            // exact left-to-right sum in configuration order
            let sum: Vec<f64> = (0..full.tri.len())
                .map(|i| full.bimf[0].1[i] + full.bimf[1].1[i] + full.bimf[2].1[i])
                .collect();
            assert_eq!(full.tri, sum, "seed {seed}");
            for m in ModalityId::ALL {
                let masked = trimf_forward(&model, &store, sample, ModalityMask::ALL.without(m)).unwrap();
                let survivor = Pair::from_mask(ModalityMask::ALL.without(m)).unwrap();
                assert_eq!(masked.bimf.len(), 1);
                assert_eq!(masked.bimf[0].0, survivor);
                assert_eq!(masked.tri, masked.bimf[0].1, "seed {seed}, {m} masked");
                // the survivor's vector does not depend on the absent modality
                let unmasked = &full.bimf.iter().find(|(p, _)| *p == survivor).unwrap().1;
                assert_eq!(&masked.tri, unmasked, "seed {seed}, {m} masked");
            }
        }
    }
}

#[test]
fn masked_logits_are_classifier_of_pair_vector() {
    let d = data(3);
    let (model, store) = TriMF::new::<f64>(arch(&d, Variant::Full), 3).unwrap();
    let out = trimf_forward(&model, &store, &d.samples[0], ModalityMask::ALL.without(ModalityId::Tabular)).unwrap();
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store);
    let f = tape.constant(Tensor::new(&[1, out.tri.len()], out.tri.clone()).unwrap());
    let direct = model.classifier.forward(ctx, f).unwrap().to_vec();
    assert_eq!(out.logits, direct);
}

#[test]
fn masked_view_equals_per_sample_mask() {
    let d = data(4);
    let (model, store) = TriMF::new::<f64>(arch(&d, Variant::Full), 4).unwrap();
    let view = mask_modality(&d.view(), ModalityId::Image);
    let batched = predict_view(&model, &store, &view, 4).unwrap();
    for (i, sample) in d.samples.iter().enumerate() {
        let single = trimf_forward(&model, &store, sample, ModalityMask::ALL.without(ModalityId::Image)).unwrap();
        let gap = batched[i].iter().zip(&single.logits).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-12, "sample {i}: {gap}");
    }
}

#[test]
fn one_modality_is_unsupported() {
    let d = data(0);
    let (model, store) = TriMF::new::<f64>(arch(&d, Variant::Full), 0).unwrap();
    let err = trimf_forward(&model, &store, &d.samples[0], ModalityMask::NONE.with(ModalityId::Text)).unwrap_err();
    assert!(matches!(err, trimf::Error::UnsupportedMask { .. }), "{err}");
}

#[test]
fn variants_reshape_the_tree() {
    let d = data(0);
    let (full, full_store) = TriMF::new::<f64>(arch(&d, Variant::Full), 0).unwrap();
    let (default, default_store) = TriMF::new::<f64>(ArchConfig::new(small_model(), SynthSpec::default().modalities, 14), 0).unwrap();
    let names = |s: &ParamStore<f64>| s.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect::<Vec<_>>();
    assert_eq!(names(&full_store), names(&default_store));
    assert_eq!(full.sa_unit_count(), default.sa_unit_count());

    let (no_sa, no_sa_store) = TriMF::new::<f64>(arch(&d, Variant::NoSa), 0).unwrap();
    assert_eq!(no_sa.sa_unit_count(), 0);
    assert!(no_sa_store.iter().all(|(n, _)| !n.contains(".sa_")));
    assert!(full_store.iter().any(|(n, _)| n.contains(".sa_")));

    let (no_lmf, _) = TriMF::new::<f64>(arch(&d, Variant::NoLmf), 0).unwrap();
    assert_eq!(no_lmf.arch.classifier_input_dim(), 6 * 8);
    assert_eq!(no_lmf.classifier.fan_in, 6 * 8);

    let full_scale = RunConfig::full_scale();
    let (wide, _) = full_scale.build(SynthSpec::default().modalities, 14).unwrap();
    let wide = ArchConfig { variant: Variant::NoLmf, ..wide };
    assert_eq!(wide.classifier_input_dim(), 1536);
}

#[test]
fn tabular_embedding_is_affine_per_feature() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let emb = trimf::model::TabularEmbedder::new(&mut store, &mut trimf::params::Init::new(&mut rng), "tab", 2);
    store.get_mut(emb.weight).data_mut().copy_from_slice(&[1.0, 1.0]);
    store.get_mut(emb.bias).data_mut().copy_from_slice(&[0.0, 1.0]);
    assert_eq!(embed_tabular(&[2.0], &emb, &store).unwrap().data(), &[2.0, 3.0]);
    store.get_mut(emb.bias).data_mut().copy_from_slice(&[0.0, 0.0]);
    assert_eq!(embed_tabular(&[0.0], &emb, &store).unwrap().data(), &[0.0, 0.0]);

    // published scale: 51 features embedded at width 256
    let mut store = ParamStore::<f64>::new();
    let emb = trimf::model::TabularEmbedder::new(&mut store, &mut trimf::params::Init::new(&mut rng), "tab", 256);
    assert_eq!(embed_tabular(&[0.5; 51], &emb, &store).unwrap().shape(), &[51, 256]);
}

#[test]
fn batch_from_masked_view_drops_absent_inputs() {
    let d = data(0);
    let shapes: ModalityShapes = SynthSpec::default().modalities;
    let view = mask_modality(&d.view(), ModalityId::Text);
    let b = Batch::<f64>::from_view(&view, &[0, 1, 2], &shapes).unwrap();
    assert!(b.inputs[ModalityId::Text.index()].is_none());
    assert_eq!(b.inputs[ModalityId::Image.index()].as_ref().unwrap().shape(), &[12, 4]);
}
