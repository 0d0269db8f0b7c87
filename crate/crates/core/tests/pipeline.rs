//! End-to-end use of the public API: model files, every analyzer, saliency
//! export and rendering.

use proptest::prelude::*;
use xplain_core::analyzer::{Analyzer, Method, MethodId, METHOD_NAMES};
use xplain_core::autodiff::NeuronSelector;
use xplain_core::io::{model_hash, read_tensor_file};
use xplain_core::model::{load_model, make_reference_model, model_to_bytes, save_model, LoadOptions, Model, ReferenceKind};
use xplain_core::prop::{estimate_patterns_linear, Patterns};
use xplain_core::rng::XorShift64Star;
use xplain_core::{viz, Error, Tensor};

fn seeded(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = XorShift64Star::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(lo, hi) as f32).collect()).unwrap()
}

fn quick(id: MethodId, model: &Model) -> Method {
    let params: Vec<(String, String)> = match id {
        MethodId::Lime => vec![("nr_samples".into(), "100".into())],
        MethodId::SmoothGrad => vec![("n".into(), "4".into())],
        MethodId::IntegratedGradients => vec![("steps".into(), "8".into())],
        _ => vec![],
    };
    let patterns = id.needs_patterns().then(|| Patterns::from_kernels(model));
    Method::from_params(id, &params, patterns).unwrap()
}

#[test]
fn saved_model_analyzes_identically() {
    let dir = tempfile::tempdir().unwrap();
    let model = make_reference_model(ReferenceKind::Cnn, 7);
    let (mp, wp) = (dir.path().join("cnn.json"), dir.path().join("cnn.xwts"));
    save_model(&model, &mp, &wp).unwrap();
    let loaded = load_model(&mp, &wp, LoadOptions::default()).unwrap();
    let x = seeded(model.input_shape(), 1, -1.0, 1.0);
    for name in ["gradient", "lrp_epsilon", "occlusion"] {
        let id: MethodId = name.parse().unwrap();
        let a = Analyzer::build(&model, quick(id, &model), NeuronSelector::MaxActivation).unwrap();
        let b = Analyzer::build(&loaded, quick(id, &loaded), NeuronSelector::MaxActivation).unwrap();
        assert_eq!(a.analyze(&x).unwrap(), b.analyze(&x).unwrap(), "{name}");
    }
}

#[test]
fn export_carries_a_verifiable_hash() {
    let dir = tempfile::tempdir().unwrap();
    let model = make_reference_model(ReferenceKind::Mlp, 3);
    let (m, w) = model_to_bytes(&model).unwrap();
    let hash = model_hash(&m, &w);
    let a = Analyzer::build(&model, Method::Gradient, NeuronSelector::Index(4)).unwrap();
    let s = a.analyze(&seeded(model.input_shape(), 2, -1.0, 1.0)).unwrap();
    let sidecar = s.export(dir.path().join("g.xten"), &hash).unwrap();
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(sidecar).unwrap()).unwrap();
    assert_eq!(meta["model_hash"], hash.as_str());
    assert_eq!(meta["method"], "gradient");
    assert_eq!(meta["neuron_index"], 4);
    assert_eq!(read_tensor_file(dir.path().join("g.xten")).unwrap().into_f32(), s.values);

    let mut tampered = w.clone();
    tampered[w.len() - 1] ^= 1;
    assert_ne!(model_hash(&m, &tampered), hash);
}

#[test]
fn every_method_renders_on_the_cnn() {
    let model = make_reference_model(ReferenceKind::Cnn, 5);
    let x = seeded(model.input_shape(), 3, -1.0, 1.0);
    let raw = viz::RGBImage::from_input(&x, model.input_range()).unwrap();
    for name in METHOD_NAMES {
        let id: MethodId = name.parse().unwrap();
        let a = Analyzer::build(&model, quick(id, &model), NeuronSelector::MaxActivation).unwrap();
        let s = match a.analyze(&x) {
            Ok(s) => s,
            Err(Error::Domain(_)) => continue,
            Err(e) => panic!("{name}: {e}"),
        };
        for img in [
            viz::to_heatmap(&s.values).unwrap(),
            viz::to_graymap(&s.values).unwrap(),
            viz::blend_overlay(&s.values, &raw).unwrap(),
            viz::project(&s.values).unwrap(),
        ] {
            assert_eq!((img.height(), img.width()), (16, 16));
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)), "{name}");
        }
    }
}

#[test]
fn fitted_patterns_survive_a_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = make_reference_model(ReferenceKind::Cnn, 2).strip_softmax().unwrap();
    let data = seeded(&[32, 16, 16, 1], 4, -1.0, 1.0);
    let p = estimate_patterns_linear(&model, &data).unwrap();
    let path = dir.path().join("p.xwts");
    p.save(&path).unwrap();
    let back = Patterns::load(&path).unwrap();
    assert_eq!(p, back);
    let x = seeded(model.input_shape(), 5, -1.0, 1.0);
    let run = |p: Patterns| {
        Analyzer::build(&model, Method::PatternNet(p), NeuronSelector::MaxActivation)
            .unwrap()
            .analyze(&x)
            .unwrap()
    };
    assert_eq!(run(p), run(back));
}

#[test]
fn patterns_from_another_model_are_incompatible() {
    let mlp = make_reference_model(ReferenceKind::Mlp, 0);
    let cnn = make_reference_model(ReferenceKind::Cnn, 0);
    let r = Analyzer::build(&cnn, Method::PatternNet(Patterns::from_kernels(&mlp)), NeuronSelector::MaxActivation);
    assert!(matches!(r, Err(Error::Incompatible { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn saliency_matches_input_shape_and_is_deterministic(
        seed in any::<u64>(),
        kind in prop::sample::select(vec![ReferenceKind::Linear, ReferenceKind::Mlp, ReferenceKind::Cnn]),
        name in prop::sample::select(METHOD_NAMES.to_vec()),
    ) {
        let model = make_reference_model(kind, seed % 8);
        let x = seeded(model.input_shape(), seed, -1.0, 1.0);
        let id: MethodId = name.parse().unwrap();
        let a = Analyzer::build(&model, quick(id, &model), NeuronSelector::MaxActivation).unwrap();
        match a.analyze(&x) {
            Ok(s) => {
                prop_assert_eq!(s.values.shape(), x.shape());
                prop_assert!(s.values.is_finite());
                prop_assert_eq!(a.analyze(&x).unwrap(), s);
            }
            Err(Error::Domain(_)) => prop_assert_eq!(id, MethodId::DeepTaylor),
            Err(e) => prop_assert!(false, "{}: {}", name, e),
        }
    }
}
