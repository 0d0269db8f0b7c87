//! Runs the `xplain` binary end to end and checks files and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use xplain::error::{EXIT_COMPILE, EXIT_LOAD, EXIT_RUNTIME, EXIT_USAGE};
use xplain_core::io::{read_tensor_file, write_tensor};
use xplain_core::model::{make_reference_model, ReferenceKind};
use xplain_core::viz::read_image;
use xplain_core::Tensor;

fn xplain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xplain")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = xplain(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    xplain(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes the reference model of `kind` and two seeded inputs into `dir`.
fn zoo(dir: &Path, kind: &str) -> (PathBuf, PathBuf) {
    ok(&["make-model", "--kind", kind, "--seed", "1", "--inputs", "2", "--out", s(dir)]);
    (dir.join(format!("{kind}.json")), dir.join(format!("{kind}_input_0.xten")))
}

#[test]
fn analyze_writes_tensor_sidecar_and_png() {
    let d = tempfile::tempdir().unwrap();
    let (m, x) = zoo(d.path(), "cnn");
    let out = d.path().join("res/lrp.xten");
    ok(&["analyze", "--model", s(&m), "--input", s(&x), "--method", "lrp_epsilon", "--param", "epsilon=0.01", "--out", s(&out), "--viz", "auto"]);
    let t = read_tensor_file(&out).unwrap().into_f32();
    assert_eq!(t.shape(), &[1, 16, 16, 1]);
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.with_extension("json")).unwrap()).unwrap();
    assert_eq!(meta["method"], "lrp_epsilon");
    assert_eq!(meta["params"]["epsilon"], 0.009999999776482582);
    assert_eq!(meta["model_hash"].as_str().unwrap().len(), 64);
    let img = read_image(out.with_extension("png")).unwrap();
    assert_eq!((img.height(), img.width()), (16, 16));
}

#[test]
fn input_times_gradient_on_a_tiny_linear_model() {
    let d = tempfile::tempdir().unwrap();
    let manifest = r#"{"input_shape":[1,2],"input_range":[-5,5],"output":"out",
        "layers":[{"name":"x","kind":"input","inputs":[]},
                  {"name":"out","kind":"dense","inputs":["x"],"weights":"w"}]}"#;
    std::fs::write(d.path().join("lin.json"), manifest).unwrap();
    let w = Tensor::new(&[2, 1], vec![3.0, -1.0]).unwrap();
    std::fs::write(
        d.path().join("lin.xwts"),
        xplain_core::io::encode_weights([("w", &w)]),
    )
    .unwrap();
    let x = d.path().join("x.xten");
    write_tensor(&x, &Tensor::new(&[1, 2], vec![1.0f32, 2.0]).unwrap()).unwrap();
    let out = d.path().join("ixg.xten");
    ok(&["analyze", "--model", s(&d.path().join("lin.json")), "--input", s(&x), "--method", "input_t_gradient", "--out", s(&out)]);
    assert_eq!(read_tensor_file(&out).unwrap().into_f32().data(), &[3.0, -2.0]);
}

#[test]
fn exit_codes_by_error_class() {
    let d = tempfile::tempdir().unwrap();
    let (m, x) = zoo(d.path(), "cnn");
    let out = d.path().join("o.xten");
    let base = |method: &str| {
        vec!["analyze", "--model", s(&m), "--input", s(&x), "--method", method, "--out", s(&out)]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>()
    };
    let run = |v: Vec<String>| code(&v.iter().map(String::as_str).collect::<Vec<_>>());

    assert_eq!(run(base("nope")), EXIT_USAGE);
    assert_eq!(run(base("gradient:steps=3")), EXIT_USAGE);
    assert_eq!(run(base("lrp_alphabeta:alpha=2")), EXIT_USAGE);
    assert_eq!(code(&["analyze", "--model", "missing.json", "--input", s(&x), "--method", "gradient", "--out", s(&out)]), EXIT_LOAD);

    // patterns of another architecture
    let (mlp, _) = zoo(d.path(), "mlp");
    let pf = d.path().join("mlp.patterns");
    xplain_core::prop::Patterns::from_kernels(&xplain::files::load_model(&mlp, None).unwrap().model)
        .save(&pf)
        .unwrap();
    let mut v = base("patternnet");
    v.extend(["--patterns".to_string(), s(&pf).to_string()]);
    assert_eq!(run(v), EXIT_COMPILE);

    // Deep Taylor on a negative selected output
    let model = make_reference_model(ReferenceKind::Cnn, 1).strip_softmax().unwrap();
    let logits = model.predict(&xplain_core::io::read_tensor_file(&x).unwrap().into_f32()).unwrap();
    let neg = logits.data().iter().position(|&v| v < 0.0).expect("some negative logit");
    let mut v = base("deep_taylor");
    v.extend(["--neuron".to_string(), neg.to_string()]);
    let o = xplain(&v.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(o.status.code().unwrap(), EXIT_RUNTIME);
    assert!(String::from_utf8_lossy(&o.stderr).contains("negative"));
}

#[test]
fn grid_geometry_and_degenerate_tiling() {
    let d = tempfile::tempdir().unwrap();
    let (m, x0) = zoo(d.path(), "cnn");
    let x1 = d.path().join("cnn_input_1.xten");
    let g = d.path().join("g.png");
    ok(&["grid", "--model", s(&m), "--input", s(&x0), "--input", s(&x1), "--input", s(&x0), "--method", "gradient", "--method", "guided_backprop", "--pad", "2", "--out", s(&g)]);
    let img = read_image(&g).unwrap();
    assert_eq!((img.height(), img.width()), (3 * 16 + 2 * 2, 2 * 16 + 2));

    let one = d.path().join("one.png");
    ok(&["grid", "--model", s(&m), "--input", s(&x0), "--method", "gradient", "--out", s(&one)]);
    let single = d.path().join("single.xten");
    ok(&["analyze", "--model", s(&m), "--input", s(&x0), "--method", "gradient", "--out", s(&single), "--viz", "auto"]);
    assert_eq!(read_image(&one).unwrap(), read_image(single.with_extension("png")).unwrap());

    // architecture mode: models as rows; failing cells are marked, not fatal
    let (mlp, _) = zoo(d.path(), "mlp");
    let arch = d.path().join("arch.png");
    let o = ok(&["grid", "--architectures", "--model", s(&mlp), "--model", s(&m), "--input", s(&x0), "--method", "gradient", "--method", "patternnet", "--out", s(&arch)]);
    assert!(o.contains("2 warnings"), "{o}");
    let img = read_image(&arch).unwrap();
    assert_eq!((img.height(), img.width()), (2 * 16 + 2, 2 * 16 + 2));
}

#[test]
fn sweeps_emit_expected_counts() {
    let d = tempfile::tempdir().unwrap();
    let (m, x) = zoo(d.path(), "mlp");
    let ig = d.path().join("ig");
    ok(&["sweep", "--model", s(&m), "--input", s(&x), "--kind", "ig-reference", "--samples", "4", "--out", s(&ig)]);
    let count = |p: &Path| std::fs::read_dir(p).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "xten").count();
    assert_eq!(count(&ig), 5);
    let sg = d.path().join("sg");
    ok(&["sweep", "--model", s(&m), "--input", s(&x), "--kind", "sg-scale", "--samples", "2", "--out", s(&sg)]);
    assert_eq!(count(&sg), 10);
    let img = read_image(sg.join("sweep.png")).unwrap();
    assert_eq!((img.height(), img.width()), (2 * 16 + 2, 5 * 16 + 4 * 2));
}

#[test]
fn bbox_ratio_and_sentinels() {
    let d = tempfile::tempdir().unwrap();
    let e = d.path().join("e.xten");
    write_tensor(&e, &Tensor::full(&[1, 4, 4, 1], 2.0f32)).unwrap();
    assert_eq!(ok(&["bbox", "--saliency", s(&e), "--bbox", "0,0,2,4"]).trim(), "1");
    let mut inside = Tensor::zeros(&[1, 4, 4, 1]);
    inside.data_mut()[0] = 1.0f32;
    write_tensor(&e, &inside).unwrap();
    let csv = d.path().join("b.csv");
    assert_eq!(ok(&["bbox", "--saliency", s(&e), "--bbox", "0,0,2,2", "--out", s(&csv)]).trim(), "inf");
    assert_eq!(std::fs::read_to_string(&csv).unwrap(), "x,y,w,h,inside,outside,ratio\n0,0,2,2,1,0,inf\n");
    write_tensor(&e, &Tensor::<f32>::zeros(&[1, 4, 4, 1])).unwrap();
    assert_eq!(ok(&["bbox", "--saliency", s(&e), "--bbox", "0,0,2,2"]).trim(), "nan");
    assert_eq!(code(&["bbox", "--saliency", s(&e), "--bbox", "0,0,4,4"]), EXIT_USAGE);

    let (m, x) = zoo(d.path(), "cnn");
    let r = ok(&["bbox", "--model", s(&m), "--input", s(&x), "--method", "gradient", "--bbox", "4,4,8,8"]);
    assert!(r.trim().parse::<f64>().unwrap() > 0.0);
}

#[test]
fn perturbation_curve_endpoints() {
    let d = tempfile::tempdir().unwrap();
    let (m, x) = zoo(d.path(), "cnn");
    let csv = d.path().join("p.csv");
    ok(&["perturb", "--model", s(&m), "--input", s(&x), "--method", "lrp_epsilon", "--patch", "4", "--out", s(&csv)]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,fraction_perturbed,output_value"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 17);

    let model = make_reference_model(ReferenceKind::Cnn, 1).strip_softmax().unwrap();
    let input = read_tensor_file(&x).unwrap().into_f32();
    let base = model.predict(&input).unwrap();
    let k = base.argmax().unwrap();
    assert_eq!(rows[0][2], base.data()[k] as f64);
    let filled = Tensor::full(&[1, 16, 16, 1], -1.0f32);
    assert_eq!(rows[16][2], model.predict(&filled).unwrap().data()[k] as f64);
    assert_eq!(rows[16][1], 1.0);
}

#[test]
fn bench_csv_layout() {
    let d = tempfile::tempdir().unwrap();
    let (m, _) = zoo(d.path(), "linear");
    let csv = d.path().join("bench.csv");
    ok(&["--jobs", "2", "bench", "--model", s(&m), "--method", "gradient", "--method", "lrp_epsilon", "--n", "1", "--repeats", "1", "--out", s(&csv)]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "method,repeat,n,setup_s,run_s,naive_s");
    assert_eq!(lines.len(), 1 + 2 * 2);
    assert!(lines[2].starts_with("gradient,mean,1,"));
    for l in &lines[1..] {
        let t: Vec<f64> = l.split(',').skip(3).map(|v| v.parse().unwrap()).collect();
        assert!(t.iter().all(|&v| v > 0.0), "{l}");
    }
    assert!(!text.contains('\r'));
}

#[test]
fn png_inputs_are_accepted() {
    let d = tempfile::tempdir().unwrap();
    let (m, _) = zoo(d.path(), "mlp");
    let png = d.path().join("x.png");
    xplain_core::viz::write_png(&xplain_core::viz::RGBImage::filled(16, 16, [0.5, 0.5, 0.5]), &png).unwrap();
    let out = d.path().join("o.xten");
    ok(&["analyze", "--model", s(&m), "--input", s(&png), "--method", "smoothgrad:n=2", "--out", s(&out)]);
    assert_eq!(code(&["--help"]), 0);
}
