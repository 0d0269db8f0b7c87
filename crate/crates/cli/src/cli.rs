//! Command-line definitions and dispatch.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use xplain_core::analyzer::{Analyzer, MethodId};
use xplain_core::autodiff::NeuronSelector;
use xplain_core::model::{make_reference_model, Model, ReferenceKind};
use xplain_core::prop::{estimate_patterns_linear, Patterns};
use xplain_core::viz::{RGBImage, DEFAULT_MASK_TOP_K};
use xplain_core::{Saliency, Tensor};

use crate::error::{CliError, CliResult, Stage};
use crate::files::{self, format_f64, LoadedModel};
use crate::method_spec::{parse_key_value, MethodSpec};
use crate::workflows::{self, BBox, VizMode, DEFAULT_BENCH_INPUTS, DEFAULT_BENCH_REPEATS};

#[derive(Debug, Parser)]
#[command(name = "xplain", version, about = "Saliency and relevance maps for feed-forward networks")]
pub struct Cli {
    /// Worker threads for per-input analysis (default: 1).
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Explain one input with one method.
    Analyze(AnalyzeArgs),
    /// Tile explanations: inputs (or models) as rows, methods as columns.
    Grid(GridArgs),
    /// Sweep the Integrated Gradients reference or the SmoothGrad noise scale.
    Sweep(SweepArgs),
    /// Ratio of absolute attribution inside versus outside a box.
    Bbox(BboxArgs),
    /// Output decay while replacing blocks in order of attribution.
    Perturb(PerturbArgs),
    /// Time analyzer setup against per-input analysis.
    Bench(BenchArgs),
    /// Write a seeded reference model and sample inputs.
    MakeModel(MakeModelArgs),
}

#[derive(Debug, Args, Clone)]
pub struct ModelArgs {
    /// Model manifest (JSON).
    #[arg(long)]
    pub model: PathBuf,
    /// Weight container; defaults to the manifest path with `.xwts`.
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
pub struct MethodArgs {
    /// `name[:key=value,...]`.
    #[arg(long, value_parser = parse_spec)]
    pub method: MethodSpec,
    /// Extra method parameter (repeatable).
    #[arg(long = "param", value_parser = parse_param)]
    pub params: Vec<(String, String)>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args, Clone)]
pub struct CommonArgs {
    /// Output neuron: `max` or an index.
    #[arg(long, default_value = "max", value_parser = parse_neuron)]
    pub neuron: NeuronSelector,
    /// Seed for stochastic methods that were not given one.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Pattern file for PatternNet and PatternAttribution.
    #[arg(long)]
    pub patterns: Option<PathBuf>,
    /// Tensor of shape (N, ...) to fit patterns from.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Input PNG or tensor.
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub method: MethodArgs,
    /// Saliency tensor path; the sidecar goes next to it as `.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a `.png` rendering.
    #[arg(long, value_enum)]
    pub viz: Option<VizMode>,
    /// Segments kept by the mask rendering.
    #[arg(long, default_value_t = DEFAULT_MASK_TOP_K)]
    pub top_k: usize,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// Model manifests (repeatable); weights sit next to each.
    #[arg(long = "model", required = true)]
    pub models: Vec<PathBuf>,
    /// Inputs (repeatable).
    #[arg(long = "input", required = true)]
    pub inputs: Vec<PathBuf>,
    /// Method specs (repeatable).
    #[arg(long = "method", required = true, value_parser = parse_spec)]
    pub methods: Vec<MethodSpec>,
    /// Rows are models (each with the first input) instead of inputs.
    #[arg(long)]
    pub architectures: bool,
    #[arg(long, value_enum, default_value = "auto")]
    pub viz: VizMode,
    #[arg(long, default_value_t = DEFAULT_MASK_TOP_K)]
    pub top_k: usize,
    /// White pixels between cells.
    #[arg(long, default_value_t = 2)]
    pub pad: usize,
    #[command(flatten)]
    pub common: CommonArgs,
    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepKind {
    IgReference,
    SgScale,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub kind: SweepKind,
    /// Integrated Gradients steps or SmoothGrad samples.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, default_value = "max", value_parser = parse_neuron)]
    pub neuron: NeuronSelector,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for the cell tensors and `sweep.png`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BboxArgs {
    /// Saliency tensor; otherwise computed from --model/--input/--method.
    #[arg(long, conflicts_with_all = ["model", "input", "method"])]
    pub saliency: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, value_parser = parse_spec)]
    pub method: Option<MethodSpec>,
    #[arg(long = "param", value_parser = parse_param)]
    pub params: Vec<(String, String)>,
    #[command(flatten)]
    pub common: CommonArgs,
    /// `X,Y,W,H` in pixels.
    #[arg(long)]
    pub bbox: BBox,
    /// Optional CSV with the sums and the ratio.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub input: PathBuf,
    /// Saliency tensor; otherwise computed with --method.
    #[arg(long, conflicts_with = "method")]
    pub saliency: Option<PathBuf>,
    #[arg(long, value_parser = parse_spec)]
    pub method: Option<MethodSpec>,
    #[arg(long = "param", value_parser = parse_param)]
    pub params: Vec<(String, String)>,
    #[command(flatten)]
    pub common: CommonArgs,
    /// Block size in pixels.
    #[arg(long, default_value_t = xplain_core::sample::DEFAULT_OCCLUSION_PATCH)]
    pub patch: usize,
    /// Replacement value; defaults to the low end of the input range.
    #[arg(long)]
    pub replace: Option<f32>,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Method specs (repeatable); defaults to every propagation method
    /// that needs no patterns.
    #[arg(long = "method", value_parser = parse_spec)]
    pub methods: Vec<MethodSpec>,
    /// Seeded inputs per repeat.
    #[arg(long, default_value_t = DEFAULT_BENCH_INPUTS)]
    pub n: usize,
    /// Timed repeats.
    #[arg(long, default_value_t = DEFAULT_BENCH_REPEATS)]
    pub repeats: usize,
    #[command(flatten)]
    pub common: CommonArgs,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MakeModelArgs {
    #[arg(long, value_parser = parse_kind)]
    pub kind: ReferenceKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seeded input tensors to write alongside.
    #[arg(long, default_value_t = 0)]
    pub inputs: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_spec(s: &str) -> Result<MethodSpec, String> {
    s.parse().map_err(|e: CliError| e.to_string())
}

fn parse_param(s: &str) -> Result<(String, String), String> {
    parse_key_value(s).map_err(|e| e.to_string())
}

fn parse_neuron(s: &str) -> Result<NeuronSelector, String> {
    s.parse().map_err(|_| format!("neuron must be `max` or an index, got `{s}`"))
}

fn parse_kind(s: &str) -> Result<ReferenceKind, String> {
    s.parse()
}

/// Parses arguments and runs the command. `Ok` carries the text for stdout.
pub fn run<I, T>(args: I) -> CliResult<String>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(cli),
        Err(e) if !e.use_stderr() => Ok(e.render().to_string()),
        Err(e) => Err(CliError::Usage(e.render().to_string().trim_end().to_string())),
    }
}

pub fn execute(cli: Cli) -> CliResult<String> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.max(1))
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {} workers: {e}", cli.jobs)))?;
    pool.install(|| match cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Grid(a) => grid(a),
        Command::Sweep(a) => sweep(a),
        Command::Bbox(a) => bbox(a),
        Command::Perturb(a) => perturb(a),
        Command::Bench(a) => bench(a),
        Command::MakeModel(a) => make_model(a),
    })
}

/// Patterns from a file, or fitted on a dataset, when the method needs them.
fn patterns_for(id: MethodId, model: &Model, common: &CommonArgs) -> CliResult<Option<Patterns>> {
    if !id.needs_patterns() {
        return Ok(None);
    }
    match (&common.patterns, &common.dataset) {
        (Some(p), _) => Ok(Some(Patterns::load(p).at_load()?)),
        (None, Some(d)) => {
            let data = files::load_tensor(d)?;
            Ok(Some(estimate_patterns_linear(&model.strip_softmax().at_compile()?, &data).at_compile()?))
        }
        (None, None) => Err(CliError::Usage(format!(
            "method `{id}` needs --patterns or --dataset"
        ))),
    }
}

fn build(model: &Model, spec: &MethodSpec, common: &CommonArgs) -> CliResult<Analyzer> {
    let mut spec = spec.clone();
    if spec.id.keys().contains(&"seed") && spec.get("seed").is_none() {
        spec.set("seed", common.seed.to_string());
    }
    let patterns = patterns_for(spec.id, model, common)?;
    let method = spec.to_method(patterns)?;
    Analyzer::build(model, method, common.neuron).at_compile()
}

fn analyze_one(m: &LoadedModel, input: &Path, spec: &MethodSpec, common: &CommonArgs) -> CliResult<(Tensor, Saliency)> {
    let x = files::load_input(input, &m.model)?;
    let a = build(&m.model, spec, common)?;
    let s = a.analyze(&x).at_runtime()?;
    Ok((x, s))
}

fn analyze(a: AnalyzeArgs) -> CliResult<String> {
    let m = files::load_model(&a.model.model, a.model.weights.as_deref())?;
    let spec = a.method.method.clone().with_params(&a.method.params)?;
    let (x, s) = analyze_one(&m, &a.input, &spec, &a.method.common)?;
    let sidecar = files::save_saliency(&a.out, &s, &m.hash)?;
    let mut report = format!(
        "method {} neuron {} -> {} (+ {})",
        s.method,
        s.neuron_index,
        a.out.display(),
        sidecar.display()
    );
    if let Some(mode) = a.viz {
        let img = workflows::render(mode, spec.id, &s.values, &x, m.model.input_range(), a.top_k).at_runtime()?;
        let png = a.out.with_extension("png");
        files::save_png(&png, &img)?;
        report.push_str(&format!("\nimage -> {}", png.display()));
    }
    Ok(report)
}

fn grid(a: GridArgs) -> CliResult<String> {
    let models = a
        .models
        .iter()
        .map(|p| files::load_model(p, None))
        .collect::<CliResult<Vec<_>>>()?;
    // (model, input) per row
    let rows: Vec<(&LoadedModel, &PathBuf)> = if a.architectures {
        models.iter().map(|m| (m, &a.inputs[0])).collect()
    } else {
        a.inputs.iter().map(|i| (&models[0], i)).collect()
    };
    let (h, w) = match models[0].model.input_shape() {
        [_, h, w, _] => (*h, *w),
        s => return Err(CliError::Load(xplain_core::Error::Shape(format!("grid needs image models, got input {s:?}")))),
    };
    let cells: Vec<(usize, usize)> = (0..rows.len()).flat_map(|r| (0..a.methods.len()).map(move |c| (r, c))).collect();
    let rendered: Vec<CliResult<RGBImage>> = cells
        .par_iter()
        .map(|&(r, c)| {
            let (m, input) = rows[r];
            let spec = &a.methods[c];
            let (x, s) = analyze_one(m, input, spec, &a.common)?;
            workflows::render(a.viz, spec.id, &s.values, &x, m.model.input_range(), a.top_k).at_runtime()
        })
        .collect();
    let mut warnings = Vec::new();
    let images: Vec<RGBImage> = rendered
        .into_iter()
        .zip(&cells)
        .map(|(r, &(row, col))| match r {
            Ok(img) if (img.height(), img.width()) == (h, w) => img,
            Ok(_) => {
                warnings.push(format!("cell ({row}, {col}): size differs from the grid cell size"));
                workflows::failed_cell(h, w)
            }
            Err(e) => {
                warnings.push(format!("cell ({row}, {col}) {}: {e}", a.methods[col]));
                workflows::failed_cell(h, w)
            }
        })
        .collect();
    let img = RGBImage::tile(&images, a.methods.len(), a.pad).at_runtime()?;
    files::save_png(&a.out, &img)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    Ok(format!(
        "{} x {} grid -> {} ({} warnings)",
        rows.len(),
        a.methods.len(),
        a.out.display(),
        warnings.len()
    ))
}

fn sweep(a: SweepArgs) -> CliResult<String> {
    let m = files::load_model(&a.model.model, a.model.weights.as_deref())?;
    let x = files::load_input(&a.input, &m.model)?;
    let range = m.model.input_range();
    let mut tiles = Vec::new();
    let mut written = 0;
    match a.kind {
        SweepKind::IgReference => {
            let steps = a.samples.unwrap_or(xplain_core::sample::DEFAULT_IG_STEPS);
            for (i, (_, s)) in workflows::sweep_ig_reference(&m.model, &x, a.neuron, steps).at_runtime()?.into_iter().enumerate() {
                files::save_saliency(&a.out.join(format!("ig_reference_{i}.xten")), &s, &m.hash)?;
                tiles.push(workflows::render(VizMode::Heatmap, MethodId::IntegratedGradients, &s.values, &x, range, 0).at_runtime()?);
                written += 1;
            }
        }
        SweepKind::SgScale => {
            let n = a.samples.unwrap_or(xplain_core::sample::DEFAULT_SMOOTHGRAD_SAMPLES);
            for (i, (post, _, s)) in workflows::sweep_sg_scale(&m.model, &x, a.neuron, n, a.seed).at_runtime()?.into_iter().enumerate() {
                let name = format!("sg_scale_{}_{}.xten", post.name(), i % workflows::SWEEP_POINTS);
                files::save_saliency(&a.out.join(name), &s, &m.hash)?;
                tiles.push(workflows::render(VizMode::Graymap, MethodId::SmoothGrad, &s.values, &x, range, 0).at_runtime()?);
                written += 1;
            }
        }
    }
    let png = a.out.join("sweep.png");
    files::save_png(&png, &RGBImage::tile(&tiles, workflows::SWEEP_POINTS, 2).at_runtime()?)?;
    Ok(format!("{written} tensors and {} -> {}", png.display(), a.out.display()))
}

fn saliency_from(
    saliency: &Option<PathBuf>,
    model: &Option<PathBuf>,
    weights: &Option<PathBuf>,
    input: &Option<PathBuf>,
    method: &Option<MethodSpec>,
    params: &[(String, String)],
    common: &CommonArgs,
) -> CliResult<Tensor> {
    if let Some(p) = saliency {
        return files::load_tensor(p);
    }
    match (model, input, method) {
        (Some(mp), Some(ip), Some(spec)) => {
            let m = files::load_model(mp, weights.as_deref())?;
            let spec = spec.clone().with_params(params)?;
            Ok(analyze_one(&m, ip, &spec, common)?.1.values)
        }
        _ => Err(CliError::Usage("give --saliency, or --model, --input and --method".into())),
    }
}

fn bbox(a: BboxArgs) -> CliResult<String> {
    let e = saliency_from(&a.saliency, &a.model, &a.weights, &a.input, &a.method, &a.params, &a.common)?;
    let r = workflows::bbox_ratio(&e, a.bbox).at_runtime()?;
    if r.ratio.is_nan() {
        eprintln!("warning: saliency is zero everywhere; ratio is undefined");
    }
    if let Some(out) = &a.out {
        let b = a.bbox;
        files::write_csv(
            out,
            &["x", "y", "w", "h", "inside", "outside", "ratio"],
            &[vec![
                b.x.to_string(),
                b.y.to_string(),
                b.w.to_string(),
                b.h.to_string(),
                format_f64(r.inside),
                format_f64(r.outside),
                format_f64(r.ratio),
            ]],
        )?;
    }
    Ok(format_f64(r.ratio))
}

fn perturb(a: PerturbArgs) -> CliResult<String> {
    let m = files::load_model(&a.model.model, a.model.weights.as_deref())?;
    let x = files::load_input(&a.input, &m.model)?;
    let e = match (&a.saliency, &a.method) {
        (Some(p), _) => files::load_input(p, &m.model)?,
        (None, Some(spec)) => {
            let spec = spec.clone().with_params(&a.params)?;
            analyze_one(&m, &a.input, &spec, &a.common)?.1.values
        }
        (None, None) => return Err(CliError::Usage("give --saliency or --method".into())),
    };
    let model = m.model.strip_softmax().at_compile()?;
    let replace = a.replace.unwrap_or(model.input_range().0);
    let curve = workflows::perturbation_curve(&model, &x, &e, a.patch, replace, a.common.neuron).at_runtime()?;
    let rows: Vec<Vec<String>> = curve
        .iter()
        .map(|p| vec![p.step.to_string(), format_f64(p.fraction_perturbed), format_f64(p.output_value as f64)])
        .collect();
    files::write_csv(&a.out, &["step", "fraction_perturbed", "output_value"], &rows)?;
    Ok(format!("{} steps -> {}", curve.len(), a.out.display()))
}

/// Propagation methods that need no patterns.
pub const BENCH_DEFAULT_METHODS: [MethodId; 7] = [
    MethodId::Gradient,
    MethodId::GuidedBackprop,
    MethodId::DeconvNet,
    MethodId::DeepTaylor,
    MethodId::LrpEpsilon,
    MethodId::LrpAlphaBeta,
    MethodId::LrpComposite,
];

fn bench(a: BenchArgs) -> CliResult<String> {
    let m = files::load_model(&a.model.model, a.model.weights.as_deref())?;
    let specs = if a.methods.is_empty() {
        BENCH_DEFAULT_METHODS.iter().map(|&id| MethodSpec::new(id)).collect()
    } else {
        a.methods.clone()
    };
    if a.n == 0 || a.repeats == 0 {
        return Err(CliError::Usage("--n and --repeats must be >= 1".into()));
    }
    let inputs = workflows::seeded_inputs(&m.model, a.n, a.common.seed);
    let mut rows = Vec::new();
    let mut report = Vec::new();
    for spec in &specs {
        let mut spec = spec.clone();
        if spec.id.keys().contains(&"seed") && spec.get("seed").is_none() {
            spec.set("seed", a.common.seed.to_string());
        }
        let method = spec.to_method(patterns_for(spec.id, &m.model, &a.common)?)?;
        let model = m.model.strip_softmax().at_compile()?;
        let result = workflows::bench_method(&model, &method, a.common.neuron, &inputs, a.repeats).at_runtime()?;
        let col = |f: fn(&workflows::BenchRow) -> f64| result.iter().map(f).collect::<Vec<_>>();
        let (setup, run, naive) = (col(|r| r.setup_s), col(|r| r.run_s), col(|r| r.naive_s));
        for r in &result {
            rows.push(vec![
                r.method.clone(),
                r.repeat.to_string(),
                r.n.to_string(),
                format_f64(r.setup_s),
                format_f64(r.run_s),
                format_f64(r.naive_s),
            ]);
        }
        let (ms, ss) = workflows::mean_std(&setup);
        let (mr, sr) = workflows::mean_std(&run);
        let (mn, sn) = workflows::mean_std(&naive);
        rows.push(vec![
            spec.id.name().to_string(),
            "mean".into(),
            a.n.to_string(),
            format_f64(ms),
            format_f64(mr),
            format_f64(mn),
        ]);
        report.push(format!(
            "{:<20} setup {ms:.6}s ±{ss:.6}  run {mr:.6}s ±{sr:.6}  naive {mn:.6}s ±{sn:.6}  speedup {:.1}x{}",
            spec.id.name(),
            mn / mr,
            match result[0].domain_errors {
                0 => String::new(),
                k => format!("  ({k} inputs outside the method's domain)"),
            }
        ));
    }
    files::write_csv(&a.out, &["method", "repeat", "n", "setup_s", "run_s", "naive_s"], &rows)?;
    report.push(format!("-> {}", a.out.display()));
    Ok(report.join("\n"))
}

fn make_model(a: MakeModelArgs) -> CliResult<String> {
    let model = make_reference_model(a.kind, a.seed);
    let name = match a.kind {
        ReferenceKind::Linear => "linear",
        ReferenceKind::Mlp => "mlp",
        ReferenceKind::Cnn => "cnn",
    };
    let manifest = files::save_model(&model, &a.out, name)?;
    for (i, x) in workflows::seeded_inputs(&model, a.inputs, a.seed).iter().enumerate() {
        files::save_tensor(&a.out.join(format!("{name}_input_{i}.xten")), x)?;
    }
    Ok(format!("{} (+ {} inputs)", manifest.display(), a.inputs))
}
