//! Application workflows: rendering, bounding-box ratios, perturbation
//! curves, parameter sweeps and the setup-versus-run benchmark.

use std::time::Instant;

use rayon::prelude::*;
use xplain_core::analyzer::{Analyzer, Method, MethodId};
use xplain_core::autodiff::NeuronSelector;
use xplain_core::backend::neuron_select;
use xplain_core::model::Model;
use xplain_core::rng::XorShift64Star;
use xplain_core::sample::segment::{segment, SegmentConfig};
use xplain_core::sample::{fill_block, image_dims, patch_grid, IgConfig, Postprocess, SmoothGradConfig};
use xplain_core::viz::{self, RGBImage};
use xplain_core::{Error, Result, Saliency, Tensor};

/// Number of cells in either sweep row.
pub const SWEEP_POINTS: usize = 5;
pub const DEFAULT_BENCH_INPUTS: usize = 512;
pub const DEFAULT_BENCH_REPEATS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum VizMode {
    /// Heatmap, or projection for PatternNet.
    Auto,
    Heatmap,
    Graymap,
    Scale,
    Mask,
    Blend,
    Project,
}

impl VizMode {
    pub fn resolve(self, method: MethodId) -> VizMode {
        match (self, method) {
            (VizMode::Auto, MethodId::PatternNet) => VizMode::Project,
            (VizMode::Auto, _) => VizMode::Heatmap,
            (m, _) => m,
        }
    }
}

/// Renders a saliency for input `x` of a model with input range `range`.
pub fn render(mode: VizMode, method: MethodId, e: &Tensor, x: &Tensor, range: (f32, f32), top_k: usize) -> Result<RGBImage> {
    let raw = || RGBImage::from_input(x, range);
    match mode.resolve(method) {
        VizMode::Heatmap | VizMode::Auto => viz::to_heatmap(e),
        VizMode::Graymap => viz::to_graymap(e),
        VizMode::Scale => viz::scale_input(e, &raw()?),
        VizMode::Mask => {
            let seg = segment(x, range, &SegmentConfig::default())?;
            viz::mask_input(e, &seg, &raw()?, top_k)
        }
        VizMode::Blend => viz::blend_overlay(e, &raw()?),
        VizMode::Project => viz::project(e),
    }
}

/// A grey tile crossed in red, marking a failed grid cell.
pub fn failed_cell(h: usize, w: usize) -> RGBImage {
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let on_diag = y * w.max(1) / h.max(1) == x || y * w.max(1) / h.max(1) == w - 1 - x;
            data.extend(if on_diag { [1.0, 0.0, 0.0] } else { [0.5; 3] });
        }
    }
    RGBImage::new(h, w, data).expect("valid colours")
}

/// Pixel rectangle `x, y, w, h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl std::str::FromStr for BBox {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let v: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse().map_err(|_| format!("bbox must be X,Y,W,H, got `{s}`")))
            .collect::<std::result::Result<_, _>>()?;
        match v[..] {
            [x, y, w, h] => Ok(BBox { x, y, w, h }),
            _ => Err(format!("bbox must be X,Y,W,H, got `{s}`")),
        }
    }
}

/// Inside and outside sums of `|e|` and their ratio; `x/0` gives `inf`,
/// `0/0` gives `nan`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBoxRatio {
    pub inside: f64,
    pub outside: f64,
    pub ratio: f64,
}

pub fn bbox_ratio(e: &Tensor, b: BBox) -> Result<BBoxRatio> {
    let (h, w, c) = image_dims(e)?;
    if b.w == 0 || b.h == 0 {
        return Err(Error::Config("bounding box is empty".into()));
    }
    if b.x + b.w > w || b.y + b.h > h {
        return Err(Error::Config(format!("bounding box exceeds the {h}x{w} image")));
    }
    if b.w == w && b.h == h {
        return Err(Error::Config("bounding box covers the whole image".into()));
    }
    let (mut inside, mut outside) = (0f64, 0f64);
    for (p, px) in e.data().chunks(c).enumerate() {
        let (y, x) = (p / w, p % w);
        let s: f64 = px.iter().map(|v| v.abs() as f64).sum();
        if (b.y..b.y + b.h).contains(&y) && (b.x..b.x + b.w).contains(&x) {
            inside += s;
        } else {
            outside += s;
        }
    }
    Ok(BBoxRatio {
        inside,
        outside,
        ratio: inside / outside,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub fraction_perturbed: f64,
    pub output_value: f32,
}

/// Replaces `psize` blocks cumulatively in order of descending attribution
/// sum (ties by block order) and records the frozen neuron's output.
pub fn perturbation_curve(
    model: &Model,
    x: &Tensor,
    e: &Tensor,
    psize: usize,
    replace_value: f32,
    sel: NeuronSelector,
) -> Result<Vec<CurvePoint>> {
    if e.shape() != x.shape() {
        return Err(Error::Shape(format!(
            "saliency {:?} does not match input {:?}",
            e.shape(),
            x.shape()
        )));
    }
    let (h, w, c) = image_dims(x)?;
    if psize == 0 || (psize > h && psize > w) {
        return Err(Error::Config(format!("patch size {psize} does not fit a {h}x{w} image")));
    }
    let base = model.predict(x)?;
    let index = neuron_select(&base, sel)?;
    let blocks = patch_grid(h, w, psize);
    let score = |&(y0, y1, x0, x1): &(usize, usize, usize, usize)| -> f64 {
        let mut s = 0.0;
        for y in y0..y1 {
            s += e.data()[(y * w + x0) * c..(y * w + x1) * c].iter().map(|&v| v as f64).sum::<f64>();
        }
        s
    };
    let mut order: Vec<(usize, f64)> = blocks.iter().map(score).enumerate().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let total = (h * w) as f64;
    let mut curve = vec![CurvePoint {
        step: 0,
        fraction_perturbed: 0.0,
        output_value: base.data()[index],
    }];
    let mut current = x.clone();
    let mut replaced = 0usize;
    for (step, &(b, _)) in order.iter().enumerate() {
        let r = blocks[b];
        fill_block(&mut current, r, replace_value);
        replaced += (r.1 - r.0) * (r.3 - r.2);
        curve.push(CurvePoint {
            step: step + 1,
            fraction_perturbed: replaced as f64 / total,
            output_value: model.predict(&current)?.data()[index],
        });
    }
    Ok(curve)
}

/// Integrated Gradients with constant references evenly spaced across the
/// input range.
pub fn sweep_ig_reference(model: &Model, x: &Tensor, sel: NeuronSelector, steps: usize) -> Result<Vec<(f32, Saliency)>> {
    let model = model.strip_softmax()?;
    let (lo, hi) = model.input_range();
    (0..SWEEP_POINTS)
        .map(|i| {
            let r = lo + (hi - lo) * i as f32 / (SWEEP_POINTS - 1) as f32;
            let cfg = IgConfig {
                steps,
                reference: Some(Tensor::full(x.shape(), r)),
            };
            let a = Analyzer::build(&model, Method::IntegratedGradients(cfg), sel)?;
            Ok((r, a.analyze(x)?.with_param("reference", r as f64)))
        })
        .collect()
}

/// SmoothGrad at noise scales `(hi - lo) * s / 5` for `s = 0..5`, one row
/// with absolute and one with squared postprocessing.
pub fn sweep_sg_scale(
    model: &Model,
    x: &Tensor,
    sel: NeuronSelector,
    n: usize,
    seed: u64,
) -> Result<Vec<(Postprocess, f32, Saliency)>> {
    let model = model.strip_softmax()?;
    let (lo, hi) = model.input_range();
    let mut out = Vec::new();
    for post in [Postprocess::Abs, Postprocess::Square] {
        for s in 0..SWEEP_POINTS {
            let scale = (hi - lo) * s as f32 / 5.0;
            let cfg = SmoothGradConfig {
                n,
                noise_scale: Some(scale),
                postprocess: post,
                seed,
            };
            let a = Analyzer::build(&model, Method::SmoothGrad(cfg), sel)?;
            out.push((post, scale, a.analyze(x)?));
        }
    }
    Ok(out)
}

/// Seeded inputs drawn uniformly from the model's input range.
pub fn seeded_inputs(model: &Model, n: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = XorShift64Star::new(seed);
    let (lo, hi) = model.input_range();
    let len = model.input_shape().iter().product();
    (0..n)
        .map(|_| {
            let data = (0..len).map(|_| rng.uniform(lo as f64, hi as f64) as f32).collect();
            Tensor::new(model.input_shape(), data).expect("shape/data agree")
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: String,
    pub repeat: usize,
    pub n: usize,
    pub setup_s: f64,
    pub run_s: f64,
    pub naive_s: f64,
    /// Inputs whose selected output was outside the method's domain.
    pub domain_errors: usize,
}

/// Runs one input, counting domain errors instead of failing.
fn analyze_counting(a: &Analyzer, x: &Tensor) -> Result<usize> {
    match a.analyze(x) {
        Ok(_) => Ok(0),
        Err(Error::Domain(_)) => Ok(1),
        Err(e) => Err(e),
    }
}

/// Per repeat: build time, time to analyze every input with that analyzer,
/// and time to rebuild and analyze per input. The three are interleaved
/// within each repeat so drift affects them alike.
pub fn bench_method(
    model: &Model,
    method: &Method,
    sel: NeuronSelector,
    inputs: &[Tensor],
    repeats: usize,
) -> Result<Vec<BenchRow>> {
    if inputs.is_empty() || repeats == 0 {
        return Err(Error::Config("benchmark needs n >= 1 and repeats >= 1".into()));
    }
    let mut rows = Vec::with_capacity(repeats);
    for repeat in 0..repeats {
        let t = Instant::now();
        let a = Analyzer::build(model, method.clone(), sel)?;
        let setup_s = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let domain_errors = inputs
            .par_iter()
            .map(|x| analyze_counting(&a, x))
            .try_reduce(|| 0, |p, q| Ok(p + q))?;
        let run_s = t.elapsed().as_secs_f64();

        let t = Instant::now();
        inputs
            .par_iter()
            .map(|x| analyze_counting(&Analyzer::build(model, method.clone(), sel)?, x))
            .try_reduce(|| 0, |p, q| Ok(p + q))?;
        let naive_s = t.elapsed().as_secs_f64();

        rows.push(BenchRow {
            method: method.name().to_string(),
            repeat,
            n: inputs.len(),
            setup_s,
            run_s,
            naive_s,
            domain_errors,
        });
    }
    Ok(rows)
}

/// Mean and sample standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}
