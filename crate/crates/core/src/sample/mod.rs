//! Prediction- and gradient-based explanations: Input x Gradient,
//! Integrated Gradients, SmoothGrad, occlusion and LIME.
//!
//! All of them freeze the explained neuron from the unperturbed prediction.

pub mod lime;
pub mod ridge;
pub mod segment;

use std::str::FromStr;

use crate::autodiff::{self, NeuronSelector};
use crate::error::{shape_err, Error, Result};
use crate::model::Model;
use crate::rng::XorShift64Star;
use crate::saliency::Saliency;
use crate::tensor::Tensor;

pub use lime::{lime, LimeConfig};
pub use ridge::ridge_fit;
pub use segment::{segment, SegmentConfig, Segmentation};

pub const DEFAULT_IG_STEPS: usize = 32;
pub const DEFAULT_SMOOTHGRAD_SAMPLES: usize = 32;
pub const DEFAULT_OCCLUSION_PATCH: usize = 8;

pub(crate) fn frozen_index(model: &Model, x: &Tensor, sel: NeuronSelector) -> Result<(usize, f32)> {
    let out = model.predict(x)?;
    let i = sel.resolve(&out)?.index;
    Ok((i, out.data()[i]))
}

fn check_input(model: &Model, x: &Tensor) -> Result<()> {
    if x.shape() != model.input_shape() {
        return shape_err(format!(
            "input shape {:?} does not match model input {:?}",
            x.shape(),
            model.input_shape()
        ));
    }
    Ok(())
}

/// `x * grad f(x)`.
pub fn input_t_gradient(model: &Model, x: &Tensor, sel: NeuronSelector) -> Result<Saliency> {
    check_input(model, x)?;
    let (index, _) = frozen_index(model, x, sel)?;
    let g = autodiff::gradient_at(model, x, index)?;
    Ok(Saliency::new(x.mul(&g)?, "input_t_gradient", index))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IgConfig {
    pub steps: usize,
    /// Baseline input; `None` means a constant tensor at the low end of the
    /// model's input range.
    pub reference: Option<Tensor>,
}

impl Default for IgConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_IG_STEPS,
            reference: None,
        }
    }
}

/// Left Riemann sum over `steps` points of the straight path from the
/// reference to `x`.
pub fn integrated_gradients(
    model: &Model,
    x: &Tensor,
    cfg: &IgConfig,
    sel: NeuronSelector,
) -> Result<Saliency> {
    check_input(model, x)?;
    if cfg.steps == 0 {
        return Err(Error::Config("integrated gradients needs steps >= 1".into()));
    }
    let reference = match &cfg.reference {
        Some(r) if r.shape() == x.shape() => r.clone(),
        Some(r) => {
            return shape_err(format!(
                "reference shape {:?} does not match input {:?}",
                r.shape(),
                x.shape()
            ))
        }
        None => Tensor::full(x.shape(), model.input_range().0),
    };
    let (index, _) = frozen_index(model, x, sel)?;
    let delta = x.sub(&reference)?;
    let mut acc = vec![0f64; x.len()];
    for step in 0..cfg.steps {
        let alpha = step as f32 / cfg.steps as f32;
        let point = reference.zip_map(&delta, |r, d| r + d * alpha)?;
        let g = autodiff::gradient_at(model, &point, index)?;
        for (a, &v) in acc.iter_mut().zip(g.data()) {
            *a += v as f64;
        }
    }
    let mean = Tensor::new(
        x.shape(),
        acc.iter().map(|&a| (a / cfg.steps as f64) as f32).collect(),
    )?;
    Ok(Saliency::new(delta.mul(&mean)?, "integrated_gradients", index)
        .with_param("steps", cfg.steps))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Postprocess {
    #[default]
    None,
    Abs,
    Square,
}

impl FromStr for Postprocess {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "abs" => Ok(Self::Abs),
            "square" => Ok(Self::Square),
            _ => Err(format!("postprocess must be none|abs|square, got `{s}`")),
        }
    }
}

impl Postprocess {
    pub fn name(self) -> &'static str {
        match self {
            Postprocess::None => "none",
            Postprocess::Abs => "abs",
            Postprocess::Square => "square",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothGradConfig {
    pub n: usize,
    /// Standard deviation in input units; `None` means a fifth of the
    /// model's input range.
    pub noise_scale: Option<f32>,
    pub postprocess: Postprocess,
    pub seed: u64,
}

impl Default for SmoothGradConfig {
    fn default() -> Self {
        Self {
            n: DEFAULT_SMOOTHGRAD_SAMPLES,
            noise_scale: None,
            postprocess: Postprocess::None,
            seed: 0,
        }
    }
}

/// Mean gradient over Gaussian-perturbed copies of `x`, postprocessed after
/// averaging. Noise is drawn sample by sample in element order.
pub fn smoothgrad(
    model: &Model,
    x: &Tensor,
    cfg: &SmoothGradConfig,
    sel: NeuronSelector,
) -> Result<Saliency> {
    check_input(model, x)?;
    let (lo, hi) = model.input_range();
    let scale = cfg.noise_scale.unwrap_or((hi - lo) / 5.0);
    if cfg.n == 0 || !(scale >= 0.0) {
        return Err(Error::Config(format!(
            "smoothgrad needs n >= 1 and noise_scale >= 0 (got {}, {})",
            cfg.n, scale
        )));
    }
    let (index, _) = frozen_index(model, x, sel)?;
    let mut rng = XorShift64Star::new(cfg.seed);
    let mut acc = vec![0f64; x.len()];
    for _ in 0..cfg.n {
        let mut noisy = x.clone();
        for v in noisy.data_mut() {
            *v += (rng.next_normal() * scale as f64) as f32;
        }
        let g = autodiff::gradient_at(model, &noisy, index)?;
        for (a, &v) in acc.iter_mut().zip(g.data()) {
            *a += v as f64;
        }
    }
    let post = |m: f64| match cfg.postprocess {
        Postprocess::None => m,
        Postprocess::Abs => m.abs(),
        Postprocess::Square => m * m,
    };
    let values = Tensor::new(
        x.shape(),
        acc.iter().map(|&a| post(a / cfg.n as f64) as f32).collect(),
    )?;
    Ok(Saliency::new(values, "smoothgrad", index)
        .with_param("n", cfg.n)
        .with_param("noise_scale", scale as f64)
        .with_param("postprocess", cfg.postprocess.name())
        .with_param("seed", cfg.seed))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OcclusionConfig {
    pub psize: usize,
    pub replace_value: f32,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        Self {
            psize: DEFAULT_OCCLUSION_PATCH,
            replace_value: 0.0,
        }
    }
}

/// `(height, width, channels)` of a batch-of-one NHWC image.
pub fn image_dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [1, h, w, c] => Ok((*h, *w, *c)),
        s => shape_err(format!("expected a (1, H, W, C) image, got {s:?}")),
    }
}

/// Sets every channel of the pixels in `[y0, y1) x [x0, x1)` to `value`.
pub fn fill_block(t: &mut Tensor, rect: (usize, usize, usize, usize), value: f32) {
    let (_, w, c) = image_dims(t).expect("caller checked image shape");
    let (y0, y1, x0, x1) = rect;
    let d = t.data_mut();
    for yy in y0..y1 {
        d[(yy * w + x0) * c..(yy * w + x1) * c].fill(value);
    }
}

/// Non-overlapping `psize` blocks in row-major order, edge blocks truncated:
/// `(y0, y1, x0, x1)`.
pub fn patch_grid(h: usize, w: usize, psize: usize) -> Vec<(usize, usize, usize, usize)> {
    let mut out = Vec::new();
    for y0 in (0..h).step_by(psize.max(1)) {
        for x0 in (0..w).step_by(psize.max(1)) {
            out.push((y0, (y0 + psize).min(h), x0, (x0 + psize).min(w)));
        }
    }
    out
}

/// Every pixel of a patch receives `f(x) - f(x with the patch replaced)`.
pub fn occlusion(
    model: &Model,
    x: &Tensor,
    cfg: &OcclusionConfig,
    sel: NeuronSelector,
) -> Result<Saliency> {
    check_input(model, x)?;
    let (h, w, _) = image_dims(x)?;
    if cfg.psize == 0 || (cfg.psize > h && cfg.psize > w) {
        return Err(Error::Config(format!(
            "occlusion patch size {} does not fit a {h}x{w} image",
            cfg.psize
        )));
    }
    let (index, base) = frozen_index(model, x, sel)?;
    let mut values = Tensor::zeros(x.shape());
    for rect in patch_grid(h, w, cfg.psize) {
        let mut occluded = x.clone();
        fill_block(&mut occluded, rect, cfg.replace_value);
        let diff = base - model.predict(&occluded)?.data()[index];
        fill_block(&mut values, rect, diff);
    }
    Ok(Saliency::new(values, "occlusion", index)
        .with_param("psize", cfg.psize)
        .with_param("replace_value", cfg.replace_value as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_reference_model, Activation, LayerKind, LayerNode, ReferenceKind};

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    pub(crate) fn seeded(shape: &[usize], seed: u64) -> Tensor {
        let mut r = XorShift64Star::new(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.uniform(-1., 1.) as f32).collect()).unwrap()
    }

    fn dense_model(shape: &[usize], w: &[f32], bias: f32, act: Activation) -> Model {
        let n = w.len();
        let mut nodes = vec![LayerNode::new("x", LayerKind::Input, &[])];
        let mut src = "x";
        if shape.len() != 2 {
            nodes.push(LayerNode::new("flat", LayerKind::Flatten, &["x"]));
            src = "flat";
        }
        nodes.push(
            LayerNode::new(
                "d",
                LayerKind::Dense {
                    kernel: t(&[n, 1], w),
                    bias: Some(t(&[1], &[bias])),
                },
                &[src],
            )
            .with_activation(act),
        );
        Model::new(nodes, shape, (-1., 1.), "d").unwrap()
    }

    #[test]
    fn input_t_gradient_linear() {
        let m = dense_model(&[1, 2], &[3., -1.], 0.5, Activation::None);
        let s = input_t_gradient(&m, &t(&[1, 2], &[1., 2.]), NeuronSelector::MaxActivation).unwrap();
        assert_eq!(s.values.data(), &[3., -2.]);
        let z = input_t_gradient(&m, &t(&[1, 2], &[0., 0.]), NeuronSelector::MaxActivation).unwrap();
        assert_eq!(z.values.data(), &[0., 0.]);
    }

    #[test]
    fn ig_linear_exact_for_any_steps() {
        let m = dense_model(&[1, 2], &[3., -1.], 0.5, Activation::None);
        let x = t(&[1, 2], &[1., 2.]);
        for steps in [1, 2, 7, 32, 100] {
            let cfg = IgConfig {
                steps,
                reference: Some(Tensor::zeros(&[1, 2])),
            };
            let s = integrated_gradients(&m, &x, &cfg, NeuronSelector::MaxActivation).unwrap();
            assert_eq!(s.values.data(), &[3., -2.]);
        }
        let same = IgConfig {
            steps: 32,
            reference: Some(x.clone()),
        };
        let s = integrated_gradients(&m, &x, &same, NeuronSelector::MaxActivation).unwrap();
        assert_eq!(s.values.data(), &[0., 0.]);
    }

    #[test]
    fn ig_left_sum_on_shifted_relu() {
        let m = dense_model(&[1, 1], &[1.], -0.5, Activation::Relu);
        let cfg = IgConfig {
            steps: 32,
            reference: Some(Tensor::zeros(&[1, 1])),
        };
        let s = integrated_gradients(&m, &t(&[1, 1], &[1.]), &cfg, NeuronSelector::Index(0)).unwrap();
        // hand loop: alpha = k/32 contributes iff alpha > 0.5
        let hand = (0..32).filter(|k| *k as f64 / 32.0 > 0.5).count() as f64 / 32.0;
        assert_eq!(hand, 15.0 / 32.0);
        assert!((s.values.data()[0] as f64 - hand).abs() < 1e-7);
    }

    #[test]
    fn ig_default_reference_is_range_low() {
        let m = dense_model(&[1, 2], &[3., -1.], 0., Activation::None);
        let s = integrated_gradients(&m, &t(&[1, 2], &[1., 2.]), &IgConfig::default(), NeuronSelector::Index(0))
            .unwrap();
        assert_eq!(s.values.data(), &[6., -3.]);
    }

    #[test]
    fn ig_completeness_on_linear_reference() {
        let m = make_reference_model(ReferenceKind::Linear, 2);
        let x = seeded(m.input_shape(), 3);
        let s = integrated_gradients(&m, &x, &IgConfig::default(), NeuronSelector::MaxActivation).unwrap();
        let f = |v: &Tensor| m.predict(v).unwrap().data()[s.neuron_index] as f64;
        let expected = f(&x) - f(&Tensor::full(x.shape(), -1.0));
        assert!((s.values.sum() as f64 - expected).abs() < 1e-4 * (1.0 + expected.abs()));
    }

    #[test]
    fn smoothgrad_degenerate_noise() {
        let m = dense_model(&[1, 2], &[3., -1.], 0., Activation::None);
        let x = t(&[1, 2], &[0.2, 0.1]);
        let mut cfg = SmoothGradConfig {
            n: 5,
            noise_scale: Some(0.0),
            postprocess: Postprocess::Abs,
            seed: 1,
        };
        assert_eq!(smoothgrad(&m, &x, &cfg, NeuronSelector::Index(0)).unwrap().values.data(), &[3., 1.]);
        cfg.postprocess = Postprocess::Square;
        assert_eq!(smoothgrad(&m, &x, &cfg, NeuronSelector::Index(0)).unwrap().values.data(), &[9., 1.]);
    }

    #[test]
    fn smoothgrad_abs_after_mean() {
        let m = make_reference_model(ReferenceKind::Mlp, 4);
        let x = seeded(m.input_shape(), 8);
        let cfg = SmoothGradConfig {
            n: 6,
            noise_scale: Some(0.5),
            postprocess: Postprocess::Abs,
            seed: 11,
        };
        let s = smoothgrad(&m, &x, &cfg, NeuronSelector::MaxActivation).unwrap();
        // scalar oracle: same noise stream, explicit per-element loop
        let mut rng = XorShift64Star::new(11);
        let mut mean = vec![0f64; x.len()];
        let mut mean_abs = vec![0f64; x.len()];
        for _ in 0..6 {
            let mut noisy = x.clone();
            for v in noisy.data_mut() {
                *v += (rng.next_normal() * 0.5) as f32;
            }
            let g = autodiff::gradient_at(&m, &noisy, s.neuron_index).unwrap();
            for i in 0..x.len() {
                mean[i] += g.data()[i] as f64 / 6.0;
                mean_abs[i] += (g.data()[i] as f64).abs() / 6.0;
            }
        }
        let mut differs = false;
        for i in 0..x.len() {
            assert!(s.values.data()[i] >= 0.0);
            assert!((s.values.data()[i] as f64 - mean[i].abs()).abs() < 1e-6);
            differs |= (mean[i].abs() - mean_abs[i]).abs() > 1e-6;
        }
        assert!(differs, "abs of mean must differ from mean of abs somewhere");
    }

    #[test]
    fn smoothgrad_is_seeded() {
        let m = make_reference_model(ReferenceKind::Mlp, 4);
        let x = seeded(m.input_shape(), 8);
        let cfg = SmoothGradConfig::default();
        let a = smoothgrad(&m, &x, &cfg, NeuronSelector::MaxActivation).unwrap();
        let b = smoothgrad(&m, &x, &cfg, NeuronSelector::MaxActivation).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn occlusion_closed_form() {
        let m = dense_model(&[1, 2, 2, 1], &[1., 2., 3., 4.], 0.3, Activation::None);
        let cfg = OcclusionConfig {
            psize: 1,
            replace_value: 0.0,
        };
        let s = occlusion(&m, &Tensor::ones(&[1, 2, 2, 1]), &cfg, NeuronSelector::Index(0)).unwrap();
        assert_eq!(s.values.data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn occlusion_single_patch_and_errors() {
        let m = dense_model(&[1, 2, 2, 1], &[1., 2., 3., 4.], 0.0, Activation::None);
        let x = Tensor::ones(&[1, 2, 2, 1]);
        let cfg = OcclusionConfig {
            psize: 2,
            replace_value: 0.0,
        };
        let s = occlusion(&m, &x, &cfg, NeuronSelector::Index(0)).unwrap();
        assert_eq!(s.values.data(), &[10.; 4]);
        let big = OcclusionConfig {
            psize: 3,
            replace_value: 0.0,
        };
        assert!(matches!(occlusion(&m, &x, &big, NeuronSelector::Index(0)), Err(Error::Config(_))));
    }

    #[test]
    fn occlusion_constant_model_is_zero() {
        let m = dense_model(&[1, 4, 4, 1], &[0.; 16], 2.0, Activation::None);
        let s = occlusion(&m, &seeded(&[1, 4, 4, 1], 1), &OcclusionConfig { psize: 3, replace_value: 0.0 }, NeuronSelector::Index(0))
            .unwrap();
        assert!(s.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_grid_truncates() {
        let g = patch_grid(5, 3, 2);
        assert_eq!(g.len(), 6);
        assert_eq!(g[5], (4, 5, 2, 3));
    }
}
