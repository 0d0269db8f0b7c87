//! Local surrogate explanations over image segments.
//!
//! Segments are switched on and off at random, the model is queried on
//! every perturbed image, and a weighted ridge regression from on/off
//! indicators to the selected output gives one coefficient per segment.

use crate::autodiff::NeuronSelector;
use crate::error::{shape_err, Error, Result};
use crate::model::Model;
use crate::rng::XorShift64Star;
use crate::saliency::Saliency;
use crate::tensor::Tensor;

use super::ridge::ridge_fit;
use super::segment::Segmentation;
use super::{frozen_index, image_dims};

pub const DEFAULT_NR_SAMPLES: usize = 1000;
pub const DEFAULT_KERNEL_WIDTH: f64 = 0.25;
pub const DEFAULT_RIDGE_ALPHA: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LimeConfig {
    pub nr_samples: usize,
    pub kernel_width: f64,
    pub ridge_alpha: f64,
    /// Value written into switched-off segments, in model input space.
    pub replacement: f32,
    pub seed: u64,
}

impl Default for LimeConfig {
    fn default() -> Self {
        Self {
            nr_samples: DEFAULT_NR_SAMPLES,
            kernel_width: DEFAULT_KERNEL_WIDTH,
            ridge_alpha: DEFAULT_RIDGE_ALPHA,
            replacement: 0.0,
            seed: 0,
        }
    }
}

/// Fitted surrogate.
#[derive(Debug, Clone, PartialEq)]
pub struct LimeFit {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
}

/// Bernoulli(0.5) on/off matrix; row 0 is all on. Drawn row by row.
pub fn sample_features(nr_samples: usize, nr_segments: usize, rng: &mut XorShift64Star) -> Vec<Vec<f64>> {
    (0..nr_samples)
        .map(|r| {
            (0..nr_segments)
                .map(|_| {
                    let bit = rng.next_bit();
                    if r == 0 || bit {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Cosine distance to the all-ones row; an all-zero row is at distance 1.
pub fn cosine_distance_to_ones(row: &[f64]) -> f64 {
    let norm2 = row.iter().map(|v| v * v).sum::<f64>();
    if norm2 == 0.0 || row.is_empty() {
        return 1.0;
    }
    let dot: f64 = row.iter().sum();
    (1.0 - dot / (norm2 * row.len() as f64).sqrt()).max(0.0)
}

pub fn kernel_weight(distance: f64, kernel_width: f64) -> f64 {
    (-(distance * distance) / (kernel_width * kernel_width)).exp().sqrt()
}

/// Model output at `index` for each feature row.
pub fn query_model(
    model: &Model,
    x: &Tensor,
    seg: &Segmentation,
    features: &[Vec<f64>],
    replacement: f32,
    index: usize,
) -> Result<Vec<f64>> {
    let (h, w, c) = image_dims(x)?;
    if seg.height() != h || seg.width() != w {
        return shape_err(format!(
            "segmentation is {}x{}, image is {h}x{w}",
            seg.height(),
            seg.width()
        ));
    }
    features
        .iter()
        .map(|row| {
            if row.len() != seg.nr_segments() {
                return shape_err("feature row length differs from segment count");
            }
            let mut tmp = x.clone();
            for (p, px) in tmp.data_mut().chunks_mut(c).enumerate() {
                if row[seg.ids()[p]] == 0.0 {
                    px.fill(replacement);
                }
            }
            Ok(model.predict(&tmp)?.data()[index] as f64)
        })
        .collect()
}

/// Weighted ridge fit of labels on feature rows, weighting by similarity to
/// the all-on row.
pub fn fit_surrogate(features: &[Vec<f64>], labels: &[f64], kernel_width: f64, alpha: f64) -> Result<LimeFit> {
    let weights: Vec<f64> = features
        .iter()
        .map(|r| kernel_weight(cosine_distance_to_ones(r), kernel_width))
        .collect();
    let (coefficients, intercept) = ridge_fit(features, labels, &weights, alpha)?;
    Ok(LimeFit {
        coefficients,
        intercept,
    })
}

/// Writes each segment's coefficient into every channel of its pixels.
pub fn paint(seg: &Segmentation, coefficients: &[f64], shape: &[usize]) -> Result<Tensor> {
    let c = shape.last().copied().unwrap_or(1);
    let data = seg
        .ids()
        .iter()
        .flat_map(|&id| std::iter::repeat_n(coefficients[id] as f32, c))
        .collect();
    Tensor::new(shape, data)
}

pub fn lime(
    model: &Model,
    x: &Tensor,
    seg: &Segmentation,
    cfg: &LimeConfig,
    sel: NeuronSelector,
) -> Result<Saliency> {
    if cfg.nr_samples == 0 || !(cfg.kernel_width > 0.0) {
        return Err(Error::Config("lime needs nr_samples >= 1 and kernel_width > 0".into()));
    }
    let (index, _) = frozen_index(model, x, sel)?;
    let mut rng = XorShift64Star::new(cfg.seed);
    let features = sample_features(cfg.nr_samples, seg.nr_segments(), &mut rng);
    let labels = query_model(model, x, seg, &features, cfg.replacement, index)?;
    let fit = fit_surrogate(&features, &labels, cfg.kernel_width, cfg.ridge_alpha)?;
    Ok(Saliency::new(paint(seg, &fit.coefficients, x.shape())?, "lime", index)
        .with_param("nr_samples", cfg.nr_samples)
        .with_param("kernel_width", cfg.kernel_width)
        .with_param("ridge_alpha", cfg.ridge_alpha)
        .with_param("nr_segments", seg.nr_segments())
        .with_param("intercept", fit.intercept)
        .with_param("seed", cfg.seed))
}
