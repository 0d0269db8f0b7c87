//! Propagation-based explanations built on the backend: Guided Backprop,
//! DeconvNet, Deep Taylor, LRP (epsilon, alpha-beta, composite), PatternNet
//! and PatternAttribution.
//!
//! Each method is a [`MappingRegistry`] plus a relevance seed. The
//! `*_registry` functions expose the registries; the plain functions build,
//! compile and execute in one call.

pub mod patterns;
pub mod rules;

use crate::autodiff::NeuronSelector;
use crate::backend::{compile, conditions, AnalysisPlan, MappingRegistry, RelevanceInit};
use crate::error::Result;
use crate::model::Model;
use crate::saliency::Saliency;
use crate::tensor::Tensor;

pub use patterns::{estimate_patterns_linear, Patterns};
pub use rules::{
    check_alpha_beta, AlphaBeta, Bounded, DeconvRelu, Epsilon, GuidedRelu, SubstitutedKernel, ZPlus,
    ZPlusForm, DEFAULT_EPSILON,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrpConfig {
    pub epsilon: f32,
    pub alpha: f32,
    pub beta: f32,
}

impl Default for LrpConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            alpha: 1.0,
            beta: 0.0,
        }
    }
}

pub fn guided_backprop_registry() -> MappingRegistry {
    MappingRegistry::new()
        .register("guided_relu", conditions::is_relu, GuidedRelu)
        .expect("fresh registry")
}

pub fn deconvnet_registry() -> MappingRegistry {
    MappingRegistry::new()
        .register("deconv_relu", conditions::is_relu, DeconvRelu)
        .expect("fresh registry")
}

/// Z+ on every kernel node.
pub fn zplus_registry(model: &Model, form: ZPlusForm) -> MappingRegistry {
    MappingRegistry::new()
        .register("zplus", conditions::has_kernel, ZPlus::new(model, DEFAULT_EPSILON, form))
        .expect("fresh registry")
}

/// Bounded rule on the kernel node reading the model input, Z+ on the
/// other kernel nodes.
pub fn deep_taylor_registry(model: &Model, epsilon: f32) -> MappingRegistry {
    MappingRegistry::new()
        .register("bounded", conditions::is_input_layer, Bounded::new(model, epsilon))
        .and_then(|r| {
            r.register(
                "zplus",
                conditions::has_kernel,
                ZPlus::new(model, epsilon, ZPlusForm::Explicit),
            )
        })
        .expect("fresh registry")
}

pub fn lrp_epsilon_registry(epsilon: f32) -> MappingRegistry {
    MappingRegistry::new()
        .register("epsilon", conditions::has_kernel, Epsilon { eps: epsilon })
        .expect("fresh registry")
}

pub fn lrp_alphabeta_registry(model: &Model, cfg: &LrpConfig) -> Result<MappingRegistry> {
    MappingRegistry::new().register(
        "alpha_beta",
        conditions::has_kernel,
        AlphaBeta::new(model, cfg.alpha, cfg.beta, cfg.epsilon)?,
    )
}

/// Epsilon on dense layers, alpha-beta on convolutions.
pub fn lrp_composite_registry(model: &Model, cfg: &LrpConfig) -> Result<MappingRegistry> {
    MappingRegistry::new()
        .register("epsilon", conditions::is_dense, Epsilon { eps: cfg.epsilon })?
        .register(
            "alpha_beta",
            conditions::is_conv,
            AlphaBeta::new(model, cfg.alpha, cfg.beta, cfg.epsilon)?,
        )
}

pub fn patternnet_registry(model: &Model, patterns: &Patterns) -> Result<MappingRegistry> {
    let slots = patterns.assign(model)?;
    MappingRegistry::new().register("pattern", conditions::has_kernel, SubstitutedKernel::new(slots))
}

pub fn pattern_attribution_registry(model: &Model, patterns: &Patterns) -> Result<MappingRegistry> {
    let slots = patterns
        .assign(model)?
        .into_iter()
        .zip(model.nodes())
        .map(|(p, n)| match (p, n.kernel()) {
            (Some(p), Some(k)) => k.mul(&p).map(Some),
            _ => Ok(None),
        })
        .collect::<Result<Vec<_>>>()?;
    MappingRegistry::new().register(
        "pattern_attribution",
        conditions::has_kernel,
        SubstitutedKernel::new(slots),
    )
}

pub fn deep_taylor_plan(model: &Model, sel: NeuronSelector, epsilon: f32) -> Result<AnalysisPlan> {
    Ok(compile(model, &deep_taylor_registry(model, epsilon), sel, RelevanceInit::OutputValue)?
        .require_nonnegative_seed())
}

fn run(
    model: &Model,
    x: &Tensor,
    reg: &MappingRegistry,
    sel: NeuronSelector,
    init: RelevanceInit,
    method: &str,
) -> Result<Saliency> {
    Ok(compile(model, reg, sel, init)?.execute(model, x)?.with_method(method))
}

pub fn guided_backprop(model: &Model, x: &Tensor, sel: NeuronSelector) -> Result<Saliency> {
    run(model, x, &guided_backprop_registry(), sel, RelevanceInit::OneHot, "guided_backprop")
}

pub fn deconvnet(model: &Model, x: &Tensor, sel: NeuronSelector) -> Result<Saliency> {
    run(model, x, &deconvnet_registry(), sel, RelevanceInit::OneHot, "deconvnet")
}

pub fn deep_taylor(model: &Model, x: &Tensor, sel: NeuronSelector) -> Result<Saliency> {
    Ok(deep_taylor_plan(model, sel, DEFAULT_EPSILON)?
        .execute(model, x)?
        .with_method("deep_taylor"))
}

pub fn lrp_epsilon(model: &Model, x: &Tensor, sel: NeuronSelector, epsilon: f32) -> Result<Saliency> {
    run(model, x, &lrp_epsilon_registry(epsilon), sel, RelevanceInit::OutputValue, "lrp_epsilon")
        .map(|s| s.with_param("epsilon", epsilon as f64))
}

pub fn lrp_alphabeta(model: &Model, x: &Tensor, sel: NeuronSelector, cfg: &LrpConfig) -> Result<Saliency> {
    run(model, x, &lrp_alphabeta_registry(model, cfg)?, sel, RelevanceInit::OutputValue, "lrp_alphabeta")
}

pub fn lrp_composite(model: &Model, x: &Tensor, sel: NeuronSelector, cfg: &LrpConfig) -> Result<Saliency> {
    run(model, x, &lrp_composite_registry(model, cfg)?, sel, RelevanceInit::OutputValue, "lrp_composite")
}

pub fn patternnet(model: &Model, patterns: &Patterns, x: &Tensor, sel: NeuronSelector) -> Result<Saliency> {
    run(model, x, &patternnet_registry(model, patterns)?, sel, RelevanceInit::OneHot, "patternnet")
}

pub fn pattern_attribution(model: &Model, patterns: &Patterns, x: &Tensor, sel: NeuronSelector) -> Result<Saliency> {
    run(
        model,
        x,
        &pattern_attribution_registry(model, patterns)?,
        sel,
        RelevanceInit::OneHot,
        "pattern_attribution",
    )
}
