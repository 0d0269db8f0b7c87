//! One build-then-analyze interface over every method.
//!
//! Building strips a trailing softmax, prepares the method's rules and, for
//! propagation methods, compiles an [`AnalysisPlan`]. The built analyzer is
//! immutable and can be shared across threads.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::NeuronSelector;
use crate::backend::{compile, AnalysisPlan, MappingRegistry, RelevanceInit};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::prop::{self, LrpConfig, Patterns, DEFAULT_EPSILON};
use crate::sample::{
    self, IgConfig, LimeConfig, OcclusionConfig, Postprocess, SegmentConfig, SmoothGradConfig,
};
use crate::saliency::Saliency;
use crate::tensor::Tensor;

/// Method identifiers, in the order they are listed to users.
pub const METHOD_NAMES: [&str; 14] = [
    "gradient",
    "input_t_gradient",
    "integrated_gradients",
    "smoothgrad",
    "occlusion",
    "lime",
    "guided_backprop",
    "deconvnet",
    "deep_taylor",
    "lrp_epsilon",
    "lrp_alphabeta",
    "lrp_composite",
    "patternnet",
    "pattern_attribution",
];

/// A method with its configuration.
#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    Gradient,
    InputTGradient,
    IntegratedGradients(IgConfig),
    SmoothGrad(SmoothGradConfig),
    Occlusion(OcclusionConfig),
    Lime {
        cfg: LimeConfig,
        segmentation: SegmentConfig,
    },
    GuidedBackprop,
    DeconvNet,
    DeepTaylor {
        epsilon: f32,
    },
    LrpEpsilon {
        epsilon: f32,
    },
    LrpAlphaBeta(LrpConfig),
    LrpComposite(LrpConfig),
    PatternNet(Patterns),
    PatternAttribution(Patterns),
}

/// Shape of a method's configuration, for parsing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodId {
    Gradient,
    InputTGradient,
    IntegratedGradients,
    SmoothGrad,
    Occlusion,
    Lime,
    GuidedBackprop,
    DeconvNet,
    DeepTaylor,
    LrpEpsilon,
    LrpAlphaBeta,
    LrpComposite,
    PatternNet,
    PatternAttribution,
}

impl MethodId {
    pub fn name(self) -> &'static str {
        METHOD_NAMES[self as usize]
    }

    pub fn needs_patterns(self) -> bool {
        matches!(self, MethodId::PatternNet | MethodId::PatternAttribution)
    }

    pub fn is_propagation(self) -> bool {
        !matches!(
            self,
            MethodId::InputTGradient
                | MethodId::IntegratedGradients
                | MethodId::SmoothGrad
                | MethodId::Occlusion
                | MethodId::Lime
        )
    }

    /// Parameter keys accepted by [`Method::from_params`].
    pub fn keys(self) -> &'static [&'static str] {
        match self {
            MethodId::IntegratedGradients => &["steps", "reference"],
            MethodId::SmoothGrad => &["n", "noise_scale", "postprocess", "seed"],
            MethodId::Occlusion => &["psize", "replace"],
            MethodId::Lime => &[
                "nr_samples",
                "kernel_width",
                "ridge_alpha",
                "replace",
                "seed",
                "segments",
                "cell",
                "k",
                "compactness",
                "iterations",
            ],
            MethodId::DeepTaylor | MethodId::LrpEpsilon => &["epsilon"],
            MethodId::LrpAlphaBeta | MethodId::LrpComposite => &["epsilon", "alpha", "beta"],
            _ => &[],
        }
    }
}

impl FromStr for MethodId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        use MethodId::*;
        const ALL: [MethodId; 14] = [
            Gradient,
            InputTGradient,
            IntegratedGradients,
            SmoothGrad,
            Occlusion,
            Lime,
            GuidedBackprop,
            DeconvNet,
            DeepTaylor,
            LrpEpsilon,
            LrpAlphaBeta,
            LrpComposite,
            PatternNet,
            PatternAttribution,
        ];
        ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown method `{s}` (expected one of {})",
                METHOD_NAMES.join(", ")
            ))
        })
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl Method {
    pub fn id(&self) -> MethodId {
        match self {
            Method::Gradient => MethodId::Gradient,
            Method::InputTGradient => MethodId::InputTGradient,
            Method::IntegratedGradients(_) => MethodId::IntegratedGradients,
            Method::SmoothGrad(_) => MethodId::SmoothGrad,
            Method::Occlusion(_) => MethodId::Occlusion,
            Method::Lime { .. } => MethodId::Lime,
            Method::GuidedBackprop => MethodId::GuidedBackprop,
            Method::DeconvNet => MethodId::DeconvNet,
            Method::DeepTaylor { .. } => MethodId::DeepTaylor,
            Method::LrpEpsilon { .. } => MethodId::LrpEpsilon,
            Method::LrpAlphaBeta(_) => MethodId::LrpAlphaBeta,
            Method::LrpComposite(_) => MethodId::LrpComposite,
            Method::PatternNet(_) => MethodId::PatternNet,
            Method::PatternAttribution(_) => MethodId::PatternAttribution,
        }
    }

    pub fn name(&self) -> &'static str {
        self.id().name()
    }

    /// Builds a method from string parameters; unknown keys are rejected.
    /// Pattern methods take their patterns separately.
    pub fn from_params(
        id: MethodId,
        params: &[(String, String)],
        patterns: Option<Patterns>,
    ) -> Result<Method> {
        for (k, _) in params {
            if !id.keys().contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown parameter `{k}` for method `{id}`")));
            }
        }
        let get = |key: &str| params.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let lrp = || -> Result<LrpConfig> {
            let mut c = LrpConfig::default();
            if let Some(v) = get("epsilon") {
                c.epsilon = parse("epsilon", v)?;
            }
            if let Some(v) = get("alpha") {
                c.alpha = parse("alpha", v)?;
            }
            if let Some(v) = get("beta") {
                c.beta = parse("beta", v)?;
            }
            prop::check_alpha_beta(c.alpha, c.beta)?;
            Ok(c)
        };
        let epsilon = || -> Result<f32> {
            let e = get("epsilon").map_or(Ok(DEFAULT_EPSILON), |v| parse("epsilon", v))?;
            if e > 0.0 {
                Ok(e)
            } else {
                Err(Error::Config("epsilon must be positive".into()))
            }
        };
        let patterns = || {
            patterns
                .clone()
                .ok_or_else(|| Error::Config(format!("method `{id}` needs patterns (a pattern file or a dataset to fit)")))
        };
        Ok(match id {
            MethodId::Gradient => Method::Gradient,
            MethodId::InputTGradient => Method::InputTGradient,
            MethodId::IntegratedGradients => {
                let mut c = IgConfig::default();
                if let Some(v) = get("steps") {
                    c.steps = parse("steps", v)?;
                }
                if let Some(v) = get("reference") {
                    // constant reference, expanded to the input shape at build time
                    c.reference = Some(Tensor::scalar(parse("reference", v)?));
                }
                Method::IntegratedGradients(c)
            }
            MethodId::SmoothGrad => {
                let mut c = SmoothGradConfig::default();
                if let Some(v) = get("n") {
                    c.n = parse("n", v)?;
                }
                if let Some(v) = get("noise_scale") {
                    c.noise_scale = Some(parse("noise_scale", v)?);
                }
                if let Some(v) = get("postprocess") {
                    c.postprocess = v.parse::<Postprocess>().map_err(Error::Config)?;
                }
                if let Some(v) = get("seed") {
                    c.seed = parse("seed", v)?;
                }
                Method::SmoothGrad(c)
            }
            MethodId::Occlusion => {
                let mut c = OcclusionConfig::default();
                if let Some(v) = get("psize") {
                    c.psize = parse("psize", v)?;
                }
                if let Some(v) = get("replace") {
                    c.replace_value = parse("replace", v)?;
                }
                Method::Occlusion(c)
            }
            MethodId::Lime => {
                let mut c = LimeConfig::default();
                if let Some(v) = get("nr_samples") {
                    c.nr_samples = parse("nr_samples", v)?;
                }
                if let Some(v) = get("kernel_width") {
                    c.kernel_width = parse("kernel_width", v)?;
                }
                if let Some(v) = get("ridge_alpha") {
                    c.ridge_alpha = parse("ridge_alpha", v)?;
                }
                if let Some(v) = get("replace") {
                    c.replacement = parse("replace", v)?;
                }
                if let Some(v) = get("seed") {
                    c.seed = parse("seed", v)?;
                }
                let segmentation = match get("segments").unwrap_or("grid") {
                    "grid" => SegmentConfig::Grid {
                        cell: get("cell").map_or(Ok(4), |v| parse("cell", v))?,
                    },
                    "slic" => SegmentConfig::Slic {
                        k: get("k").map_or(Ok(16), |v| parse("k", v))?,
                        compactness: get("compactness").map_or(Ok(10.0), |v| parse("compactness", v))?,
                        iterations: get("iterations").map_or(Ok(10), |v| parse("iterations", v))?,
                        seed: c.seed,
                    },
                    other => return Err(Error::Config(format!("segments must be grid|slic, got `{other}`"))),
                };
                Method::Lime { cfg: c, segmentation }
            }
            MethodId::GuidedBackprop => Method::GuidedBackprop,
            MethodId::DeconvNet => Method::DeconvNet,
            MethodId::DeepTaylor => Method::DeepTaylor { epsilon: epsilon()? },
            MethodId::LrpEpsilon => Method::LrpEpsilon { epsilon: epsilon()? },
            MethodId::LrpAlphaBeta => Method::LrpAlphaBeta(lrp()?),
            MethodId::LrpComposite => Method::LrpComposite(lrp()?),
            MethodId::PatternNet => Method::PatternNet(patterns()?),
            MethodId::PatternAttribution => Method::PatternAttribution(patterns()?),
        })
    }

    /// The method with default settings (pattern methods need patterns).
    pub fn default_for(id: MethodId, patterns: Option<Patterns>) -> Result<Method> {
        Self::from_params(id, &[], patterns)
    }
}

/// A method prepared for one model.
#[derive(Debug, Clone)]
pub struct Analyzer {
    model: Model,
    method: Method,
    selector: NeuronSelector,
    plan: Option<AnalysisPlan>,
}

impl Analyzer {
    /// Strips a trailing softmax and prepares the method. Propagation methods
    /// compile their plan here, so incompatible models fail at build time.
    pub fn build(model: &Model, method: Method, selector: NeuronSelector) -> Result<Self> {
        let model = model.strip_softmax()?;
        let method = match method {
            Method::IntegratedGradients(mut c) => {
                if let Some(r) = &c.reference {
                    if r.rank() == 0 {
                        c.reference = Some(Tensor::full(model.input_shape(), r.data()[0]));
                    }
                }
                Method::IntegratedGradients(c)
            }
            m => m,
        };
        let plan = |reg: MappingRegistry, init| compile(&model, &reg, selector, init).map(Some);
        let plan = match &method {
            Method::Gradient => plan(MappingRegistry::new(), RelevanceInit::OneHot)?,
            Method::GuidedBackprop => plan(prop::guided_backprop_registry(), RelevanceInit::OneHot)?,
            Method::DeconvNet => plan(prop::deconvnet_registry(), RelevanceInit::OneHot)?,
            Method::DeepTaylor { epsilon } => Some(prop::deep_taylor_plan(&model, selector, *epsilon)?),
            Method::LrpEpsilon { epsilon } => plan(prop::lrp_epsilon_registry(*epsilon), RelevanceInit::OutputValue)?,
            Method::LrpAlphaBeta(c) => plan(prop::lrp_alphabeta_registry(&model, c)?, RelevanceInit::OutputValue)?,
            Method::LrpComposite(c) => plan(prop::lrp_composite_registry(&model, c)?, RelevanceInit::OutputValue)?,
            Method::PatternNet(p) => plan(prop::patternnet_registry(&model, p)?, RelevanceInit::OneHot)?,
            Method::PatternAttribution(p) => {
                plan(prop::pattern_attribution_registry(&model, p)?, RelevanceInit::OneHot)?
            }
            _ => None,
        };
        Ok(Self {
            model,
            method,
            selector,
            plan,
        })
    }

    /// The model actually analyzed (softmax stripped).
    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn method(&self) -> &Method {
        &self.method
    }

    pub fn selector(&self) -> NeuronSelector {
        self.selector
    }

    /// The compiled plan of a propagation method.
    pub fn plan(&self) -> Option<&AnalysisPlan> {
        self.plan.as_ref()
    }

    pub fn analyze(&self, x: &Tensor) -> Result<Saliency> {
        let (model, sel) = (&self.model, self.selector);
        let s = match (&self.method, &self.plan) {
            (_, Some(plan)) => plan.execute(model, x)?,
            (Method::InputTGradient, None) => sample::input_t_gradient(model, x, sel)?,
            (Method::IntegratedGradients(c), None) => sample::integrated_gradients(model, x, c, sel)?,
            (Method::SmoothGrad(c), None) => sample::smoothgrad(model, x, c, sel)?,
            (Method::Occlusion(c), None) => sample::occlusion(model, x, c, sel)?,
            (Method::Lime { cfg, segmentation }, None) => {
                let seg = sample::segment::segment(x, model.input_range(), segmentation)?;
                sample::lime::lime(model, x, &seg, cfg, sel)?
            }
            (m, None) => return Err(Error::Config(format!("method `{}` has no compiled plan", m.name()))),
        };
        let s = s.with_method(self.method.name());
        Ok(match &self.method {
            Method::DeepTaylor { epsilon } | Method::LrpEpsilon { epsilon } => {
                s.with_param("epsilon", *epsilon as f64)
            }
            Method::LrpAlphaBeta(c) | Method::LrpComposite(c) => s
                .with_param("epsilon", c.epsilon as f64)
                .with_param("alpha", c.alpha as f64)
                .with_param("beta", c.beta as f64),
            Method::Lime { segmentation, .. } => s.with_param(
                "segments",
                match segmentation {
                    SegmentConfig::Grid { .. } => "grid",
                    SegmentConfig::Slic { .. } => "slic",
                },
            ),
            _ => s,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_reference_model, ReferenceKind};
    use crate::rng::XorShift64Star;

    fn input(model: &Model, seed: u64) -> Tensor {
        let mut rng = XorShift64Star::new(seed);
        let n = model.input_shape().iter().product();
        Tensor::new(model.input_shape(), (0..n).map(|_| rng.uniform(-1.0, 1.0) as f32).collect()).unwrap()
    }

    fn params(p: &[(&str, &str)]) -> Vec<(String, String)> {
        p.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn ids_round_trip() {
        for name in METHOD_NAMES {
            let id: MethodId = name.parse().unwrap();
            assert_eq!(id.name(), name);
        }
        assert!(matches!("nope".parse::<MethodId>(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = Method::from_params(MethodId::Gradient, &params(&[("steps", "3")]), None);
        assert!(matches!(e, Err(Error::Config(_))));
        let e = Method::from_params(MethodId::IntegratedGradients, &params(&[("stpes", "3")]), None);
        assert!(matches!(e, Err(Error::Config(_))));
    }

    #[test]
    fn parses_values() {
        let m = Method::from_params(MethodId::IntegratedGradients, &params(&[("steps", "8")]), None).unwrap();
        assert_eq!(m, Method::IntegratedGradients(IgConfig { steps: 8, reference: None }));
        let m = Method::from_params(MethodId::LrpAlphaBeta, &params(&[("alpha", "2"), ("beta", "1")]), None).unwrap();
        assert_eq!(
            m,
            Method::LrpAlphaBeta(LrpConfig {
                epsilon: DEFAULT_EPSILON,
                alpha: 2.0,
                beta: 1.0
            })
        );
        assert!(Method::from_params(MethodId::LrpAlphaBeta, &params(&[("alpha", "2")]), None).is_err());
        assert!(Method::from_params(MethodId::SmoothGrad, &params(&[("postprocess", "cube")]), None).is_err());
        assert!(Method::from_params(MethodId::Occlusion, &params(&[("psize", "x")]), None).is_err());
        assert!(Method::from_params(MethodId::PatternNet, &[], None).is_err());
    }

    #[test]
    fn every_method_runs_on_every_zoo_model() {
        for kind in [ReferenceKind::Linear, ReferenceKind::Mlp, ReferenceKind::Cnn] {
            let model = make_reference_model(kind, 1);
            let x = input(&model, 5);
            for name in METHOD_NAMES {
                let id: MethodId = name.parse().unwrap();
                let patterns = id.needs_patterns().then(|| Patterns::from_kernels(&model));
                let p = match id {
                    MethodId::Lime => params(&[("nr_samples", "64")]),
                    MethodId::SmoothGrad => params(&[("n", "4")]),
                    MethodId::IntegratedGradients => params(&[("steps", "4"), ("reference", "0")]),
                    _ => vec![],
                };
                let method = Method::from_params(id, &p, patterns).unwrap();
                let a = match Analyzer::build(&model, method, NeuronSelector::MaxActivation) {
                    Ok(a) => a,
                    Err(Error::Incompatible { .. }) => continue,
                    Err(e) => panic!("{name} on {kind:?}: {e}"),
                };
                assert_eq!(a.plan().is_some(), id.is_propagation(), "{name}");
                let s = match a.analyze(&x) {
                    Ok(s) => s,
                    Err(Error::Domain(_)) if id == MethodId::DeepTaylor => continue,
                    Err(e) => panic!("{name} on {kind:?}: {e}"),
                };
                assert_eq!(s.method, name);
                assert_eq!(s.values.shape(), x.shape());
                assert!(s.values.is_finite(), "{name}");
            }
        }
    }

    #[test]
    fn softmax_is_stripped() {
        let model = make_reference_model(ReferenceKind::Cnn, 2);
        let a = Analyzer::build(&model, Method::Gradient, NeuronSelector::MaxActivation).unwrap();
        assert!(a.model().nodes().len() < model.nodes().len());
        let x = input(&model, 1);
        let g = a.analyze(&x).unwrap();
        let direct = crate::autodiff::gradient(a.model(), &x, NeuronSelector::MaxActivation).unwrap();
        assert_eq!(g.values, direct);
    }

    #[test]
    fn analyzer_is_reusable_and_deterministic() {
        let model = make_reference_model(ReferenceKind::Mlp, 3);
        let a = Analyzer::build(&model, Method::LrpEpsilon { epsilon: 1e-3 }, NeuronSelector::Index(2)).unwrap();
        let x = input(&model, 9);
        let first = a.analyze(&x).unwrap();
        for _ in 0..3 {
            assert_eq!(a.analyze(&x).unwrap(), first);
        }
        assert_eq!(first.neuron_index, 2);
    }
}
