//! Reverse-propagation engine.
//!
//! A [`MappingRegistry`] holds backward mappings guarded by conditions over
//! the built graph. [`compile`] assigns every node the first mapping whose
//! condition matches (gradient otherwise) and freezes that into an
//! [`AnalysisPlan`], which can then be executed on any number of inputs.

use std::fmt;
use std::sync::Arc;

use crate::autodiff::{self, NeuronSelector};
use crate::error::{Error, Result};
use crate::model::{LayerKind, LayerNode, Model};
use crate::saliency::Saliency;
use crate::tensor::Tensor;

/// Read-only context handed to a mapping for one node.
#[derive(Debug, Clone, Copy)]
pub struct BpState<'a> {
    pub node: &'a LayerNode,
    pub node_index: usize,
    pub model: &'a Model,
    pub neuron: usize,
    /// Per-node tensor attached at compile time (e.g. a pattern).
    pub scratch: Option<&'a Tensor>,
}

/// What a mapping needs from the node it is assigned to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Requirement {
    None,
    Kernel,
}

impl Requirement {
    fn holds(self, node: &LayerNode) -> bool {
        match self {
            Requirement::None => true,
            Requirement::Kernel => node.has_kernel(),
        }
    }
}

impl fmt::Display for Requirement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Requirement::None => write!(f, "no requirement"),
            Requirement::Kernel => write!(f, "node must have a kernel"),
        }
    }
}

/// Maps the tensors back-propagated onto a node's outputs to tensors for
/// each of its inputs.
pub trait BackwardMapping: Send + Sync {
    fn apply(
        &self,
        xs: &[&Tensor],
        ys: &[&Tensor],
        bp_ys: &[Tensor],
        state: &BpState<'_>,
    ) -> Result<Vec<Tensor>>;

    fn requirement(&self) -> Requirement {
        Requirement::None
    }
}

/// The default mapping: the exact vector-Jacobian product.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradientMapping;

impl BackwardMapping for GradientMapping {
    fn apply(
        &self,
        xs: &[&Tensor],
        ys: &[&Tensor],
        bp_ys: &[Tensor],
        state: &BpState<'_>,
    ) -> Result<Vec<Tensor>> {
        autodiff::vjp(state.node, xs, ys, bp_ys)
    }
}

pub const GRADIENT: &str = "gradient";

pub type Condition = Arc<dyn Fn(&LayerNode, &Model) -> bool + Send + Sync>;

#[derive(Clone)]
struct Entry {
    name: String,
    condition: Condition,
    mapping: Arc<dyn BackwardMapping>,
}

/// Ordered conditional mappings; earlier entries win.
#[derive(Clone, Default)]
pub struct MappingRegistry {
    entries: Vec<Entry>,
}

impl fmt::Debug for MappingRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.names()).finish()
    }
}

impl MappingRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        mut self,
        name: impl Into<String>,
        condition: impl Fn(&LayerNode, &Model) -> bool + Send + Sync + 'static,
        mapping: impl BackwardMapping + 'static,
    ) -> Result<Self> {
        let name = name.into();
        if name == GRADIENT || self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Registration(format!("mapping name `{name}` already registered")));
        }
        self.entries.push(Entry {
            name,
            condition: Arc::new(condition),
            mapping: Arc::new(mapping),
        });
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name.as_str()).collect()
    }
}

/// How the output tensor is seeded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelevanceInit {
    /// 1 at the selected neuron.
    OneHot,
    /// The selected neuron's activation.
    OutputValue,
}

/// A compiled, reusable assignment of one mapping per node.
#[derive(Clone)]
pub struct AnalysisPlan {
    reverse_order: Vec<usize>,
    names: Vec<String>,
    mappings: Vec<Arc<dyn BackwardMapping>>,
    node_names: Vec<String>,
    scratch: Vec<Option<Tensor>>,
    selector: NeuronSelector,
    init: RelevanceInit,
    nonnegative_seed: bool,
}

impl fmt::Debug for AnalysisPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AnalysisPlan")
            .field("reverse_order", &self.reverse_order)
            .field("assignment", &self.assignment())
            .field("selector", &self.selector)
            .field("init", &self.init)
            .finish()
    }
}

impl PartialEq for AnalysisPlan {
    fn eq(&self, other: &Self) -> bool {
        self.reverse_order == other.reverse_order
            && self.names == other.names
            && self.node_names == other.node_names
            && self.scratch == other.scratch
            && self.selector == other.selector
            && self.init == other.init
            && self.nonnegative_seed == other.nonnegative_seed
    }
}

pub fn compile(
    model: &Model,
    reg: &MappingRegistry,
    sel: NeuronSelector,
    init: RelevanceInit,
) -> Result<AnalysisPlan> {
    let n = model.nodes().len();
    let mut names = Vec::with_capacity(n);
    let mut mappings: Vec<Arc<dyn BackwardMapping>> = Vec::with_capacity(n);
    for node in model.nodes() {
        match reg.entries.iter().find(|e| (e.condition)(node, model)) {
            Some(e) => {
                let req = e.mapping.requirement();
                if !req.holds(node) {
                    return Err(Error::Incompatible {
                        node: node.name.clone(),
                        mapping: e.name.clone(),
                        requirement: req.to_string(),
                    });
                }
                names.push(e.name.clone());
                mappings.push(e.mapping.clone());
            }
            None => {
                names.push(GRADIENT.to_string());
                mappings.push(Arc::new(GradientMapping));
            }
        }
    }
    Ok(AnalysisPlan {
        reverse_order: model.order().iter().rev().copied().collect(),
        names,
        mappings,
        node_names: model.nodes().iter().map(|n| n.name.clone()).collect(),
        scratch: vec![None; n],
        selector: sel,
        init,
        nonnegative_seed: false,
    })
}

impl AnalysisPlan {
    /// `(node, mapping)` pairs in node declaration order.
    pub fn assignment(&self) -> Vec<(&str, &str)> {
        self.node_names
            .iter()
            .zip(&self.names)
            .map(|(a, b)| (a.as_str(), b.as_str()))
            .collect()
    }

    pub fn mapping_for(&self, node: &str) -> Option<&str> {
        let i = self.node_names.iter().position(|n| n == node)?;
        Some(&self.names[i])
    }

    pub fn reverse_order(&self) -> &[usize] {
        &self.reverse_order
    }

    pub fn selector(&self) -> NeuronSelector {
        self.selector
    }

    pub fn init(&self) -> RelevanceInit {
        self.init
    }

    /// Attaches a per-node tensor visible to that node's mapping.
    pub fn set_scratch(&mut self, node_index: usize, t: Tensor) {
        self.scratch[node_index] = Some(t);
    }

    /// Makes execution fail with a domain error when the selected output
    /// activation is negative.
    pub fn require_nonnegative_seed(mut self) -> Self {
        self.nonnegative_seed = true;
        self
    }

    pub fn execute(&self, model: &Model, x: &Tensor) -> Result<Saliency> {
        if model.nodes().len() != self.node_names.len()
            || model.nodes().iter().zip(&self.node_names).any(|(a, b)| &a.name != b)
        {
            return Err(Error::InvalidModel(
                "plan was compiled for a different model".into(),
            ));
        }
        if x.shape() != model.input_shape() {
            return Err(Error::Shape(format!(
                "input shape {:?} does not match model input {:?}",
                x.shape(),
                model.input_shape()
            )));
        }
        let trace = model.forward(x)?;
        let resolved = self.selector.resolve(trace.output())?;
        let activation = trace.output().data()[resolved.index];
        if self.nonnegative_seed && activation < 0.0 {
            return Err(Error::Domain(format!(
                "selected neuron {} has negative activation {activation}; the method is \
                 undefined for negative outputs",
                resolved.index
            )));
        }
        let seed = match self.init {
            RelevanceInit::OneHot => resolved.seed,
            RelevanceInit::OutputValue => resolved.seed.scale(activation),
        };

        let mut incoming: Vec<Option<Tensor>> = vec![None; self.node_names.len()];
        incoming[model.output_index()] = Some(seed);
        let input = model.input_index();
        for &i in &self.reverse_order {
            let Some(bp) = incoming[i].take() else { continue };
            if i == input {
                return Ok(Saliency::new(bp, self.names[input].clone(), resolved.index));
            }
            let node = &model.nodes()[i];
            let name = &self.names[i];
            let y = trace.value(i);
            if bp.shape() != y.shape() {
                return Err(contract(name, format!(
                    "node `{}` received {:?} for output {:?}",
                    node.name,
                    bp.shape(),
                    y.shape()
                )));
            }
            let producers = model.producers(i);
            let xs: Vec<&Tensor> = producers.iter().map(|&p| trace.value(p)).collect();
            let state = BpState {
                node,
                node_index: i,
                model,
                neuron: resolved.index,
                scratch: self.scratch[i].as_ref(),
            };
            let back = self.mappings[i].apply(&xs, &[y], std::slice::from_ref(&bp), &state)?;
            if back.len() != xs.len() {
                return Err(contract(name, format!(
                    "node `{}` returned {} tensors for {} inputs",
                    node.name,
                    back.len(),
                    xs.len()
                )));
            }
            for ((&p, t), xt) in producers.iter().zip(back).zip(&xs) {
                if t.shape() != xt.shape() {
                    return Err(contract(name, format!(
                        "node `{}` returned {:?} for input {:?}",
                        node.name,
                        t.shape(),
                        xt.shape()
                    )));
                }
                match &mut incoming[p] {
                    Some(acc) => acc.add_assign(&t)?,
                    slot @ None => *slot = Some(t),
                }
            }
        }
        Ok(Saliency::new(
            Tensor::zeros(model.input_shape()),
            GRADIENT,
            resolved.index,
        ))
    }
}

fn contract(mapping: &str, detail: String) -> Error {
    Error::MappingContract {
        mapping: mapping.to_string(),
        detail,
    }
}

/// Resolves a selector against a model output.
pub fn neuron_select(output: &Tensor, sel: NeuronSelector) -> Result<usize> {
    Ok(sel.resolve(output)?.index)
}

/// Condition helpers for registries.
pub mod conditions {
    use super::*;
    use crate::model::Activation;

    pub fn is_relu(node: &LayerNode, _: &Model) -> bool {
        node.activation == Activation::Relu
    }

    pub fn has_kernel(node: &LayerNode, _: &Model) -> bool {
        node.has_kernel()
    }

    pub fn is_dense(node: &LayerNode, _: &Model) -> bool {
        node.is_dense()
    }

    pub fn is_conv(node: &LayerNode, _: &Model) -> bool {
        node.is_conv()
    }

    /// Kernel nodes fed directly by the model input.
    pub fn is_input_layer(node: &LayerNode, model: &Model) -> bool {
        node.has_kernel() && node.inputs.iter().any(|n| n == model.input_name())
    }

    pub fn is_input_node(node: &LayerNode, _: &Model) -> bool {
        matches!(node.kind, LayerKind::Input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_reference_model, Activation, ReferenceKind};
    use crate::rng::XorShift64Star;

    fn seeded(shape: &[usize], seed: u64) -> Tensor {
        let mut r = XorShift64Star::new(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.uniform(-1., 1.) as f32).collect()).unwrap()
    }

    struct NeedsKernel;
    impl BackwardMapping for NeedsKernel {
        fn apply(&self, xs: &[&Tensor], _: &[&Tensor], _: &[Tensor], _: &BpState<'_>) -> Result<Vec<Tensor>> {
            Ok(xs.iter().map(|x| Tensor::zeros_like(x)).collect())
        }
        fn requirement(&self) -> Requirement {
            Requirement::Kernel
        }
    }

    struct WrongShape;
    impl BackwardMapping for WrongShape {
        fn apply(&self, _: &[&Tensor], _: &[&Tensor], _: &[Tensor], _: &BpState<'_>) -> Result<Vec<Tensor>> {
            Ok(vec![Tensor::zeros(&[1, 1])])
        }
    }

    #[test]
    fn registration() {
        let reg = MappingRegistry::new()
            .register("relu", conditions::is_relu, GradientMapping)
            .unwrap();
        assert_eq!(reg.len(), 1);
        assert!(matches!(
            reg.clone().register("relu", conditions::is_dense, GradientMapping),
            Err(Error::Registration(_))
        ));
        assert!(matches!(
            reg.register(GRADIENT, conditions::is_dense, GradientMapping),
            Err(Error::Registration(_))
        ));
    }

    #[test]
    fn first_match_wins_and_fallback() {
        let m = make_reference_model(ReferenceKind::Mlp, 0);
        let plan = compile(&m, &MappingRegistry::new(), NeuronSelector::MaxActivation, RelevanceInit::OneHot).unwrap();
        assert!(plan.assignment().iter().all(|(_, b)| *b == GRADIENT));
        let reg = MappingRegistry::new()
            .register("a", conditions::is_dense, NeedsKernel)
            .unwrap()
            .register("b", conditions::has_kernel, NeedsKernel)
            .unwrap();
        let plan = compile(&m, &reg, NeuronSelector::MaxActivation, RelevanceInit::OneHot).unwrap();
        assert_eq!(plan.mapping_for("hidden"), Some("a"));
        assert_eq!(plan.mapping_for("flatten"), Some(GRADIENT));
        let again = compile(&m, &reg, NeuronSelector::MaxActivation, RelevanceInit::OneHot).unwrap();
        assert_eq!(plan, again);
    }

    #[test]
    fn incompatibility_surfaces_at_compile() {
        let m = make_reference_model(ReferenceKind::Cnn, 0);
        let reg = MappingRegistry::new()
            .register("k", |n: &LayerNode, _: &Model| n.kind.name() == "maxpool2d", NeedsKernel)
            .unwrap();
        match compile(&m, &reg, NeuronSelector::MaxActivation, RelevanceInit::OneHot) {
            Err(Error::Incompatible { node, requirement, .. }) => {
                assert_eq!(node, "pool");
                assert!(requirement.contains("kernel"));
            }
            other => panic!("expected incompatibility, got {other:?}"),
        }
    }

    #[test]
    fn contract_violation_names_mapping() {
        let m = make_reference_model(ReferenceKind::Linear, 0);
        let reg = MappingRegistry::new()
            .register("broken", conditions::is_dense, WrongShape)
            .unwrap();
        let plan = compile(&m, &reg, NeuronSelector::MaxActivation, RelevanceInit::OneHot).unwrap();
        match plan.execute(&m, &seeded(m.input_shape(), 1)) {
            Err(Error::MappingContract { mapping, .. }) => assert_eq!(mapping, "broken"),
            other => panic!("expected contract error, got {other:?}"),
        }
    }

    #[test]
    fn gradient_plan_matches_autodiff() {
        for kind in [ReferenceKind::Linear, ReferenceKind::Mlp, ReferenceKind::Cnn] {
            let m = make_reference_model(kind, 5);
            let plan = compile(&m, &MappingRegistry::new(), NeuronSelector::MaxActivation, RelevanceInit::OneHot).unwrap();
            for s in 0..3 {
                let x = seeded(m.input_shape(), s);
                let a = plan.execute(&m, &x).unwrap().values;
                let b = autodiff::gradient(&m, &x, NeuronSelector::MaxActivation).unwrap();
                assert_eq!(a, b);
            }
        }
    }

    fn add_self() -> Model {
        Model::new(
            vec![
                LayerNode::new("x", LayerKind::Input, &[]),
                LayerNode::new("y", LayerKind::AddMerge, &["x", "x"]),
            ],
            &[1, 3],
            (-1., 1.),
            "y",
        )
        .unwrap()
    }

    #[test]
    fn fan_out_sums() {
        let m = add_self();
        let plan = compile(&m, &MappingRegistry::new(), NeuronSelector::Index(1), RelevanceInit::OneHot).unwrap();
        let s = plan.execute(&m, &Tensor::new(&[1, 3], vec![0.1, 0.2, 0.3]).unwrap()).unwrap();
        assert_eq!(s.values.data(), &[0., 2., 0.]);
    }

    #[test]
    fn diamond_doubles_branch() {
        let dense = |name: &str, src: &str| {
            LayerNode::new(
                name,
                LayerKind::Dense {
                    kernel: Tensor::new(&[2, 2], vec![1., 0., 0., 1.]).unwrap(),
                    bias: None,
                },
                &[src],
            )
        };
        let m = Model::new(
            vec![
                LayerNode::new("x", LayerKind::Input, &[]),
                dense("a", "x"),
                dense("b", "x"),
                LayerNode::new("sum", LayerKind::AddMerge, &["a", "b"]),
            ],
            &[1, 2],
            (-1., 1.),
            "sum",
        )
        .unwrap();
        let plan = compile(&m, &MappingRegistry::new(), NeuronSelector::Index(0), RelevanceInit::OneHot).unwrap();
        let s = plan.execute(&m, &Tensor::new(&[1, 2], vec![0.3, 0.4]).unwrap()).unwrap();
        assert_eq!(s.values.data(), &[2., 0.]);
    }

    #[test]
    fn output_value_seed_and_domain_check() {
        let m = Model::new(
            vec![
                LayerNode::new("x", LayerKind::Input, &[]),
                LayerNode::new(
                    "d",
                    LayerKind::Dense {
                        kernel: Tensor::new(&[1, 1], vec![-2.]).unwrap(),
                        bias: None,
                    },
                    &["x"],
                )
                .with_activation(Activation::None),
            ],
            &[1, 1],
            (-1., 1.),
            "d",
        )
        .unwrap();
        let x = Tensor::new(&[1, 1], vec![1.]).unwrap();
        let plan = compile(&m, &MappingRegistry::new(), NeuronSelector::Index(0), RelevanceInit::OutputValue).unwrap();
        assert_eq!(plan.execute(&m, &x).unwrap().values.data(), &[4.]);
        let strict = plan.require_nonnegative_seed();
        assert!(matches!(strict.execute(&m, &x), Err(Error::Domain(_))));
    }

    #[test]
    fn plan_reuse_matches_fresh_compiles() {
        let m = make_reference_model(ReferenceKind::Cnn, 9);
        let plan = compile(&m, &MappingRegistry::new(), NeuronSelector::MaxActivation, RelevanceInit::OneHot).unwrap();
        for s in 0..100 {
            let x = seeded(m.input_shape(), 1000 + s);
            let fresh = compile(&m, &MappingRegistry::new(), NeuronSelector::MaxActivation, RelevanceInit::OneHot)
                .unwrap()
                .execute(&m, &x)
                .unwrap();
            assert_eq!(plan.execute(&m, &x).unwrap(), fresh);
        }
    }

    #[test]
    fn neuron_select_rules() {
        let out = Tensor::new(&[1, 3], vec![0.1, 0.9, 0.3]).unwrap();
        assert_eq!(neuron_select(&out, NeuronSelector::MaxActivation).unwrap(), 1);
        assert!(matches!(neuron_select(&out, NeuronSelector::Index(7)), Err(Error::Index(_))));
    }

    #[test]
    fn wrong_model_rejected() {
        let m = make_reference_model(ReferenceKind::Mlp, 0);
        let plan = compile(&m, &MappingRegistry::new(), NeuronSelector::MaxActivation, RelevanceInit::OneHot).unwrap();
        let other = make_reference_model(ReferenceKind::Cnn, 0);
        assert!(plan.execute(&other, &seeded(other.input_shape(), 0)).is_err());
    }
}
