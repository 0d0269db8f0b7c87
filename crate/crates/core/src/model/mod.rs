//! Layer-node DAG, forward execution and model exchange.
//!
//! Every node produces exactly one tensor, named after the node. A node's
//! `inputs` list the producer names in order; a name may repeat (e.g. an
//! `add_merge` of the same tensor twice).

pub mod layers;
mod manifest;
mod zoo;

use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Element, Tensor};

pub use layers::{layer_eval, LinearKind};
pub use manifest::{load_model, load_model_bytes, save_model, model_to_bytes, LoadOptions};
pub use zoo::{make_reference_model, ReferenceKind, REFERENCE_IMAGE_SIDE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T = f32> {
    pub mean: Tensor<T>,
    pub variance: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub eps: T,
}

impl<T: Element> BatchNormParams<T> {
    /// Per-channel `(gamma / sqrt(var + eps), beta - mean * scale)`.
    pub fn scale_shift(&self) -> (Vec<T>, Vec<T>) {
        let scale: Vec<T> = self
            .gamma
            .data()
            .iter()
            .zip(self.variance.data())
            .map(|(&g, &v)| g / (v + self.eps).sqrt())
            .collect();
        let shift = self
            .beta
            .data()
            .iter()
            .zip(self.mean.data())
            .zip(&scale)
            .map(|((&b, &m), &s)| b - m * s)
            .collect();
        (scale, shift)
    }

    fn cast<U: Element>(&self) -> BatchNormParams<U> {
        BatchNormParams {
            mean: self.mean.cast(),
            variance: self.variance.cast(),
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            eps: U::from_f64(self.eps.as_f64()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind<T = f32> {
    Input,
    /// Kernel `(in, out)`, bias `(out)`.
    Dense {
        kernel: Tensor<T>,
        bias: Option<Tensor<T>>,
    },
    /// Kernel `(kh, kw, in_channels, out_channels)`, bias `(out_channels)`.
    Conv2d {
        kernel: Tensor<T>,
        bias: Option<Tensor<T>>,
        strides: [usize; 2],
        padding: Padding,
    },
    MaxPool2d {
        pool: [usize; 2],
        strides: [usize; 2],
        padding: Padding,
    },
    Flatten,
    AddMerge,
    BatchNorm(BatchNormParams<T>),
    Softmax,
}

impl<T> LayerKind<T> {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input => "input",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::MaxPool2d { .. } => "maxpool2d",
            LayerKind::Flatten => "flatten",
            LayerKind::AddMerge => "add_merge",
            LayerKind::BatchNorm(_) => "batchnorm",
            LayerKind::Softmax => "softmax",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode<T = f32> {
    pub name: String,
    pub kind: LayerKind<T>,
    pub activation: Activation,
    pub inputs: Vec<String>,
}

impl<T: Element> LayerNode<T> {
    pub fn new(name: impl Into<String>, kind: LayerKind<T>, inputs: &[&str]) -> Self {
        Self {
            name: name.into(),
            kind,
            activation: Activation::None,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn has_kernel(&self) -> bool {
        self.kernel().is_some()
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.kind, LayerKind::Dense { .. })
    }

    pub fn is_conv(&self) -> bool {
        matches!(self.kind, LayerKind::Conv2d { .. })
    }

    pub fn kernel(&self) -> Option<&Tensor<T>> {
        match &self.kind {
            LayerKind::Dense { kernel, .. } | LayerKind::Conv2d { kernel, .. } => Some(kernel),
            _ => None,
        }
    }

    pub fn bias(&self) -> Option<&Tensor<T>> {
        match &self.kind {
            LayerKind::Dense { bias, .. } | LayerKind::Conv2d { bias, .. } => bias.as_ref(),
            _ => None,
        }
    }

    /// The linear operation and its parameters, for kernel-bearing nodes.
    pub fn linear(&self) -> Option<(LinearKind, &Tensor<T>, Option<&Tensor<T>>)> {
        match &self.kind {
            LayerKind::Dense { kernel, bias } => Some((LinearKind::Dense, kernel, bias.as_ref())),
            LayerKind::Conv2d {
                kernel,
                bias,
                strides,
                padding,
            } => Some((
                LinearKind::Conv2d {
                    strides: *strides,
                    padding: *padding,
                },
                kernel,
                bias.as_ref(),
            )),
            _ => None,
        }
    }

    /// Copy of a kernel-bearing node with another kernel, optional bias and
    /// no activation.
    pub fn linear_copy(&self, kernel: Tensor<T>, bias: Option<Tensor<T>>) -> Option<Self> {
        let kind = match &self.kind {
            LayerKind::Dense { .. } => LayerKind::Dense { kernel, bias },
            LayerKind::Conv2d {
                strides, padding, ..
            } => LayerKind::Conv2d {
                kernel,
                bias,
                strides: *strides,
                padding: *padding,
            },
            _ => return None,
        };
        Some(Self {
            name: self.name.clone(),
            kind,
            activation: Activation::None,
            inputs: self.inputs.clone(),
        })
    }

    fn cast<U: Element>(&self) -> LayerNode<U> {
        let kind = match &self.kind {
            LayerKind::Input => LayerKind::Input,
            LayerKind::Dense { kernel, bias } => LayerKind::Dense {
                kernel: kernel.cast(),
                bias: bias.as_ref().map(Tensor::cast),
            },
            LayerKind::Conv2d {
                kernel,
                bias,
                strides,
                padding,
            } => LayerKind::Conv2d {
                kernel: kernel.cast(),
                bias: bias.as_ref().map(Tensor::cast),
                strides: *strides,
                padding: *padding,
            },
            LayerKind::MaxPool2d {
                pool,
                strides,
                padding,
            } => LayerKind::MaxPool2d {
                pool: *pool,
                strides: *strides,
                padding: *padding,
            },
            LayerKind::Flatten => LayerKind::Flatten,
            LayerKind::AddMerge => LayerKind::AddMerge,
            LayerKind::BatchNorm(p) => LayerKind::BatchNorm(p.cast()),
            LayerKind::Softmax => LayerKind::Softmax,
        };
        LayerNode {
            name: self.name.clone(),
            kind,
            activation: self.activation,
            inputs: self.inputs.clone(),
        }
    }
}

/// A validated feed-forward graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    nodes: Vec<LayerNode<T>>,
    input_shape: Vec<usize>,
    input_range: (f32, f32),
    output: String,
    index: HashMap<String, usize>,
    input_node: usize,
    order: Vec<usize>,
    shapes: Vec<Vec<usize>>,
    /// Per node, the indices of the producers listed in `inputs`.
    producers: Vec<Vec<usize>>,
}

impl<T: Element> Model<T> {
    /// Validates names, wiring, acyclicity, connectivity and shapes.
    pub fn new(
        nodes: Vec<LayerNode<T>>,
        input_shape: &[usize],
        input_range: (f32, f32),
        output: impl Into<String>,
    ) -> Result<Self> {
        let output = output.into();
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.name.clone(), i).is_some() {
                return Err(Error::InvalidModel(format!("duplicate node name `{}`", n.name)));
            }
        }
        let inputs: Vec<usize> = nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.kind, LayerKind::Input))
            .map(|(i, _)| i)
            .collect();
        let input_node = match inputs.as_slice() {
            [i] => *i,
            _ => {
                return Err(Error::InvalidModel(format!(
                    "expected exactly one input node, found {}",
                    inputs.len()
                )))
            }
        };
        let mut producers = Vec::with_capacity(nodes.len());
        for n in &nodes {
            let arity_ok = match n.kind {
                LayerKind::Input => n.inputs.is_empty(),
                LayerKind::AddMerge => !n.inputs.is_empty(),
                _ => n.inputs.len() == 1,
            };
            if !arity_ok {
                return Err(Error::InvalidModel(format!(
                    "node `{}` ({}) has {} inputs",
                    n.name,
                    n.kind.name(),
                    n.inputs.len()
                )));
            }
            let mut p = Vec::with_capacity(n.inputs.len());
            for src in &n.inputs {
                p.push(*index.get(src).ok_or_else(|| {
                    Error::InvalidModel(format!("node `{}` reads unknown tensor `{}`", n.name, src))
                })?);
            }
            producers.push(p);
        }
        let out_idx = *index
            .get(&output)
            .ok_or_else(|| Error::InvalidModel(format!("output `{}` is not a node", output)))?;

        let order = dfs_order(&nodes, &producers)?;

        // everything must feed the output
        let mut live = vec![false; nodes.len()];
        live[out_idx] = true;
        for &i in order.iter().rev() {
            if live[i] {
                for &p in &producers[i] {
                    live[p] = true;
                }
            }
        }
        if let Some(dead) = live.iter().position(|l| !l) {
            return Err(Error::InvalidModel(format!(
                "node `{}` does not contribute to output `{}`",
                nodes[dead].name, output
            )));
        }

        let mut model = Self {
            nodes,
            input_shape: input_shape.to_vec(),
            input_range,
            output,
            index,
            input_node,
            order,
            shapes: Vec::new(),
            producers,
        };
        model.shapes = model.infer_shapes()?;
        Ok(model)
    }

    pub fn nodes(&self) -> &[LayerNode<T>] {
        &self.nodes
    }

    pub fn node(&self, name: &str) -> Option<&LayerNode<T>> {
        self.index.get(name).map(|&i| &self.nodes[i])
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_range(&self) -> (f32, f32) {
        self.input_range
    }

    pub fn output(&self) -> &str {
        &self.output
    }

    pub fn output_index(&self) -> usize {
        self.index[&self.output]
    }

    pub fn input_name(&self) -> &str {
        &self.nodes[self.input_node].name
    }

    pub fn input_index(&self) -> usize {
        self.input_node
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.shapes[self.output_index()]
    }

    /// Output shape of node `i`.
    pub fn shape_of(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    /// Producer indices for node `i`, in `inputs` order.
    pub fn producers(&self, i: usize) -> &[usize] {
        &self.producers[i]
    }

    /// Cached topological order computed at validation.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Recomputes a topological order by depth-first search: producers
    /// before consumers, ties broken by declaration order.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        dfs_order(&self.nodes, &self.producers)
    }

    /// Same graph with weights converted to another precision.
    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            nodes: self.nodes.iter().map(LayerNode::cast).collect(),
            input_shape: self.input_shape.clone(),
            input_range: self.input_range,
            output: self.output.clone(),
            index: self.index.clone(),
            input_node: self.input_node,
            order: self.order.clone(),
            shapes: self.shapes.clone(),
            producers: self.producers.clone(),
        }
    }

    /// Rebuilds a model from edited nodes, reusing this model's metadata.
    pub fn with_nodes(&self, nodes: Vec<LayerNode<T>>, output: &str) -> Result<Self> {
        Model::new(nodes, &self.input_shape, self.input_range, output)
    }

    pub fn into_nodes(self) -> Vec<LayerNode<T>> {
        self.nodes
    }

    fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for &i in &self.order {
            let node = &self.nodes[i];
            let ins: Vec<&[usize]> = self.producers[i].iter().map(|&p| shapes[p].as_slice()).collect();
            let fail = |what: String| -> Result<Vec<Vec<usize>>> {
                shape_err(format!("node `{}` ({}): {}", node.name, node.kind.name(), what))
            };
            let s = match &node.kind {
                LayerKind::Input => self.input_shape.clone(),
                LayerKind::Dense { kernel, bias } => {
                    let x = ins[0];
                    let k = kernel.shape();
                    if x.len() != 2 || k.len() != 2 || x[1] != k[0] {
                        return fail(format!("input {:?} incompatible with kernel {:?}", x, k));
                    }
                    if let Some(b) = bias {
                        if b.shape() != [k[1]] {
                            return fail(format!("bias {:?} vs kernel {:?}", b.shape(), k));
                        }
                    }
                    vec![x[0], k[1]]
                }
                LayerKind::Conv2d {
                    kernel,
                    bias,
                    strides,
                    padding,
                } => {
                    let x = ins[0];
                    let k = kernel.shape();
                    if x.len() != 4 || k.len() != 4 || x[3] != k[2] {
                        return fail(format!("input {:?} incompatible with kernel {:?}", x, k));
                    }
                    if let Some(b) = bias {
                        if b.shape() != [k[3]] {
                            return fail(format!("bias {:?} vs kernel {:?}", b.shape(), k));
                        }
                    }
                    let (oh, _) = layers::conv_geometry(x[1], k[0], strides[0], *padding)?;
                    let (ow, _) = layers::conv_geometry(x[2], k[1], strides[1], *padding)?;
                    vec![x[0], oh, ow, k[3]]
                }
                LayerKind::MaxPool2d {
                    pool,
                    strides,
                    padding,
                } => {
                    let x = ins[0];
                    if x.len() != 4 {
                        return fail(format!("expects rank 4 input, got {:?}", x));
                    }
                    let (oh, _) = layers::conv_geometry(x[1], pool[0], strides[0], *padding)?;
                    let (ow, _) = layers::conv_geometry(x[2], pool[1], strides[1], *padding)?;
                    vec![x[0], oh, ow, x[3]]
                }
                LayerKind::Flatten => {
                    let x = ins[0];
                    if x.is_empty() {
                        return fail("cannot flatten a scalar".into());
                    }
                    vec![x[0], x[1..].iter().product()]
                }
                LayerKind::AddMerge => {
                    if ins.iter().any(|s| *s != ins[0]) {
                        return fail(format!("operand shapes differ: {:?}", ins));
                    }
                    ins[0].to_vec()
                }
                LayerKind::BatchNorm(p) => {
                    let x = ins[0];
                    let c = x.last().copied().unwrap_or(0);
                    for t in [&p.mean, &p.variance, &p.gamma, &p.beta] {
                        if t.shape() != [c] {
                            return fail(format!("parameter {:?} vs {} channels", t.shape(), c));
                        }
                    }
                    x.to_vec()
                }
                LayerKind::Softmax => ins[0].to_vec(),
            };
            shapes[i] = s;
        }
        Ok(shapes)
    }

    /// Runs the model and keeps every intermediate tensor.
    pub fn forward(&self, x: &Tensor<T>) -> Result<ActivationTrace<T>> {
        if x.shape() != self.input_shape.as_slice() {
            return shape_err(format!(
                "input shape {:?} does not match model input {:?}",
                x.shape(),
                self.input_shape
            ));
        }
        let n = self.nodes.len();
        let mut values: Vec<Option<Tensor<T>>> = vec![None; n];
        let mut pre: Vec<Option<Tensor<T>>> = vec![None; n];
        for &i in &self.order {
            let node = &self.nodes[i];
            if i == self.input_node {
                values[i] = Some(x.clone());
                continue;
            }
            let ins: Vec<&Tensor<T>> = self.producers[i]
                .iter()
                .map(|&p| values[p].as_ref().expect("producer evaluated first"))
                .collect();
            let lin = layers::eval_linear_part(node, &ins)?;
            if node.activation == Activation::None {
                values[i] = Some(lin);
            } else {
                values[i] = Some(layers::apply_activation(node.activation, &lin));
                pre[i] = Some(lin);
            }
        }
        Ok(ActivationTrace {
            values: values.into_iter().map(|v| v.expect("all nodes evaluated")).collect(),
            pre_activations: pre,
            output: self.output_index(),
        })
    }

    /// Convenience: the output tensor only.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(x)?.into_output())
    }

    /// Redirects a trailing softmax to its pre-softmax tensor and drops
    /// nodes that no longer feed the output.
    pub fn strip_softmax(&self) -> Result<Self> {
        let out = self.output_index();
        let node = &self.nodes[out];
        let mut nodes = self.nodes.clone();
        let new_output = if matches!(node.kind, LayerKind::Softmax) {
            node.inputs[0].clone()
        } else if node.activation == Activation::Softmax {
            nodes[out].activation = Activation::None;
            node.name.clone()
        } else {
            return Ok(self.clone());
        };
        let new_out_idx = self.index[&new_output];
        let mut live = vec![false; nodes.len()];
        live[new_out_idx] = true;
        for &i in self.order.iter().rev() {
            if live[i] {
                for &p in &self.producers[i] {
                    live[p] = true;
                }
            }
        }
        let kept: Vec<LayerNode<T>> = nodes
            .into_iter()
            .zip(live)
            .filter(|(_, l)| *l)
            .map(|(n, _)| n)
            .collect();
        Model::new(kept, &self.input_shape, self.input_range, new_output)
    }

    /// Folds each batchnorm that directly follows a dense/conv node without
    /// activation (and is that node's only consumer) into the node's kernel
    /// and bias.
    pub fn fold_batchnorm(&self) -> Result<Self> {
        let n = self.nodes.len();
        let mut consumers = vec![0usize; n];
        for p in &self.producers {
            for &j in p {
                consumers[j] += 1;
            }
        }
        let mut nodes = self.nodes.clone();
        let mut removed = vec![false; n];
        let mut rename: HashMap<String, String> = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let LayerKind::BatchNorm(params) = &node.kind else {
                continue;
            };
            let src = self.producers[i][0];
            let prev = &nodes[src];
            if !prev.has_kernel() || prev.activation != Activation::None || consumers[src] != 1 {
                continue;
            }
            let (scale, shift) = params.scale_shift();
            let (_, kernel, bias) = prev.linear().expect("kernel node");
            let cout = *kernel.shape().last().unwrap();
            let mut k = kernel.clone();
            for (j, v) in k.data_mut().iter_mut().enumerate() {
                *v = *v * scale[j % cout];
            }
            let b: Vec<T> = (0..cout)
                .map(|c| {
                    let b0 = bias.map_or(T::zero(), |b| b.data()[c]);
                    b0 * scale[c] + shift[c]
                })
                .collect();
            let mut fused = prev
                .linear_copy(k, Some(Tensor::new(&[cout], b)?))
                .expect("kernel node");
            fused.activation = node.activation;
            nodes[src] = fused;
            removed[i] = true;
            rename.insert(node.name.clone(), nodes[src].name.clone());
        }
        if rename.is_empty() {
            return Ok(self.clone());
        }
        let kept: Vec<LayerNode<T>> = nodes
            .into_iter()
            .zip(removed)
            .filter(|(_, r)| !r)
            .map(|(mut node, _)| {
                for src in &mut node.inputs {
                    if let Some(to) = rename.get(src) {
                        *src = to.clone();
                    }
                }
                node
            })
            .collect();
        let output = rename.get(&self.output).unwrap_or(&self.output).clone();
        Model::new(kept, &self.input_shape, self.input_range, output)
    }
}

fn dfs_order<T>(nodes: &[LayerNode<T>], producers: &[Vec<usize>]) -> Result<Vec<usize>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Open,
        Done,
    }
    let mut mark = vec![Mark::New; nodes.len()];
    let mut order = Vec::with_capacity(nodes.len());
    for root in 0..nodes.len() {
        if mark[root] != Mark::New {
            continue;
        }
        // (node, next producer slot to visit)
        let mut stack = vec![(root, 0usize)];
        mark[root] = Mark::Open;
        while let Some(&mut (node, ref mut slot)) = stack.last_mut() {
            if *slot < producers[node].len() {
                let p = producers[node][*slot];
                *slot += 1;
                match mark[p] {
                    Mark::New => {
                        mark[p] = Mark::Open;
                        stack.push((p, 0));
                    }
                    Mark::Open => return Err(Error::Cycle(nodes[p].name.clone())),
                    Mark::Done => {}
                }
            } else {
                mark[node] = Mark::Done;
                order.push(node);
                stack.pop();
            }
        }
    }
    Ok(order)
}

/// All tensors of one forward pass, indexed like the model's nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace<T = f32> {
    values: Vec<Tensor<T>>,
    pre_activations: Vec<Option<Tensor<T>>>,
    output: usize,
}

impl<T: Element> ActivationTrace<T> {
    /// Output tensor of node `i` (after its activation).
    pub fn value(&self, i: usize) -> &Tensor<T> {
        &self.values[i]
    }

    /// Tensor of node `i` before its activation, when it has one.
    pub fn pre_activation(&self, i: usize) -> Option<&Tensor<T>> {
        self.pre_activations[i].as_ref()
    }

    pub fn get<'a>(&'a self, model: &Model<T>, name: &str) -> Option<&'a Tensor<T>> {
        model.node_index(name).map(|i| &self.values[i])
    }

    pub fn output(&self) -> &Tensor<T> {
        &self.values[self.output]
    }

    pub fn into_output(mut self) -> Tensor<T> {
        self.values.swap_remove(self.output)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}
