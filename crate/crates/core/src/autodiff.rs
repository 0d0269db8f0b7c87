//! Vector-Jacobian products per layer, whole-model input gradients, and a
//! central-difference oracle.
//!
//! Kinks are resolved deterministically: the relu derivative at exactly 0 is
//! 0, and max-pooling routes the gradient to the first maximal element of a
//! window in row-major order (recomputed from the layer input).

use crate::error::{shape_err, Error, Result};
use crate::model::layers::{conv_geometry, for_each_window_cell};
use crate::model::{Activation, LayerKind, LayerNode, LinearKind, Model, Padding};
use crate::tensor::{Element, Tensor};

/// Which output neuron an explanation targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NeuronSelector {
    /// The neuron with the largest activation; ties go to the lowest index.
    #[default]
    MaxActivation,
    Index(usize),
}

/// A selector resolved against a concrete output.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedNeuron {
    pub index: usize,
    /// One-hot tensor shaped like the output, 1 at `index`.
    pub seed: Tensor,
}

impl NeuronSelector {
    /// Resolves against a `(1, classes)`-style output (batch of one).
    pub fn resolve(&self, output: &Tensor) -> Result<ResolvedNeuron> {
        if output.shape().first() != Some(&1) || output.is_empty() {
            return shape_err(format!(
                "neuron selection needs a batch-of-one output, got {:?}",
                output.shape()
            ));
        }
        let index = match *self {
            NeuronSelector::MaxActivation => output.argmax().expect("non-empty"),
            NeuronSelector::Index(i) if i < output.len() => i,
            NeuronSelector::Index(i) => {
                return Err(Error::Index(format!(
                    "neuron {} out of range for output with {} entries",
                    i,
                    output.len()
                )))
            }
        };
        let mut seed = Tensor::zeros_like(output);
        seed.data_mut()[index] = 1.0;
        Ok(ResolvedNeuron { index, seed })
    }
}

impl std::str::FromStr for NeuronSelector {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s == "max" {
            return Ok(Self::MaxActivation);
        }
        s.parse::<usize>()
            .map(Self::Index)
            .map_err(|_| format!("neuron must be `max` or an index, got `{s}`"))
    }
}

impl std::fmt::Display for NeuronSelector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NeuronSelector::MaxActivation => write!(f, "max"),
            NeuronSelector::Index(i) => write!(f, "{i}"),
        }
    }
}

/// Back-propagates through the node's activation only.
pub fn activation_vjp<T: Element>(act: Activation, y: &Tensor<T>, bp_y: &Tensor<T>) -> Result<Tensor<T>> {
    match act {
        Activation::None => Ok(bp_y.clone()),
        Activation::Relu => y.zip_map(bp_y, |yv, g| if yv > T::zero() { g } else { T::zero() }),
        Activation::Softmax => softmax_vjp(y, bp_y),
    }
}

/// `s * (g - <g, s>)` row by row over the last axis.
pub fn softmax_vjp<T: Element>(s: &Tensor<T>, bp: &Tensor<T>) -> Result<Tensor<T>> {
    if s.shape() != bp.shape() {
        return shape_err(format!("softmax vjp: {:?} vs {:?}", s.shape(), bp.shape()));
    }
    let c = s.shape().last().copied().unwrap_or(1).max(1);
    let mut out = bp.clone();
    for (row, srow) in out.data_mut().chunks_mut(c).zip(s.data().chunks(c)) {
        let dot = row.iter().zip(srow).fold(T::zero(), |a, (&g, &sv)| a + g * sv);
        for (g, &sv) in row.iter_mut().zip(srow) {
            *g = sv * (*g - dot);
        }
    }
    Ok(out)
}

/// Input-side VJP of a linear operation with the given kernel.
pub fn linear_vjp<T: Element>(
    kind: LinearKind,
    bp: &Tensor<T>,
    kernel: &Tensor<T>,
    x_shape: &[usize],
) -> Result<Tensor<T>> {
    match kind {
        LinearKind::Dense => dense_vjp(bp, kernel),
        LinearKind::Conv2d { strides, padding } => conv2d_vjp(bp, kernel, x_shape, strides, padding),
    }
}

/// `bp W^T`.
pub fn dense_vjp<T: Element>(bp: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let ks = kernel.shape();
    if bp.rank() != 2 || ks.len() != 2 || bp.shape()[1] != ks[1] {
        return shape_err(format!("dense vjp: bp {:?} vs kernel {:?}", bp.shape(), ks));
    }
    let (batch, n_in, n_out) = (bp.shape()[0], ks[0], ks[1]);
    let kd = kernel.data();
    let mut out = vec![T::zero(); batch * n_in];
    for b in 0..batch {
        let g = &bp.data()[b * n_out..(b + 1) * n_out];
        for i in 0..n_in {
            let krow = &kd[i * n_out..(i + 1) * n_out];
            out[b * n_in + i] = krow.iter().zip(g).fold(T::zero(), |a, (&w, &gv)| a + w * gv);
        }
    }
    Tensor::new(&[batch, n_in], out)
}

/// Transposed cross-correlation: each output gradient is scattered back over
/// the input window that produced it.
pub fn conv2d_vjp<T: Element>(
    bp: &Tensor<T>,
    kernel: &Tensor<T>,
    x_shape: &[usize],
    strides: [usize; 2],
    padding: Padding,
) -> Result<Tensor<T>> {
    let ks = kernel.shape();
    if x_shape.len() != 4 || ks.len() != 4 || x_shape[3] != ks[2] {
        return shape_err(format!("conv vjp: input {:?} vs kernel {:?}", x_shape, ks));
    }
    let (batch, h, w, cin) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (kh, kw, cout) = (ks[0], ks[1], ks[3]);
    let (oh, pt) = conv_geometry(h, kh, strides[0], padding)?;
    let (ow, pl) = conv_geometry(w, kw, strides[1], padding)?;
    if bp.shape() != [batch, oh, ow, cout] {
        return shape_err(format!(
            "conv vjp: bp {:?}, expected {:?}",
            bp.shape(),
            [batch, oh, ow, cout]
        ));
    }
    let (gd, kd) = (bp.data(), kernel.data());
    let mut out = vec![T::zero(); batch * h * w * cin];
    for b in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = &gd[((b * oh + oy) * ow + ox) * cout..][..cout];
                for ky in 0..kh {
                    let iy = (oy * strides[0] + ky) as isize - pt as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * strides[1] + kx) as isize - pl as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xbase = ((b * h + iy as usize) * w + ix as usize) * cin;
                        for ci in 0..cin {
                            let kbase = ((ky * kw + kx) * cin + ci) * cout;
                            let acc = kd[kbase..kbase + cout]
                                .iter()
                                .zip(g)
                                .fold(T::zero(), |a, (&wv, &gv)| a + wv * gv);
                            out[xbase + ci] = out[xbase + ci] + acc;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(x_shape, out)
}

/// Routes each window's gradient to its first maximal input.
pub fn maxpool2d_vjp<T: Element>(
    x: &Tensor<T>,
    bp: &Tensor<T>,
    pool: [usize; 2],
    strides: [usize; 2],
    padding: Padding,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.len() != 4 {
        return shape_err(format!("maxpool vjp expects rank 4, got {:?}", xs));
    }
    let (batch, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
    let (oh, pt) = conv_geometry(h, pool[0], strides[0], padding)?;
    let (ow, pl) = conv_geometry(w, pool[1], strides[1], padding)?;
    if bp.shape() != [batch, oh, ow, c] {
        return shape_err(format!("maxpool vjp: bp {:?}", bp.shape()));
    }
    let xd = x.data();
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best: Option<(usize, T)> = None;
                    for_each_window_cell(oy, ox, pool, strides, (pt, pl), (h, w), |iy, ix| {
                        let at = ((b * h + iy) * w + ix) * c + ch;
                        match best {
                            Some((_, v)) if xd[at] <= v => {}
                            _ => best = Some((at, xd[at])),
                        }
                    });
                    if let Some((at, _)) = best {
                        let g = bp.data()[((b * oh + oy) * ow + ox) * c + ch];
                        out[at] = out[at] + g;
                    }
                }
            }
        }
    }
    Tensor::new(xs, out)
}

/// Exact vector-Jacobian product of one node: activation mask first, then
/// the node's own operation. Returns one tensor per entry of `xs`.
pub fn vjp<T: Element>(
    node: &LayerNode<T>,
    xs: &[&Tensor<T>],
    ys: &[&Tensor<T>],
    bp_ys: &[Tensor<T>],
) -> Result<Vec<Tensor<T>>> {
    let (y, bp_y) = match (ys, bp_ys) {
        ([y], [bp]) => (*y, bp),
        _ => {
            return shape_err(format!(
                "node `{}`: {} outputs vs {} back-propagated tensors",
                node.name,
                ys.len(),
                bp_ys.len()
            ))
        }
    };
    if y.shape() != bp_y.shape() {
        return shape_err(format!(
            "node `{}`: output {:?} vs back-propagated {:?}",
            node.name,
            y.shape(),
            bp_y.shape()
        ));
    }
    let bp = activation_vjp(node.activation, y, bp_y)?;
    op_vjp(node, xs, y, bp)
}

/// VJP of the node's operation alone, taking the tensor back-propagated onto
/// its pre-activation output. `y` is the node's (post-activation) output.
pub fn op_vjp<T: Element>(
    node: &LayerNode<T>,
    xs: &[&Tensor<T>],
    y: &Tensor<T>,
    bp: Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    let single = || -> Result<&Tensor<T>> {
        match xs {
            [x] => Ok(*x),
            _ => shape_err(format!("node `{}` expects one input", node.name)),
        }
    };
    Ok(match &node.kind {
        LayerKind::Input => vec![bp],
        LayerKind::Dense { .. } | LayerKind::Conv2d { .. } => {
            let (kind, kernel, _) = node.linear().expect("kernel node");
            vec![linear_vjp(kind, &bp, kernel, single()?.shape())?]
        }
        LayerKind::MaxPool2d {
            pool,
            strides,
            padding,
        } => vec![maxpool2d_vjp(single()?, &bp, *pool, *strides, *padding)?],
        LayerKind::Flatten => vec![bp.into_reshaped(single()?.shape())?],
        LayerKind::AddMerge => vec![bp; xs.len()],
        LayerKind::BatchNorm(p) => {
            let (scale, _) = p.scale_shift();
            let c = scale.len().max(1);
            let mut out = bp;
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v = *v * scale[i % c];
            }
            vec![out]
        }
        LayerKind::Softmax => {
            // the kind's own output is the softmax, before any activation
            let s = if node.activation == Activation::None {
                y.clone()
            } else {
                crate::model::layers::softmax_last_axis(single()?)
            };
            vec![softmax_vjp(&s, &bp)?]
        }
    })
}

/// Gradient of output neuron `index` with respect to the input.
pub fn gradient_at(model: &Model, x: &Tensor, index: usize) -> Result<Tensor> {
    let trace = model.forward(x)?;
    let out = trace.output();
    if index >= out.len() {
        return Err(Error::Index(format!("neuron {index} out of range")));
    }
    let mut seed = Tensor::zeros_like(out);
    seed.data_mut()[index] = 1.0;
    backprop(model, &trace, seed)
}

/// Gradient of the selected output neuron with respect to the input.
pub fn gradient(model: &Model, x: &Tensor, sel: NeuronSelector) -> Result<Tensor> {
    let trace = model.forward(x)?;
    let resolved = sel.resolve(trace.output())?;
    backprop(model, &trace, resolved.seed)
}

/// Plain reverse-mode sweep over a recorded trace.
pub fn backprop(model: &Model, trace: &crate::model::ActivationTrace, seed: Tensor) -> Result<Tensor> {
    let n = model.nodes().len();
    let mut grads: Vec<Option<Tensor>> = vec![None; n];
    grads[model.output_index()] = Some(seed);
    for &i in model.order().iter().rev() {
        let Some(g) = grads[i].take() else { continue };
        if i == model.input_index() {
            return Ok(g);
        }
        let node = &model.nodes()[i];
        let xs: Vec<&Tensor> = model.producers(i).iter().map(|&p| trace.value(p)).collect();
        let back = vjp(node, &xs, &[trace.value(i)], std::slice::from_ref(&g))?;
        for (&p, t) in model.producers(i).iter().zip(back) {
            match &mut grads[p] {
                Some(acc) => acc.add_assign(&t)?,
                slot @ None => *slot = Some(t),
            }
        }
    }
    Ok(Tensor::zeros(model.input_shape()))
}

/// Central differences in double precision, neuron index frozen from the
/// unperturbed forward pass.
pub fn finite_diff(model: &Model, x: &Tensor, sel: NeuronSelector, h: f64) -> Result<Tensor<f64>> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("step h must be positive, got {h}")));
    }
    let index = sel.resolve(&model.predict(x)?)?.index;
    finite_diff_at(&model.cast::<f64>(), &x.cast::<f64>(), index, h)
}

pub fn finite_diff_at(model: &Model<f64>, x: &Tensor<f64>, index: usize, h: f64) -> Result<Tensor<f64>> {
    let mut probe = x.clone();
    let mut out = vec![0.0; x.len()];
    for (i, slot) in out.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = model.predict(&probe)?.data()[index];
        probe.data_mut()[i] = orig - h;
        let down = model.predict(&probe)?.data()[index];
        probe.data_mut()[i] = orig;
        *slot = (up - down) / (2.0 * h);
    }
    Tensor::new(x.shape(), out)
}
