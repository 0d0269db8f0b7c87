//! Forward semantics of individual layers.

use crate::error::{shape_err, Result};
use crate::tensor::{Element, Tensor};

use super::{Activation, BatchNormParams, LayerKind, LayerNode, Padding};

/// Output extent and leading pad for one spatial axis.
///
/// `same`: output `ceil(in / stride)`, total pad
/// `max(0, (out - 1) * stride + k - in)` split floor before / ceil after.
/// `valid`: output `floor((in - k) / stride) + 1`, no pad.
pub fn conv_geometry(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    if stride == 0 || kernel == 0 {
        return shape_err("kernel and stride extents must be positive");
    }
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out.max(1) - 1) * stride + kernel).saturating_sub(input);
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if kernel > input {
                return shape_err(format!(
                    "window {} larger than input extent {} with valid padding",
                    kernel, input
                ));
            }
            Ok(((input - kernel) / stride + 1, 0))
        }
    }
}

/// The linear part of a kernel-bearing layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearKind {
    Dense,
    Conv2d {
        strides: [usize; 2],
        padding: Padding,
    },
}

/// `x W (+ b)` for dense, cross-correlation `(+ b)` for conv2d.
pub fn linear_forward<T: Element>(
    kind: LinearKind,
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    match kind {
        LinearKind::Dense => dense_forward(x, kernel, bias),
        LinearKind::Conv2d { strides, padding } => conv2d_forward(x, kernel, bias, strides, padding),
    }
}

pub fn dense_forward<T: Element>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (xs, ks) = (x.shape(), kernel.shape());
    if xs.len() != 2 || ks.len() != 2 || xs[1] != ks[0] {
        return shape_err(format!("dense: input {:?} vs kernel {:?}", xs, ks));
    }
    let (batch, n_in, n_out) = (xs[0], ks[0], ks[1]);
    if let Some(b) = bias {
        if b.shape() != [n_out] {
            return shape_err(format!("dense: bias {:?} vs {} outputs", b.shape(), n_out));
        }
    }
    let (xd, kd) = (x.data(), kernel.data());
    let mut out = vec![T::zero(); batch * n_out];
    for bi in 0..batch {
        let row = &mut out[bi * n_out..(bi + 1) * n_out];
        if let Some(b) = bias {
            row.copy_from_slice(b.data());
        }
        for i in 0..n_in {
            let xv = xd[bi * n_in + i];
            if xv == T::zero() {
                continue;
            }
            let krow = &kd[i * n_out..(i + 1) * n_out];
            for (o, &w) in row.iter_mut().zip(krow) {
                *o = *o + xv * w;
            }
        }
    }
    Tensor::new(&[batch, n_out], out)
}

pub fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    strides: [usize; 2],
    padding: Padding,
) -> Result<Tensor<T>> {
    let (xs, ks) = (x.shape(), kernel.shape());
    if xs.len() != 4 || ks.len() != 4 || xs[3] != ks[2] {
        return shape_err(format!("conv2d: input {:?} vs kernel {:?}", xs, ks));
    }
    let (batch, h, w, cin) = (xs[0], xs[1], xs[2], xs[3]);
    let (kh, kw, cout) = (ks[0], ks[1], ks[3]);
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return shape_err(format!("conv2d: bias {:?} vs {} filters", b.shape(), cout));
        }
    }
    let (oh, pt) = conv_geometry(h, kh, strides[0], padding)?;
    let (ow, pl) = conv_geometry(w, kw, strides[1], padding)?;
    let (xd, kd) = (x.data(), kernel.data());
    let mut out = vec![T::zero(); batch * oh * ow * cout];
    for bi in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = ((bi * oh + oy) * ow + ox) * cout;
                let acc = &mut out[base..base + cout];
                if let Some(b) = bias {
                    acc.copy_from_slice(b.data());
                }
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
                        let xbase = ((bi * h + iy as usize) * w + ix as usize) * cin;
                        for ci in 0..cin {
                            let xv = xd[xbase + ci];
                            let kbase = ((ky * kw + kx) * cin + ci) * cout;
                            for (a, &wv) in acc.iter_mut().zip(&kd[kbase..kbase + cout]) {
                                *a = *a + xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[batch, oh, ow, cout], out)
}

/// Windowed max. Padded positions never win.
pub fn maxpool2d_forward<T: Element>(
    x: &Tensor<T>,
    pool: [usize; 2],
    strides: [usize; 2],
    padding: Padding,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.len() != 4 {
        return shape_err(format!("maxpool2d expects rank 4, got {:?}", xs));
    }
    let (batch, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
    let (oh, pt) = conv_geometry(h, pool[0], strides[0], padding)?;
    let (ow, pl) = conv_geometry(w, pool[1], strides[1], padding)?;
    let xd = x.data();
    let mut out = vec![T::neg_infinity(); batch * oh * ow * c];
    for bi in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = T::neg_infinity();
                    for_each_window_cell(oy, ox, pool, strides, (pt, pl), (h, w), |iy, ix| {
                        let v = xd[((bi * h + iy) * w + ix) * c + ch];
                        if v > best {
                            best = v;
                        }
                    });
                    out[((bi * oh + oy) * ow + ox) * c + ch] = best;
                }
            }
        }
    }
    Tensor::new(&[batch, oh, ow, c], out)
}

/// Visits in-bounds cells of one pooling window in row-major order.
pub(crate) fn for_each_window_cell(
    oy: usize,
    ox: usize,
    pool: [usize; 2],
    strides: [usize; 2],
    pads: (usize, usize),
    extent: (usize, usize),
    mut f: impl FnMut(usize, usize),
) {
    for py in 0..pool[0] {
        let iy = (oy * strides[0] + py) as isize - pads.0 as isize;
        if iy < 0 || iy >= extent.0 as isize {
            continue;
        }
        for px in 0..pool[1] {
            let ix = (ox * strides[1] + px) as isize - pads.1 as isize;
            if ix < 0 || ix >= extent.1 as isize {
                continue;
            }
            f(iy as usize, ix as usize);
        }
    }
}

pub fn batchnorm_forward<T: Element>(x: &Tensor<T>, p: &BatchNormParams<T>) -> Result<Tensor<T>> {
    let c = *x.shape().last().unwrap_or(&0);
    if p.mean.shape() != [c] {
        return shape_err(format!("batchnorm: params {:?} vs {} channels", p.mean.shape(), c));
    }
    let (scale, shift) = p.scale_shift();
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let ch = i % c;
        *v = *v * scale[ch] + shift[ch];
    }
    Ok(out)
}

/// Exp-normalize over the last axis.
pub fn softmax_last_axis<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let c = *x.shape().last().unwrap_or(&1);
    let mut out = x.clone();
    if c == 0 {
        return out;
    }
    for row in out.data_mut().chunks_mut(c) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    out
}

pub fn apply_activation<T: Element>(act: Activation, pre: &Tensor<T>) -> Tensor<T> {
    match act {
        Activation::None => pre.clone(),
        Activation::Relu => pre.map(|v| if v > T::zero() { v } else { T::zero() }),
        Activation::Softmax => softmax_last_axis(pre),
    }
}

/// Evaluates the node's own operation, before its activation.
pub fn eval_linear_part<T: Element>(node: &LayerNode<T>, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let single = || -> Result<&Tensor<T>> {
        match inputs {
            [x] => Ok(*x),
            _ => shape_err(format!(
                "node `{}` expects one input, got {}",
                node.name,
                inputs.len()
            )),
        }
    };
    match &node.kind {
        LayerKind::Input => Ok(single()?.clone()),
        LayerKind::Dense { kernel, bias } => dense_forward(single()?, kernel, bias.as_ref()),
        LayerKind::Conv2d {
            kernel,
            bias,
            strides,
            padding,
        } => conv2d_forward(single()?, kernel, bias.as_ref(), *strides, *padding),
        LayerKind::MaxPool2d {
            pool,
            strides,
            padding,
        } => maxpool2d_forward(single()?, *pool, *strides, *padding),
        LayerKind::Flatten => {
            let x = single()?;
            let batch = x.shape().first().copied().unwrap_or(1);
            let rest = if batch == 0 { 0 } else { x.len() / batch };
            x.reshape(&[batch, rest])
        }
        LayerKind::AddMerge => {
            let (first, rest) = inputs
                .split_first()
                .ok_or_else(|| crate::Error::Shape(format!("add_merge `{}` has no inputs", node.name)))?;
            let mut acc = (*first).clone();
            for t in rest {
                acc.add_assign(t)?;
            }
            Ok(acc)
        }
        LayerKind::BatchNorm(p) => batchnorm_forward(single()?, p),
        LayerKind::Softmax => Ok(softmax_last_axis(single()?)),
    }
}

/// Full layer evaluation: operation then activation.
pub fn layer_eval<T: Element>(node: &LayerNode<T>, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let pre = eval_linear_part(node, inputs)?;
    Ok(match node.activation {
        Activation::None => pre,
        act => apply_activation(act, &pre),
    })
}
