//! Backward mappings for the propagation methods.
//!
//! Relevance rules (Z+, bounded, epsilon, alpha-beta) treat a kernel node's
//! activation as pass-through and redistribute the relevance arriving at
//! the node output onto its input. Kernel-derived tensors (positive and
//! negative parts, copied layers) are computed once when a rule is built
//! for a model, so a compiled plan does no per-input weight work.

use crate::autodiff::{self, linear_vjp, op_vjp};
use crate::backend::{BackwardMapping, BpState, Requirement};
use crate::error::{shape_err, Error, Result};
use crate::model::layers::{conv_geometry, eval_linear_part, layer_eval, linear_forward};
use crate::model::{Activation, LayerNode, LinearKind, Model, Padding};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f32 = 1e-7;

fn single<'a>(xs: &[&'a Tensor], node: &LayerNode) -> Result<&'a Tensor> {
    match xs {
        [x] => Ok(*x),
        _ => shape_err(format!("node `{}` expects one input", node.name)),
    }
}

fn single_bp<'a>(bp_ys: &'a [Tensor], node: &LayerNode) -> Result<&'a Tensor> {
    match bp_ys {
        [r] => Ok(r),
        _ => shape_err(format!("node `{}` expects one back-propagated tensor", node.name)),
    }
}

fn kernel_parts(node: &LayerNode) -> Option<(Tensor, Tensor)> {
    let k = node.kernel()?;
    Some((k.map(|v| v.max(0.0)), k.map(|v| v.min(0.0))))
}

/// Per-node positive/negative kernel parts, indexed like the model nodes.
#[derive(Debug, Clone)]
struct SignedKernels {
    plus: Vec<Option<Tensor>>,
    minus: Vec<Option<Tensor>>,
}

impl SignedKernels {
    fn new(model: &Model) -> Self {
        let (plus, minus) = model
            .nodes()
            .iter()
            .map(|n| match kernel_parts(n) {
                Some((p, m)) => (Some(p), Some(m)),
                None => (None, None),
            })
            .unzip();
        Self { plus, minus }
    }

    fn plus(&self, state: &BpState<'_>) -> Result<&Tensor> {
        self.plus
            .get(state.node_index)
            .and_then(|t| t.as_ref())
            .ok_or_else(|| missing(state))
    }

    fn minus(&self, state: &BpState<'_>) -> Result<&Tensor> {
        self.minus
            .get(state.node_index)
            .and_then(|t| t.as_ref())
            .ok_or_else(|| missing(state))
    }
}

fn missing(state: &BpState<'_>) -> Error {
    Error::InvalidModel(format!(
        "rule has no prepared kernel for node `{}`",
        state.node.name
    ))
}

fn linear_kind(node: &LayerNode) -> Result<LinearKind> {
    node.linear()
        .map(|(k, _, _)| k)
        .ok_or_else(|| Error::InvalidModel(format!("node `{}` has no kernel", node.name)))
}

/// `x * vjp_W(s)` for one kernel.
fn weighted_vjp(kind: LinearKind, s: &Tensor, w: &Tensor, x: &Tensor) -> Result<Tensor> {
    x.mul(&linear_vjp(kind, s, w, x.shape())?)
}

/// Backward relu on the incoming stream, then the exact VJP (forward mask
/// included).
#[derive(Debug, Clone, Copy, Default)]
pub struct GuidedRelu;

impl BackwardMapping for GuidedRelu {
    fn apply(&self, xs: &[&Tensor], ys: &[&Tensor], bp_ys: &[Tensor], state: &BpState<'_>) -> Result<Vec<Tensor>> {
        let r: Vec<Tensor> = bp_ys.iter().map(|t| t.map(|v| v.max(0.0))).collect();
        autodiff::vjp(state.node, xs, ys, &r)
    }
}

/// Backward relu on the incoming stream, forward mask ignored.
#[derive(Debug, Clone, Copy, Default)]
pub struct DeconvRelu;

impl BackwardMapping for DeconvRelu {
    fn apply(&self, xs: &[&Tensor], ys: &[&Tensor], bp_ys: &[Tensor], state: &BpState<'_>) -> Result<Vec<Tensor>> {
        let bp = single_bp(bp_ys, state.node)?;
        let y = ys.first().copied().unwrap_or(bp);
        op_vjp(state.node, xs, y, bp.map(|v| v.max(0.0)))
    }
}

/// Which of the two shipped Z+ implementations to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ZPlusForm {
    /// Hand-written matrix form for dense layers and a gather-style
    /// transposed correlation for convolutions.
    #[default]
    Explicit,
    /// Forward a bias-free copy of the layer with the positive kernel, then
    /// reuse the layer's own VJP.
    AutodiffTrick,
}

/// `x * (W+^T z)` with `z = r / (x W+)`, bias excluded.
#[derive(Debug, Clone)]
pub struct ZPlus {
    eps: f32,
    form: ZPlusForm,
    kernels: SignedKernels,
    copies: Vec<Option<LayerNode>>,
}

impl ZPlus {
    pub fn new(model: &Model, eps: f32, form: ZPlusForm) -> Self {
        let kernels = SignedKernels::new(model);
        let copies = match form {
            ZPlusForm::Explicit => vec![None; model.nodes().len()],
            ZPlusForm::AutodiffTrick => model
                .nodes()
                .iter()
                .zip(&kernels.plus)
                .map(|(n, p)| p.as_ref().and_then(|p| n.linear_copy(p.clone(), None)))
                .collect(),
        };
        Self {
            eps,
            form,
            kernels,
            copies,
        }
    }
}

impl BackwardMapping for ZPlus {
    fn apply(&self, xs: &[&Tensor], _: &[&Tensor], bp_ys: &[Tensor], state: &BpState<'_>) -> Result<Vec<Tensor>> {
        let x = single(xs, state.node)?;
        let r = single_bp(bp_ys, state.node)?;
        let out = match self.form {
            ZPlusForm::Explicit => {
                zplus_explicit(linear_kind(state.node)?, x, self.kernels.plus(state)?, r, self.eps)?
            }
            ZPlusForm::AutodiffTrick => {
                let copy = self.copies[state.node_index].as_ref().ok_or_else(|| missing(state))?;
                let z = layer_eval(copy, &[x])?;
                let s = Tensor::safe_divide(r, &z, self.eps)?;
                let g = autodiff::vjp(copy, &[x], &[&z], &[s])?.remove(0);
                x.mul(&g)?
            }
        };
        Ok(vec![out])
    }

    fn requirement(&self) -> Requirement {
        Requirement::Kernel
    }
}

/// Explicit Z+ redistribution for one layer with a precomputed positive
/// kernel.
pub fn zplus_explicit(kind: LinearKind, x: &Tensor, w_plus: &Tensor, r: &Tensor, eps: f32) -> Result<Tensor> {
    match kind {
        LinearKind::Dense => {
            let ks = w_plus.shape();
            if x.rank() != 2 || ks.len() != 2 || x.shape()[1] != ks[0] || r.shape() != [x.shape()[0], ks[1]] {
                return shape_err(format!(
                    "z+ dense: x {:?}, kernel {:?}, relevance {:?}",
                    x.shape(),
                    ks,
                    r.shape()
                ));
            }
            let (batch, n_in, n_out) = (x.shape()[0], ks[0], ks[1]);
            let (xd, wd, rd) = (x.data(), w_plus.data(), r.data());
            let mut out = vec![0f32; batch * n_in];
            for b in 0..batch {
                let xr = &xd[b * n_in..(b + 1) * n_in];
                let mut s = vec![0f32; n_out];
                for (j, sj) in s.iter_mut().enumerate() {
                    let z: f32 = (0..n_in).map(|i| xr[i] * wd[i * n_out + j]).sum();
                    let z = z + eps * if z >= 0.0 { 1.0 } else { -1.0 };
                    *sj = rd[b * n_out + j] / z;
                }
                for i in 0..n_in {
                    let c: f32 = (0..n_out).map(|j| wd[i * n_out + j] * s[j]).sum();
                    out[b * n_in + i] = xr[i] * c;
                }
            }
            Tensor::new(x.shape(), out)
        }
        LinearKind::Conv2d { strides, padding } => {
            let z = linear_forward(kind, x, w_plus, None)?;
            let s = Tensor::safe_divide(r, &z, eps)?;
            let c = conv_transpose_gather(&s, w_plus, x.shape(), strides, padding)?;
            x.mul(&c)
        }
    }
}

/// Transposed cross-correlation written input-centric: every input cell
/// gathers the output cells whose window covers it.
pub fn conv_transpose_gather(
    s: &Tensor,
    kernel: &Tensor,
    x_shape: &[usize],
    strides: [usize; 2],
    padding: Padding,
) -> Result<Tensor> {
    let ks = kernel.shape();
    if x_shape.len() != 4 || ks.len() != 4 {
        return shape_err(format!("conv transpose: input {:?}, kernel {:?}", x_shape, ks));
    }
    let (batch, h, w, cin) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (kh, kw, cout) = (ks[0], ks[1], ks[3]);
    let (oh, pt) = conv_geometry(h, kh, strides[0], padding)?;
    let (ow, pl) = conv_geometry(w, kw, strides[1], padding)?;
    if s.shape() != [batch, oh, ow, cout] {
        return shape_err(format!("conv transpose: output {:?}", s.shape()));
    }
    let (sd, kd) = (s.data(), kernel.data());
    let mut out = vec![0f32; batch * h * w * cin];
    for b in 0..batch {
        for iy in 0..h {
            for ix in 0..w {
                for ci in 0..cin {
                    let mut acc = 0f32;
                    for ky in 0..kh {
                        let num = iy + pt;
                        if num < ky || (num - ky) % strides[0] != 0 {
                            continue;
                        }
                        let oy = (num - ky) / strides[0];
                        if oy >= oh {
                            continue;
                        }
                        for kx in 0..kw {
                            let num = ix + pl;
                            if num < kx || (num - kx) % strides[1] != 0 {
                                continue;
                            }
                            let ox = (num - kx) / strides[1];
                            if ox >= ow {
                                continue;
                            }
                            let sbase = ((b * oh + oy) * ow + ox) * cout;
                            let kbase = ((ky * kw + kx) * cin + ci) * cout;
                            for co in 0..cout {
                                acc += kd[kbase + co] * sd[sbase + co];
                            }
                        }
                    }
                    out[((b * h + iy) * w + ix) * cin + ci] = acc;
                }
            }
        }
    }
    Tensor::new(x_shape, out)
}

/// Bounded-input rule: `z_ij = x_i w_ij - l_i w+_ij - h_i w-_ij`, relevance
/// split in proportion to `z`, bias excluded.
#[derive(Debug, Clone)]
pub struct Bounded {
    low: f32,
    high: f32,
    eps: f32,
    kernels: SignedKernels,
}

impl Bounded {
    pub fn new(model: &Model, eps: f32) -> Self {
        let (low, high) = model.input_range();
        Self {
            low,
            high,
            eps,
            kernels: SignedKernels::new(model),
        }
    }
}

impl BackwardMapping for Bounded {
    fn apply(&self, xs: &[&Tensor], _: &[&Tensor], bp_ys: &[Tensor], state: &BpState<'_>) -> Result<Vec<Tensor>> {
        let x = single(xs, state.node)?;
        let r = single_bp(bp_ys, state.node)?;
        let (kind, w, _) = state.node.linear().ok_or_else(|| missing(state))?;
        let (wp, wm) = (self.kernels.plus(state)?, self.kernels.minus(state)?);
        let l = Tensor::full(x.shape(), self.low);
        let h = Tensor::full(x.shape(), self.high);
        let z = linear_forward(kind, x, w, None)?
            .sub(&linear_forward(kind, &l, wp, None)?)?
            .sub(&linear_forward(kind, &h, wm, None)?)?;
        let s = Tensor::safe_divide(r, &z, self.eps)?;
        let out = weighted_vjp(kind, &s, w, x)?
            .sub(&weighted_vjp(kind, &s, wp, &l)?)?
            .sub(&weighted_vjp(kind, &s, wm, &h)?)?;
        Ok(vec![out])
    }

    fn requirement(&self) -> Requirement {
        Requirement::Kernel
    }
}

/// `x * vjp_W(r / z)` with the full signed pre-activation `z` (bias
/// included).
#[derive(Debug, Clone, Copy)]
pub struct Epsilon {
    pub eps: f32,
}

impl BackwardMapping for Epsilon {
    fn apply(&self, xs: &[&Tensor], _: &[&Tensor], bp_ys: &[Tensor], state: &BpState<'_>) -> Result<Vec<Tensor>> {
        let x = single(xs, state.node)?;
        let r = single_bp(bp_ys, state.node)?;
        let (kind, w, _) = state.node.linear().ok_or_else(|| missing(state))?;
        let z = eval_linear_part(state.node, &[x])?;
        let s = Tensor::safe_divide(r, &z, self.eps)?;
        Ok(vec![weighted_vjp(kind, &s, w, x)?])
    }

    fn requirement(&self) -> Requirement {
        Requirement::Kernel
    }
}

/// `alpha * x vjp_W+(r / z+) - beta * x vjp_W-(r / z-)`, bias excluded.
#[derive(Debug, Clone)]
pub struct AlphaBeta {
    alpha: f32,
    beta: f32,
    eps: f32,
    kernels: SignedKernels,
}

impl AlphaBeta {
    pub fn new(model: &Model, alpha: f32, beta: f32, eps: f32) -> Result<Self> {
        check_alpha_beta(alpha, beta)?;
        Ok(Self {
            alpha,
            beta,
            eps,
            kernels: SignedKernels::new(model),
        })
    }
}

pub fn check_alpha_beta(alpha: f32, beta: f32) -> Result<()> {
    if ((alpha - beta) - 1.0).abs() > 1e-6 || beta < 0.0 {
        return Err(Error::Config(format!(
            "alpha - beta must equal 1 with beta >= 0 (got alpha={alpha}, beta={beta})"
        )));
    }
    Ok(())
}

impl BackwardMapping for AlphaBeta {
    fn apply(&self, xs: &[&Tensor], _: &[&Tensor], bp_ys: &[Tensor], state: &BpState<'_>) -> Result<Vec<Tensor>> {
        let x = single(xs, state.node)?;
        let r = single_bp(bp_ys, state.node)?;
        let kind = linear_kind(state.node)?;
        let part = |w: &Tensor| -> Result<Tensor> {
            let z = linear_forward(kind, x, w, None)?;
            let s = Tensor::safe_divide(r, &z, self.eps)?;
            weighted_vjp(kind, &s, w, x)
        };
        let mut out = part(self.kernels.plus(state)?)?.scale(self.alpha);
        if self.beta != 0.0 {
            out = out.sub(&part(self.kernels.minus(state)?)?.scale(self.beta))?;
        }
        Ok(vec![out])
    }

    fn requirement(&self) -> Requirement {
        Requirement::Kernel
    }
}

/// Gradient pass through a kernel node with its kernel exchanged for a
/// per-node substitute (bias dropped); relu as `where(Y > 0, bp, 0)`.
#[derive(Debug, Clone)]
pub struct SubstitutedKernel {
    kernels: Vec<Option<Tensor>>,
}

impl SubstitutedKernel {
    /// `kernels` is indexed like the model nodes.
    pub fn new(kernels: Vec<Option<Tensor>>) -> Self {
        Self { kernels }
    }
}

impl BackwardMapping for SubstitutedKernel {
    fn apply(&self, xs: &[&Tensor], ys: &[&Tensor], bp_ys: &[Tensor], state: &BpState<'_>) -> Result<Vec<Tensor>> {
        let x = single(xs, state.node)?;
        let bp = single_bp(bp_ys, state.node)?;
        let y = ys.first().copied().unwrap_or(bp);
        let bp = match state.node.activation {
            Activation::Relu => y.zip_map(bp, |yv, g| if yv > 0.0 { g } else { 0.0 })?,
            _ => autodiff::activation_vjp(state.node.activation, y, bp)?,
        };
        let kind = linear_kind(state.node)?;
        let k = self
            .kernels
            .get(state.node_index)
            .and_then(|k| k.as_ref())
            .ok_or_else(|| missing(state))?;
        Ok(vec![linear_vjp(kind, &bp, k, x.shape())?])
    }

    fn requirement(&self) -> Requirement {
        Requirement::Kernel
    }
}
