//! Per-layer signal patterns: storage, file I/O and the linear estimator.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{decode_weights, encode_weights};
use crate::model::layers::conv_geometry;
use crate::model::{LayerKind, Model};
use crate::tensor::Tensor;

pub const PATTERN_SUFFIX: &str = ".pattern";

/// One tensor per kernel-bearing node, in forward node order, each shaped
/// like that node's kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Patterns {
    entries: Vec<(String, Tensor)>,
}

impl Patterns {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Patterns equal to each layer's kernel.
    pub fn from_kernels(model: &Model) -> Self {
        Self::from_fn(model, |k| k.clone())
    }

    pub fn filled(model: &Model, value: f32) -> Self {
        Self::from_fn(model, |k| Tensor::full(k.shape(), value))
    }

    fn from_fn(model: &Model, f: impl Fn(&Tensor) -> Tensor) -> Self {
        let entries = model
            .nodes()
            .iter()
            .filter_map(|n| n.kernel().map(|k| (n.name.clone(), f(k))))
            .collect();
        Self { entries }
    }

    /// Assigns patterns to kernel nodes, walking the nodes from the back and
    /// taking patterns from the end of the list. Returns one slot per model
    /// node.
    pub fn assign(&self, model: &Model) -> Result<Vec<Option<Tensor>>> {
        let kernel_nodes = model.nodes().iter().filter(|n| n.has_kernel()).count();
        if kernel_nodes != self.entries.len() {
            return Err(incompatible(
                model.output(),
                format!("{} patterns for {} kernel layers", self.entries.len(), kernel_nodes),
            ));
        }
        let mut pool: Vec<&(String, Tensor)> = self.entries.iter().collect();
        let mut out = vec![None; model.nodes().len()];
        for (i, node) in model.nodes().iter().enumerate().rev() {
            let Some(k) = node.kernel() else { continue };
            let (name, p) = pool.pop().expect("counts checked");
            if name != &node.name {
                return Err(incompatible(&node.name, format!("pattern is named `{name}`")));
            }
            if p.shape() != k.shape() {
                return Err(incompatible(
                    &node.name,
                    format!("pattern shape {:?} differs from kernel shape {:?}", p.shape(), k.shape()),
                ));
            }
            out[i] = Some(p.clone());
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let names: Vec<String> = self
            .entries
            .iter()
            .map(|(n, _)| format!("{n}{PATTERN_SUFFIX}"))
            .collect();
        encode_weights(names.iter().map(String::as_str).zip(self.entries.iter().map(|(_, t)| t)))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let entries = decode_weights(bytes)?
            .into_iter()
            .map(|(name, t)| match name.strip_suffix(PATTERN_SUFFIX) {
                Some(layer) => Ok((layer.to_string(), t)),
                None => Err(Error::Format(format!("record `{name}` is not a pattern"))),
            })
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Splits a `(N, ...)` batch into model-shaped samples.
pub fn split_batch(model: &Model, dataset: &Tensor) -> Result<Vec<Tensor>> {
    let inner = &model.input_shape()[1..];
    if dataset.rank() != model.input_shape().len() || &dataset.shape()[1..] != inner {
        return Err(Error::Shape(format!(
            "dataset shape {:?} does not match model input {:?}",
            dataset.shape(),
            model.input_shape()
        )));
    }
    let per: usize = inner.iter().product();
    dataset
        .data()
        .chunks(per.max(1))
        .map(|c| Tensor::new(model.input_shape(), c.to_vec()))
        .collect()
}

/// Layer-input rows and matching output rows for one kernel node:
/// dense gives one pair, convolution one pair per output position (patches
/// laid out like the kernel's leading axes, zero padded).
fn rows_for(kind: &LayerKind, x: &Tensor, y: &Tensor, mut f: impl FnMut(&[f64], &[f64])) {
    match kind {
        LayerKind::Dense { .. } => {
            let xs: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
            let ys: Vec<f64> = y.data().iter().map(|&v| v as f64).collect();
            f(&xs, &ys);
        }
        LayerKind::Conv2d {
            kernel,
            strides,
            padding,
            ..
        } => {
            let (ks, xsh) = (kernel.shape(), x.shape());
            let (h, w, cin) = (xsh[1], xsh[2], xsh[3]);
            let (kh, kw, cout) = (ks[0], ks[1], ks[3]);
            let (oh, pt) = conv_geometry(h, kh, strides[0], *padding).unwrap_or((0, 0));
            let (ow, pl) = conv_geometry(w, kw, strides[1], *padding).unwrap_or((0, 0));
            let mut patch = vec![0f64; kh * kw * cin];
            let mut out = vec![0f64; cout];
            for oy in 0..oh {
                for ox in 0..ow {
                    patch.fill(0.0);
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
                            let src = ((iy as usize) * w + ix as usize) * cin;
                            let dst = (ky * kw + kx) * cin;
                            for ci in 0..cin {
                                patch[dst + ci] = x.data()[src + ci] as f64;
                            }
                        }
                    }
                    let at = (oy * ow + ox) * cout;
                    for (o, &v) in out.iter_mut().zip(&y.data()[at..at + cout]) {
                        *o = v as f64;
                    }
                    f(&patch, &out);
                }
            }
        }
        _ => {}
    }
}

/// Fits `a_j = cov(x, y_j) / (w_j^T cov(x, y_j))` per kernel node and output
/// unit over the dataset (layer inputs `x`, pre-activation outputs `y`).
/// Degenerate units get a zero pattern.
pub fn estimate_patterns_linear(model: &Model, dataset: &Tensor) -> Result<Patterns> {
    let samples = split_batch(model, dataset)?;
    if samples.is_empty() {
        return Err(Error::Config("pattern estimation needs a nonempty dataset".into()));
    }
    let kernel_nodes: Vec<usize> = (0..model.nodes().len())
        .filter(|&i| model.nodes()[i].has_kernel())
        .collect();

    struct Acc {
        n: f64,
        sx: Vec<f64>,
        sy: Vec<f64>,
        cxy: Vec<f64>,
    }
    let mut accs: Vec<Acc> = kernel_nodes
        .iter()
        .map(|&i| {
            let k = model.nodes()[i].kernel().expect("kernel node").shape();
            let (d_in, d_out) = (k[..k.len() - 1].iter().product::<usize>(), k[k.len() - 1]);
            Acc {
                n: 0.0,
                sx: vec![0.0; d_in],
                sy: vec![0.0; d_out],
                cxy: vec![0.0; d_in * d_out],
            }
        })
        .collect();

    // first pass: means
    let traces: Vec<_> = samples.iter().map(|s| model.forward(s)).collect::<Result<_>>()?;
    let layer_io = |trace: &crate::model::ActivationTrace, i: usize| {
        let x = trace.value(model.producers(i)[0]);
        let y = trace.pre_activation(i).unwrap_or_else(|| trace.value(i));
        (x.clone(), y.clone())
    };
    for trace in &traces {
        for (acc, &i) in accs.iter_mut().zip(&kernel_nodes) {
            let (x, y) = layer_io(trace, i);
            rows_for(&model.nodes()[i].kind, &x, &y, |xr, yr| {
                acc.n += 1.0;
                acc.sx.iter_mut().zip(xr).for_each(|(s, v)| *s += v);
                acc.sy.iter_mut().zip(yr).for_each(|(s, v)| *s += v);
            });
        }
    }
    let means: Vec<(Vec<f64>, Vec<f64>)> = accs
        .iter()
        .map(|a| {
            (
                a.sx.iter().map(|s| s / a.n).collect(),
                a.sy.iter().map(|s| s / a.n).collect(),
            )
        })
        .collect();

    // second pass: centred cross-covariance
    for trace in &traces {
        for ((acc, &i), (mx, my)) in accs.iter_mut().zip(&kernel_nodes).zip(&means) {
            let (x, y) = layer_io(trace, i);
            let d_out = my.len();
            rows_for(&model.nodes()[i].kind, &x, &y, |xr, yr| {
                for (p, (&xv, &m)) in xr.iter().zip(mx).enumerate() {
                    let dx = xv - m;
                    if dx == 0.0 {
                        continue;
                    }
                    for j in 0..d_out {
                        acc.cxy[p * d_out + j] += dx * (yr[j] - my[j]);
                    }
                }
            });
        }
    }

    let entries = kernel_nodes
        .iter()
        .zip(&accs)
        .map(|(&i, acc)| {
            let node = &model.nodes()[i];
            let k = node.kernel().expect("kernel node");
            let d_out = acc.sy.len();
            let d_in = acc.sx.len();
            let mut pattern = vec![0f32; d_in * d_out];
            for j in 0..d_out {
                let cov: Vec<f64> = (0..d_in).map(|p| acc.cxy[p * d_out + j] / acc.n).collect();
                let denom: f64 = (0..d_in).map(|p| k.data()[p * d_out + j] as f64 * cov[p]).sum();
                let scale = cov.iter().map(|c| c.abs()).fold(0.0, f64::max)
                    * (0..d_in).map(|p| (k.data()[p * d_out + j] as f64).abs()).sum::<f64>();
                if denom.abs() <= 1e-12 * scale || denom == 0.0 {
                    continue;
                }
                for p in 0..d_in {
                    pattern[p * d_out + j] = (cov[p] / denom) as f32;
                }
            }
            Ok((node.name.clone(), Tensor::new(k.shape(), pattern)?))
        })
        .collect::<Result<_>>()?;
    Ok(Patterns { entries })
}

fn incompatible(node: &str, requirement: String) -> Error {
    Error::Incompatible {
        node: node.to_string(),
        mapping: "pattern".to_string(),
        requirement,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_reference_model, LayerNode, ReferenceKind};
    use crate::rng::XorShift64Star;

    fn dense_model(w: &[f32]) -> Model {
        Model::new(
            vec![
                LayerNode::new("x", LayerKind::Input, &[]),
                LayerNode::new(
                    "d",
                    LayerKind::Dense {
                        kernel: Tensor::new(&[w.len(), 1], w.to_vec()).unwrap(),
                        bias: None,
                    },
                    &["x"],
                ),
            ],
            &[1, w.len()],
            (-1.0, 1.0),
            "d",
        )
        .unwrap()
    }

    #[test]
    fn recovers_generative_pattern() {
        // w = (1, 1, 0), noise direction (1, -1, 0) and (0, 0, 1) are orthogonal to w
        let w = [1.0f32, 1.0, 0.0];
        let a = [2.0f64, 0.5, 1.0];
        let m = dense_model(&w);
        let mut r = XorShift64Star::new(3);
        let n = 10_000;
        let mut data = Vec::with_capacity(n * 3);
        for _ in 0..n {
            let s = r.next_normal();
            let e1 = r.next_normal();
            let e2 = r.next_normal();
            data.push((a[0] * s + e1) as f32);
            data.push((a[1] * s - e1) as f32);
            data.push((a[2] * s + e2) as f32);
        }
        let p = estimate_patterns_linear(&m, &Tensor::new(&[n, 3], data).unwrap()).unwrap();
        let got = p.entries()[0].1.data();
        let wa: f64 = a[0] + a[1];
        for i in 0..3 {
            assert!((got[i] as f64 - a[i] / wa).abs() < 1e-2, "{i}: {} vs {}", got[i], a[i] / wa);
        }
        let dot: f32 = got.iter().zip(&w).map(|(x, y)| x * y).sum();
        assert!((dot - 1.0).abs() < 1e-4);
    }

    #[test]
    fn degenerate_datasets_give_zero_patterns() {
        let m = make_reference_model(ReferenceKind::Mlp, 1);
        let one: Vec<f32> = (0..256).map(|i| (i as f32 / 256.0) - 0.5).collect();
        let single = Tensor::new(&[1, 16, 16, 1], one.clone()).unwrap();
        let p = estimate_patterns_linear(&m, &single).unwrap();
        assert!(p.entries().iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
        let repeated = Tensor::new(&[5, 16, 16, 1], one.repeat(5)).unwrap();
        let p = estimate_patterns_linear(&m, &repeated).unwrap();
        assert!(p.entries().iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
        assert!(matches!(
            estimate_patterns_linear(&m, &Tensor::new(&[0, 16, 16, 1], vec![]).unwrap()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn conv_patterns_have_kernel_shape() {
        let m = make_reference_model(ReferenceKind::Cnn, 1).strip_softmax().unwrap();
        let mut r = XorShift64Star::new(9);
        let data: Vec<f32> = (0..8 * 256).map(|_| r.uniform(-1.0, 1.0) as f32).collect();
        let p = estimate_patterns_linear(&m, &Tensor::new(&[8, 16, 16, 1], data).unwrap()).unwrap();
        let slots = p.assign(&m).unwrap();
        assert_eq!(slots.iter().filter(|s| s.is_some()).count(), 3);
        assert!(p.entries().iter().any(|(_, t)| t.data().iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn file_round_trip_and_mismatch() {
        let m = make_reference_model(ReferenceKind::Mlp, 2);
        let p = Patterns::from_kernels(&m);
        let back = Patterns::from_bytes(&p.to_bytes()).unwrap();
        assert_eq!(p, back);
        let mut short = p.entries().to_vec();
        short.pop();
        assert!(matches!(Patterns::new(short).assign(&m), Err(Error::Incompatible { .. })));
        let mut bad = p.entries().to_vec();
        bad[0].1 = Tensor::zeros(&[2, 2]);
        assert!(matches!(Patterns::new(bad).assign(&m), Err(Error::Incompatible { .. })));
    }
}
