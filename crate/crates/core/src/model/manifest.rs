//! JSON manifest + `XWTS` weight container.
//!
//! ```json
//! {"input_shape":[1,16,16,1], "input_range":[-1,1], "output":"logits",
//!  "layers":[{"name":"conv","kind":"conv2d","activation":"relu","inputs":["input"],
//!             "strides":[1,1],"padding":"same","weights":"conv.kernel","bias":"conv.bias"}]}
//! ```
//!
//! Batchnorm layers reference their statistics through `mean`, `variance`,
//! `gamma` and `beta` weight names plus a numeric `eps`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Activation, BatchNormParams, LayerKind, LayerNode, Model, Padding};
use crate::error::{Error, Result};
use crate::io::{decode_weights, encode_weights};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Fold batchnorm layers into the preceding dense/conv layer.
    pub fold_batchnorm: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    input_shape: Vec<usize>,
    input_range: [f32; 2],
    output: String,
    layers: Vec<LayerSpec>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerSpec {
    name: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    activation: Option<String>,
    #[serde(default)]
    inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    strides: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pool: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mean: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    variance: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gamma: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    beta: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eps: Option<f32>,
}

fn pair(v: &Option<Vec<usize>>, default: [usize; 2], what: &str, layer: &str) -> Result<[usize; 2]> {
    match v.as_deref() {
        None => Ok(default),
        Some([a, b]) => Ok([*a, *b]),
        Some(other) => Err(Error::Format(format!(
            "layer `{layer}`: {what} needs two entries, got {other:?}"
        ))),
    }
}

fn parse_padding(p: &Option<String>, layer: &str) -> Result<Padding> {
    match p.as_deref() {
        None | Some("valid") => Ok(Padding::Valid),
        Some("same") => Ok(Padding::Same),
        Some(other) => Err(Error::Format(format!("layer `{layer}`: unknown padding `{other}`"))),
    }
}

fn padding_name(p: Padding) -> String {
    match p {
        Padding::Same => "same".into(),
        Padding::Valid => "valid".into(),
    }
}

fn parse_activation(a: &Option<String>, layer: &str) -> Result<Activation> {
    match a.as_deref() {
        None | Some("none") | Some("linear") => Ok(Activation::None),
        Some("relu") => Ok(Activation::Relu),
        Some("softmax") => Ok(Activation::Softmax),
        Some(other) => Err(Error::Format(format!(
            "layer `{layer}`: unknown activation `{other}`"
        ))),
    }
}

fn activation_name(a: Activation) -> Option<String> {
    match a {
        Activation::None => None,
        Activation::Relu => Some("relu".into()),
        Activation::Softmax => Some("softmax".into()),
    }
}

/// Reads and validates a model from a manifest and its weight container.
pub fn load_model(
    manifest: impl AsRef<Path>,
    weights: impl AsRef<Path>,
    options: LoadOptions,
) -> Result<Model> {
    let m = fs::read(manifest)?;
    let w = fs::read(weights)?;
    load_model_bytes(&m, &w, options)
}

pub fn load_model_bytes(manifest: &[u8], weights: &[u8], options: LoadOptions) -> Result<Model> {
    let manifest: Manifest = serde_json::from_slice(manifest)
        .map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let weights: HashMap<String, Tensor> = decode_weights(weights)?.into_iter().collect();
    let fetch = |name: &Option<String>, layer: &str, what: &str| -> Result<Tensor> {
        let name = name
            .as_ref()
            .ok_or_else(|| Error::Format(format!("layer `{layer}` lacks `{what}`")))?;
        weights
            .get(name)
            .cloned()
            .ok_or_else(|| Error::MissingWeight(name.clone()))
    };

    let mut nodes = Vec::with_capacity(manifest.layers.len());
    for spec in &manifest.layers {
        let name = spec.name.as_str();
        let kind = match spec.kind.as_str() {
            "input" => LayerKind::Input,
            "dense" => LayerKind::Dense {
                kernel: fetch(&spec.weights, name, "weights")?,
                bias: spec.bias.as_ref().map(|_| fetch(&spec.bias, name, "bias")).transpose()?,
            },
            "conv2d" => LayerKind::Conv2d {
                kernel: fetch(&spec.weights, name, "weights")?,
                bias: spec.bias.as_ref().map(|_| fetch(&spec.bias, name, "bias")).transpose()?,
                strides: pair(&spec.strides, [1, 1], "strides", name)?,
                padding: parse_padding(&spec.padding, name)?,
            },
            "maxpool2d" => {
                let pool = pair(&spec.pool, [2, 2], "pool", name)?;
                LayerKind::MaxPool2d {
                    pool,
                    strides: pair(&spec.strides, pool, "strides", name)?,
                    padding: parse_padding(&spec.padding, name)?,
                }
            }
            "flatten" => LayerKind::Flatten,
            "add_merge" => LayerKind::AddMerge,
            "batchnorm" => LayerKind::BatchNorm(BatchNormParams {
                mean: fetch(&spec.mean, name, "mean")?,
                variance: fetch(&spec.variance, name, "variance")?,
                gamma: fetch(&spec.gamma, name, "gamma")?,
                beta: fetch(&spec.beta, name, "beta")?,
                eps: spec.eps.unwrap_or(1e-3),
            }),
            "softmax" => LayerKind::Softmax,
            other => {
                return Err(Error::Format(format!("layer `{name}`: unknown kind `{other}`")))
            }
        };
        let inputs: Vec<&str> = spec.inputs.iter().map(String::as_str).collect();
        nodes.push(
            LayerNode::new(name, kind, &inputs).with_activation(parse_activation(&spec.activation, name)?),
        );
    }
    let [lo, hi] = manifest.input_range;
    if !(lo < hi) {
        return Err(Error::Format(format!("input_range [{lo}, {hi}] is empty")));
    }
    let model = Model::new(nodes, &manifest.input_shape, (lo, hi), manifest.output)?;
    if options.fold_batchnorm {
        model.fold_batchnorm()
    } else {
        Ok(model)
    }
}

/// Serializes to `(manifest JSON, XWTS container)`.
pub fn model_to_bytes<'a>(model: &'a Model) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut layers = Vec::with_capacity(model.nodes().len());
    let mut records: Vec<(String, &'a Tensor)> = Vec::new();
    for node in model.nodes() {
        let mut spec = LayerSpec {
            name: node.name.clone(),
            kind: node.kind.name().to_string(),
            activation: activation_name(node.activation),
            inputs: node.inputs.clone(),
            ..Default::default()
        };
        let mut add = |suffix: &str, t: &'a Tensor| -> String {
            let n = format!("{}.{}", node.name, suffix);
            records.push((n.clone(), t));
            n
        };
        match &node.kind {
            LayerKind::Dense { kernel, bias } => {
                spec.weights = Some(add("kernel", kernel));
                spec.bias = bias.as_ref().map(|b| add("bias", b));
            }
            LayerKind::Conv2d {
                kernel,
                bias,
                strides,
                padding,
            } => {
                spec.weights = Some(add("kernel", kernel));
                spec.bias = bias.as_ref().map(|b| add("bias", b));
                spec.strides = Some(strides.to_vec());
                spec.padding = Some(padding_name(*padding));
            }
            LayerKind::MaxPool2d {
                pool,
                strides,
                padding,
            } => {
                spec.pool = Some(pool.to_vec());
                spec.strides = Some(strides.to_vec());
                spec.padding = Some(padding_name(*padding));
            }
            LayerKind::BatchNorm(p) => {
                spec.mean = Some(add("mean", &p.mean));
                spec.variance = Some(add("variance", &p.variance));
                spec.gamma = Some(add("gamma", &p.gamma));
                spec.beta = Some(add("beta", &p.beta));
                spec.eps = Some(p.eps);
            }
            LayerKind::Input | LayerKind::Flatten | LayerKind::AddMerge | LayerKind::Softmax => {}
        }
        layers.push(spec);
    }
    let (lo, hi) = model.input_range();
    let manifest = Manifest {
        input_shape: model.input_shape().to_vec(),
        input_range: [lo, hi],
        output: model.output().to_string(),
        layers,
    };
    let json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let weights = encode_weights(records.iter().map(|(n, t)| (n.as_str(), *t)));
    Ok((json, weights))
}

pub fn save_model(model: &Model, manifest: impl AsRef<Path>, weights: impl AsRef<Path>) -> Result<()> {
    let (m, w) = model_to_bytes(model)?;
    fs::write(manifest, m)?;
    fs::write(weights, w)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_reference_model, ReferenceKind};

    const MLP: &str = r#"{
        "input_shape": [1, 2], "input_range": [-1, 1], "output": "d2",
        "layers": [
            {"name": "x", "kind": "input"},
            {"name": "d1", "kind": "dense", "activation": "relu", "inputs": ["x"], "weights": "w1", "bias": "b1"},
            {"name": "d2", "kind": "dense", "inputs": ["d1"], "weights": "w2"}
        ]}"#;

    fn weights() -> Vec<u8> {
        let w1 = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b1 = Tensor::new(&[2], vec![0.5, -0.5]).unwrap();
        let w2 = Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap();
        encode_weights([("w1", &w1), ("b1", &b1), ("w2", &w2)])
    }

    #[test]
    fn loads_two_layer_mlp() {
        let m = load_model_bytes(MLP.as_bytes(), &weights(), LoadOptions::default()).unwrap();
        assert_eq!(m.nodes().iter().filter(|n| n.is_dense()).count(), 2);
        let y = m.predict(&Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[1.5 + 2.0 * 0.5]);
    }

    #[test]
    fn missing_weight() {
        let manifest = MLP.replace("\"w2\"", "\"w9\"");
        let err = load_model_bytes(manifest.as_bytes(), &weights(), LoadOptions::default()).unwrap_err();
        assert!(matches!(err, Error::MissingWeight(ref n) if n == "w9"));
    }

    #[test]
    fn self_feeding_node_is_a_cycle() {
        let manifest = MLP.replace(r#""inputs": ["d1"]"#, r#""inputs": ["d2"]"#);
        let err = load_model_bytes(manifest.as_bytes(), &weights(), LoadOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Cycle(_)));
    }

    #[test]
    fn unknown_field_rejected() {
        let manifest = MLP.replace(r#""kind": "input""#, r#""kind": "input", "colour": 3"#);
        assert!(matches!(
            load_model_bytes(manifest.as_bytes(), &weights(), LoadOptions::default()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn save_load_reproduces_forward_bit_identically() {
        for kind in [ReferenceKind::Linear, ReferenceKind::Mlp, ReferenceKind::Cnn] {
            let m = make_reference_model(kind, 11);
            let (a, b) = model_to_bytes(&m).unwrap();
            let back = load_model_bytes(&a, &b, LoadOptions::default()).unwrap();
            assert_eq!(back, m);
            let mut r = crate::rng::XorShift64Star::new(5);
            let x = Tensor::new(
                m.input_shape(),
                (0..m.input_shape().iter().product::<usize>())
                    .map(|_| r.uniform(-1.0, 1.0) as f32)
                    .collect(),
            )
            .unwrap();
            assert_eq!(m.forward(&x).unwrap(), back.forward(&x).unwrap());
        }
    }
}
