//! Small seeded reference models on 16x16x1 inputs with input range (-1, 1).
//!
//! Every parameter (kernels then biases, in node declaration order) is drawn
//! uniformly from [-0.5, 0.5] with [`XorShift64Star`] seeded as given.

use super::{Activation, LayerKind, LayerNode, Model, Padding};
use crate::rng::XorShift64Star;
use crate::tensor::Tensor;

pub const REFERENCE_IMAGE_SIDE: usize = 16;
const CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceKind {
    /// flatten -> dense
    Linear,
    /// flatten -> dense(relu) -> dense
    Mlp,
    /// conv(relu) -> maxpool -> flatten -> dense(relu) -> dense -> softmax
    Cnn,
}

impl std::str::FromStr for ReferenceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(Self::Linear),
            "mlp" => Ok(Self::Mlp),
            "cnn" => Ok(Self::Cnn),
            other => Err(format!("unknown reference model `{other}` (linear|mlp|cnn)")),
        }
    }
}

struct Draw(XorShift64Star);

impl Draw {
    fn tensor(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.0.uniform(-0.5, 0.5) as f32).collect();
        Tensor::new(shape, data).expect("shape/data agree")
    }

    fn dense(&mut self, name: &str, src: &str, n_in: usize, n_out: usize) -> LayerNode {
        let kernel = self.tensor(&[n_in, n_out]);
        let bias = self.tensor(&[n_out]);
        LayerNode::new(
            name,
            LayerKind::Dense {
                kernel,
                bias: Some(bias),
            },
            &[src],
        )
    }
}

pub fn make_reference_model(kind: ReferenceKind, seed: u64) -> Model {
    let side = REFERENCE_IMAGE_SIDE;
    let pixels = side * side;
    let mut d = Draw(XorShift64Star::new(seed));
    let mut nodes = vec![
        LayerNode::new("input", LayerKind::Input, &[]),
    ];
    let output = match kind {
        ReferenceKind::Linear => {
            nodes.push(LayerNode::new("flatten", LayerKind::Flatten, &["input"]));
            nodes.push(d.dense("logits", "flatten", pixels, CLASSES));
            "logits"
        }
        ReferenceKind::Mlp => {
            nodes.push(LayerNode::new("flatten", LayerKind::Flatten, &["input"]));
            nodes.push(d.dense("hidden", "flatten", pixels, 32).with_activation(Activation::Relu));
            nodes.push(d.dense("logits", "hidden", 32, CLASSES));
            "logits"
        }
        ReferenceKind::Cnn => {
            let filters = 4;
            let kernel = d.tensor(&[3, 3, 1, filters]);
            let bias = d.tensor(&[filters]);
            nodes.push(
                LayerNode::new(
                    "conv",
                    LayerKind::Conv2d {
                        kernel,
                        bias: Some(bias),
                        strides: [1, 1],
                        padding: Padding::Same,
                    },
                    &["input"],
                )
                .with_activation(Activation::Relu),
            );
            nodes.push(LayerNode::new(
                "pool",
                LayerKind::MaxPool2d {
                    pool: [2, 2],
                    strides: [2, 2],
                    padding: Padding::Valid,
                },
                &["conv"],
            ));
            nodes.push(LayerNode::new("flatten", LayerKind::Flatten, &["pool"]));
            let flat = (side / 2) * (side / 2) * filters;
            nodes.push(d.dense("hidden", "flatten", flat, 16).with_activation(Activation::Relu));
            nodes.push(d.dense("logits", "hidden", 16, CLASSES));
            nodes.push(LayerNode::new("softmax", LayerKind::Softmax, &["logits"]));
            "softmax"
        }
    };
    Model::new(nodes, &[1, side, side, 1], (-1.0, 1.0), output).expect("reference model is valid")
}
