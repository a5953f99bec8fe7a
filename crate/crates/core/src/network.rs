//! Dense ReLU layer stacks.
//!
//! An architecture such as `(4, 10, 10)` names the input width followed by the
//! width of every trained layer, so it builds two layers shaped `4 x 10` and
//! `10 x 10`. There is no output head: the losses read the last activation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Matrix, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub w: Matrix,
    pub b: Vector,
}

impl DenseLayer {
    pub fn new(w: Matrix, b: Vector) -> Result<Self> {
        if w.cols() != b.len() {
            return Err(Error::Shape {
                op: "dense layer",
                left: w.shape(),
                right: (1, b.len()),
            });
        }
        Ok(DenseLayer { w, b })
    }

    pub fn inputs(&self) -> usize {
        self.w.rows()
    }

    pub fn outputs(&self) -> usize {
        self.w.cols()
    }

    /// `x W + b` before the ReLU.
    pub fn pre_activation(&self, x: &Matrix) -> Result<Matrix> {
        x.matmul(&self.w)?.add_row_broadcast(&self.b)
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite() && self.b.iter().all(|x| x.is_finite())
    }
}

/// `ReLU(x W + b)`.
pub fn layer_forward(layer: &DenseLayer, x: &Matrix) -> Result<Matrix> {
    Ok(layer.pre_activation(x)?.relu())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<DenseLayer>,
    pub architecture: Vec<usize>,
}

impl Network {
    /// Wraps existing layers, checking that their shapes chain.
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::config("a network needs at least one layer"))?;
        let mut architecture = vec![first.inputs()];
        for layer in &layers {
            let prev = *architecture.last().unwrap();
            if layer.inputs() != prev || layer.w.cols() != layer.b.len() {
                return Err(Error::Shape {
                    op: "network chain",
                    left: (prev, prev),
                    right: layer.w.shape(),
                });
            }
            architecture.push(layer.outputs());
        }
        Ok(Network { layers, architecture })
    }

    pub fn input_width(&self) -> usize {
        self.architecture[0]
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(DenseLayer::is_finite)
    }

    pub fn validate(&self) -> Result<()> {
        let rebuilt = Network::from_layers(self.layers.clone())?;
        if rebuilt.architecture != self.architecture {
            return Err(Error::Format(format!(
                "architecture {:?} does not match layer shapes {:?}",
                self.architecture, rebuilt.architecture
            )));
        }
        Ok(())
    }
}

pub fn validate_architecture(architecture: &[usize]) -> Result<()> {
    if architecture.len() < 2 {
        return Err(Error::config(format!(
            "architecture {architecture:?} needs an input width and at least one layer"
        )));
    }
    if architecture.contains(&0) {
        return Err(Error::config(format!("architecture {architecture:?} has a zero width")));
    }
    Ok(())
}

/// Seeded initialization: weights uniform in `±1/√fan_in`, biases zero.
/// Weights are drawn layer by layer in row-major order from one
/// [`SplitMix64`] stream seeded with `seed`.
pub fn init_network(architecture: &[usize], seed: u64) -> Result<Network> {
    validate_architecture(architecture)?;
    let mut rng = SplitMix64::new(seed);
    let layers = architecture
        .windows(2)
        .map(|pair| {
            let (p, q) = (pair[0], pair[1]);
            let bound = 1.0 / (p as f64).sqrt();
            let w = Matrix::from_fn(p, q, |_, _| rng.uniform(-bound, bound));
            DenseLayer {
                w,
                b: Vector::zeros(q),
            }
        })
        .collect();
    Ok(Network {
        layers,
        architecture: architecture.to_vec(),
    })
}

/// Every activation `h^[1] .. h^[L]`, in order.
pub fn forward_all(net: &Network, x: &Matrix) -> Result<Vec<Matrix>> {
    let mut out: Vec<Matrix> = Vec::with_capacity(net.layers.len());
    for layer in &net.layers {
        let input = out.last().unwrap_or(x);
        let h = layer_forward(layer, input)?;
        out.push(h);
    }
    Ok(out)
}

/// Output of the last layer.
pub fn forward(net: &Network, x: &Matrix) -> Result<Matrix> {
    let mut acts = forward_all(net, x)?;
    Ok(acts.pop().expect("networks have at least one layer"))
}
