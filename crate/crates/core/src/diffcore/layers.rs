use serde::{Deserialize, Serialize};

use super::optim::Parameter;
use super::tape::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }
}

/// Whether a forward pass records parameters as trainable leaves or constants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamMode {
    Train,
    Frozen,
}

/// Affine layer `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    pub fn zeros(name: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Parameter::new(format!("{name}.weight"), Tensor::zeros(vec![fan_in, fan_out])),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(vec![fan_out])),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mode: ParamMode) -> Result<Var> {
        let (w, b) = match mode {
            ParamMode::Train => (g.param(&self.weight), g.param(&self.bias)),
            ParamMode::Frozen => (g.frozen(&self.weight), g.frozen(&self.bias)),
        };
        let xw = g.matmul(x, w)?;
        g.add(xw, b)
    }
}

/// Multilayer perceptron: hidden layers share one activation, the last layer
/// has its own.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl Mlp {
    /// `dims = [input, hidden..., output]`, all weights zero.
    pub fn new(
        name: &str,
        dims: &[usize],
        hidden_activation: Activation,
        output_activation: Activation,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::invalid(format!("invalid layer dims {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::zeros(&format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Ok(Mlp {
            layers,
            hidden_activation,
            output_activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").fan_out()
    }

    /// Width of the activation feeding the last layer.
    pub fn penultimate_dim(&self) -> usize {
        self.layers.last().expect("non-empty").fan_in()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(Linear::fan_out));
        d
    }

    /// Returns `(output, penultimate)`. For a single-layer net the
    /// penultimate activation is the input itself.
    pub fn forward(&self, g: &mut Graph, x: Var, mode: ParamMode) -> Result<(Var, Var)> {
        let d = g.value(x).cols();
        if d != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "mlp input",
                lhs: vec![self.input_dim()],
                rhs: g.value(x).shape().to_vec(),
            });
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for layer in &self.layers[..last] {
            let z = layer.forward(g, h, mode)?;
            h = self.hidden_activation.apply(g, z);
        }
        let z = self.layers[last].forward(g, h, mode)?;
        Ok((self.output_activation.apply(g, z), h))
    }

    pub fn parameters(&self) -> impl Iterator<Item = &Parameter> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters().map(|p| p.value().numel()).sum()
    }
}
