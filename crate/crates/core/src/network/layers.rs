use rand::RngExt;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tape::{BatchNormArgs, Mode, NodeId, Tape};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn new(params: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        let weight = params.add(
            format!("{name}.weight"),
            Matrix::from_vec(fan_in, fan_out, w).expect("sized"),
        );
        let bias = params.add(format!("{name}.bias"), Matrix::zeros(1, fan_out));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(params: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: params.add(format!("{name}.gamma"), Matrix::filled(1, width, 1.0)),
            beta: params.add(format!("{name}.beta"), Matrix::zeros(1, width)),
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Dense(Dense),
    BatchNorm(BatchNorm),
    Relu,
}

impl Layer {
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        params: &ParamStore,
        x: NodeId,
        mode: Mode,
    ) -> Result<NodeId> {
        match self {
            Layer::Dense(d) => {
                let cols = tape.value(x).cols();
                if cols != d.fan_in {
                    return Err(Error::ShapeMismatch {
                        context: "dense input",
                        expected: (tape.value(x).rows(), d.fan_in),
                        found: tape.value(x).shape(),
                    });
                }
                tape.dense(params, x, d.weight, d.bias)
            }
            Layer::BatchNorm(bn) => tape.batch_norm(
                params,
                x,
                BatchNormArgs {
                    gamma: bn.gamma,
                    beta: bn.beta,
                    running_mean: &mut bn.running_mean,
                    running_var: &mut bn.running_var,
                    momentum: bn.momentum,
                    eps: bn.eps,
                    mode,
                },
            ),
            Layer::Relu => tape.relu(x),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Layer::Dense(d) => vec![d.weight, d.bias],
            Layer::BatchNorm(b) => vec![b.gamma, b.beta],
            Layer::Relu => vec![],
        }
    }
}

/// A stack of fully connected layers. Hidden transitions are FC-BN-ReLU
/// blocks; the last transition is either another block or a plain linear map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub widths: Vec<usize>,
}

impl Mlp {
    pub fn new(
        params: &mut ParamStore,
        name: &str,
        widths: &[usize],
        linear_output: bool,
        rng: &mut Rng,
    ) -> Self {
        let mut layers = Vec::new();
        let n = widths.len().saturating_sub(1);
        for (t, pair) in widths.windows(2).enumerate() {
            layers.push(Layer::Dense(Dense::new(
                params,
                &format!("{name}.{t}.fc"),
                pair[0],
                pair[1],
                rng,
            )));
            if !(linear_output && t + 1 == n) {
                layers.push(Layer::BatchNorm(BatchNorm::new(
                    params,
                    &format!("{name}.{t}.bn"),
                    pair[1],
                )));
                layers.push(Layer::Relu);
            }
        }
        Self {
            layers,
            widths: widths.to_vec(),
        }
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }

    pub fn forward_layers(
        &mut self,
        tape: &mut Tape,
        params: &ParamStore,
        mut x: NodeId,
        range: std::ops::Range<usize>,
        mode: Mode,
    ) -> Result<NodeId> {
        for layer in &mut self.layers[range] {
            x = layer.forward(tape, params, x, mode)?;
        }
        Ok(x)
    }

    pub fn forward(&mut self, tape: &mut Tape, params: &ParamStore, x: NodeId, mode: Mode) -> Result<NodeId> {
        let n = self.layers.len();
        self.forward_layers(tape, params, x, 0..n, mode)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Layer::param_ids).collect()
    }
}
