//! Small fully connected networks and first-order optimizers.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{sigmoid, Matrix, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Activation::Identity),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::config(format!("unknown activation `{other}`"))),
        }
    }

    fn apply(self, m: &Matrix) -> Matrix {
        match self {
            Activation::Identity => m.clone(),
            Activation::Tanh => m.map(f64::tanh),
            Activation::Sigmoid => m.map(sigmoid),
        }
    }

    fn apply_tape(self, tape: &mut Tape, v: Var) -> Var {
        match self {
            Activation::Identity => v,
            Activation::Tanh => tape.tanh(v),
            Activation::Sigmoid => tape.sigmoid(v),
        }
    }
}

/// Affine layer `y = x·W + b` with `W: in×out`, `b: 1×out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

/// Multi-layer perceptron with one hidden activation and one output activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Linear>,
    hidden: Activation,
    output: Activation,
}

/// Tape handles for the parameters of an [`Mlp`], in layer order.
#[derive(Debug, Clone)]
pub struct MlpVars {
    pub layers: Vec<(Var, Var)>,
}

impl Mlp {
    /// Glorot-uniform weights and zero biases. `sizes` lists every layer
    /// width including input and output.
    pub fn new(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output widths");
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Linear {
                    weight: Matrix::from_fn(fan_in, fan_out, |_, _| {
                        rng.random_range(-limit..limit)
                    }),
                    bias: Matrix::zeros(1, fan_out),
                }
            })
            .collect();
        Self {
            layers,
            hidden,
            output,
        }
    }

    pub fn from_layers(layers: Vec<Linear>, hidden: Activation, output: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("an MLP needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.shape() != (1, l.weight.cols()) {
                return Err(Error::dim(format!("layer {i}: bias does not match weight")));
            }
            if i > 0 && layers[i - 1].weight.cols() != l.weight.rows() {
                return Err(Error::dim(format!("layer {i}: input width mismatch")));
            }
        }
        Ok(Self {
            layers,
            hidden,
            output,
        })
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.cols()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Forward pass without recording, `x: batch×input`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::dim(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = h.matmul(&l.weight)?;
            for r in 0..z.rows() {
                for (v, b) in z.row_mut(r).iter_mut().zip(l.bias.data()) {
                    *v += b;
                }
            }
            h = if i == last {
                self.output.apply(&z)
            } else {
                self.hidden.apply(&z)
            };
        }
        Ok(h)
    }

    pub fn register(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.param(l.weight.clone()), tape.param(l.bias.clone())))
                .collect(),
        }
    }

    /// Recorded forward pass using parameters previously registered with
    /// [`Mlp::register`].
    pub fn forward_tape(&self, tape: &mut Tape, vars: &MlpVars, x: Var) -> Result<Var> {
        if tape.shape(x).1 != self.input_dim() {
            return Err(Error::dim(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                tape.shape(x).1
            )));
        }
        let last = vars.layers.len() - 1;
        let mut h = x;
        for (i, (w, b)) in vars.layers.iter().enumerate() {
            let z = tape.matmul(h, *w)?;
            let z = tape.add_row(z, *b)?;
            h = if i == last {
                self.output.apply_tape(tape, z)
            } else {
                self.hidden.apply_tape(tape, z)
            };
        }
        Ok(h)
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(l.bias.data());
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::dim(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.weight.len();
            l.weight.data_mut().copy_from_slice(&params[off..off + n]);
            off += n;
            let n = l.bias.len();
            l.bias.data_mut().copy_from_slice(&params[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Gradients of the registered parameters, flattened like [`Mlp::params_flat`].
    pub fn grads_flat(&self, tape: &Tape, vars: &MlpVars) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in &vars.layers {
            out.extend_from_slice(tape.grad_or_zeros(*w).data());
            out.extend_from_slice(tape.grad_or_zeros(*b).data());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::config(format!(
                "unknown optimizer `{other}` (expected sgd or adam)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }
}

/// Plain gradient steps or Adam moments over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, lr: f64, num_params: usize) -> Self {
        let moments = if kind == OptimizerKind::Adam { num_params } else { 0 };
        Self {
            kind,
            lr,
            m: vec![0.0; moments],
            v: vec![0.0; moments],
            t: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Moves `params` against `grad` (descent).
    pub fn descend(&mut self, params: &mut [f64], grad: &[f64]) {
        self.apply(params, grad, -1.0);
    }

    /// Moves `params` along `grad` (ascent).
    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64]) {
        self.apply(params, grad, 1.0);
    }

    fn apply(&mut self, params: &mut [f64], grad: &[f64], sign: f64) {
        debug_assert_eq!(params.len(), grad.len());
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p += sign * self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let b1t = 1.0 - Self::BETA1.powi(self.t as i32);
                let b2t = 1.0 - Self::BETA2.powi(self.t as i32);
                for (i, (p, g)) in params.iter_mut().zip(grad).enumerate() {
                    self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
                    self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
                    let mh = self.m[i] / b1t;
                    let vh = self.v[i] / b2t;
                    *p += sign * self.lr * mh / (vh.sqrt() + Self::EPS);
                }
            }
        }
    }
}
