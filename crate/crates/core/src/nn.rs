//! Small dense networks with exact reverse-mode gradients.
//!
//! Shared by the toy generator, the feature extractor and the classifier.
//! Parameters flatten layer by layer as `weight (row-major), bias`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::rng::counter_uniform;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// `y = act(W·x + b)` with `W` stored as `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows {
            return Err(Error::validation(format!(
                "bias length {} does not match {} output units",
                bias.len(),
                weight.rows
            )));
        }
        if weight.data.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::validation("non-finite layer parameter"));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    /// Glorot-uniform weights `U(-a, a)`, `a = sqrt(6 / (fan_in + fan_out))`,
    /// drawn from the counter-based stream keyed by `(seed, keys)`. Biases
    /// start at zero.
    pub fn glorot(
        fan_in: usize,
        fan_out: usize,
        activation: Activation,
        seed: u64,
        keys: &[u64],
    ) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|i| (2.0 * counter_uniform(seed, keys, i as u64) - 1.0) * a)
            .collect();
        Self {
            weight: Matrix {
                rows: fan_out,
                cols: fan_in,
                data,
            },
            bias: vec![0.0; fan_out],
            activation,
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Matrix::identity(dim),
            bias: vec![0.0; dim],
            activation: Activation::Identity,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn param_count(&self) -> usize {
        self.weight.data.len() + self.bias.len()
    }

    pub fn preactivation(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.weight.mul_vec(x);
        z.iter_mut().zip(&self.bias).for_each(|(z, b)| *z += b);
        z
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.preactivation(x);
        z.iter_mut().for_each(|v| *v = self.activation.apply(*v));
        z
    }
}

/// Activations recorded during a forward pass. `values[0]` is the input,
/// `values[i + 1]` the output of layer `i`.
#[derive(Debug, Clone)]
pub struct Trace {
    pub values: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.values.last().expect("trace holds at least the input")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::validation("network needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::validation(format!(
                    "layer {i} outputs {} values but layer {} expects {}",
                    pair[0].output_dim(),
                    i + 1,
                    pair[1].input_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn check_input(&self, x: &[f64], what: &str) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::validation(format!(
                "{what}: expected input of length {}, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.layers
            .iter()
            .fold(x.to_vec(), |h, layer| layer.forward(&h))
    }

    pub fn forward_trace(&self, x: &[f64]) -> Trace {
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(x.to_vec());
        for layer in &self.layers {
            let next = layer.forward(values.last().unwrap());
            values.push(next);
        }
        Trace { values }
    }

    /// Backpropagate `cotangent` (gradient w.r.t. the output). Returns the
    /// gradient w.r.t. the input; when `param_grad` is given, parameter
    /// gradients are accumulated into it using the flat layout.
    pub fn backward(
        &self,
        trace: &Trace,
        cotangent: &[f64],
        mut param_grad: Option<&mut [f64]>,
    ) -> Vec<f64> {
        let mut grad = cotangent.to_vec();
        let mut offset = self.param_count();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.values[i];
            let output = &trace.values[i + 1];
            let delta: Vec<f64> = grad
                .iter()
                .zip(output)
                .map(|(g, y)| g * layer.activation.derivative_from_output(*y))
                .collect();
            offset -= layer.param_count();
            if let Some(pg) = param_grad.as_deref_mut() {
                let (wg, bg) = pg[offset..offset + layer.param_count()]
                    .split_at_mut(layer.weight.data.len());
                let cols = layer.input_dim();
                for (r, d) in delta.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    for (w, x) in wg[r * cols..(r + 1) * cols].iter_mut().zip(input) {
                        *w += d * x;
                    }
                    bg[r] += d;
                }
            }
            grad = layer.weight.tmul_vec(&delta);
        }
        grad
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(&layer.weight.data);
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::validation(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut rest = params;
        for layer in &mut self.layers {
            let (w, tail) = rest.split_at(layer.weight.data.len());
            let (b, tail) = tail.split_at(layer.bias.len());
            layer.weight.data.copy_from_slice(w);
            layer.bias.copy_from_slice(b);
            rest = tail;
        }
        Ok(())
    }
}
