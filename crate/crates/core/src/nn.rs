//! Fully connected multilayer perceptrons with exact reverse-mode gradients.
//!
//! Parameters are stored per layer as a row-major `out_dim × in_dim` weight
//! matrix followed by a bias vector. The flattened parameter order used by
//! [`MlpParams::to_flat`] is layer by layer, weights before biases.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// α of the scaled exponential linear unit, applied without the outer λ.
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Selu,
    LogSigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Selu => {
                if x < 0.0 {
                    SELU_ALPHA * x.exp_m1()
                } else {
                    x
                }
            }
            // log(1 / (1 + e^{-x})), split for stability in both tails
            Activation::LogSigmoid => {
                if x >= 0.0 {
                    -(-x).exp().ln_1p()
                } else {
                    x - x.exp().ln_1p()
                }
            }
        }
    }

    /// Derivative at pre-activation `pre`, given `post = apply(pre)`.
    #[inline]
    pub fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - post * post,
            Activation::Selu => {
                if pre < 0.0 {
                    SELU_ALPHA * pre.exp()
                } else {
                    1.0
                }
            }
            // sigmoid(-x)
            Activation::LogSigmoid => {
                if pre >= 0.0 {
                    let e = (-pre).exp();
                    e / (1.0 + e)
                } else {
                    1.0 / (1.0 + pre.exp())
                }
            }
        }
    }
}

pub fn activation_apply(kind: Activation, x: f64) -> f64 {
    kind.apply(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        LayerSpec {
            in_dim,
            out_dim,
            activation,
        }
    }

    pub fn num_params(&self) -> usize {
        self.out_dim * self.in_dim + self.out_dim
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub spec: LayerSpec,
    /// Row-major, `out_dim × in_dim`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(spec: LayerSpec) -> Self {
        Dense {
            spec,
            weight: vec![0.0; spec.out_dim * spec.in_dim],
            bias: vec![0.0; spec.out_dim],
        }
    }

    fn affine(&self, input: &[f64], out: &mut [f64]) {
        let n_in = self.spec.in_dim;
        for (o, (row, b)) in self.weight.chunks_exact(n_in).zip(&self.bias).enumerate() {
            out[o] = b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
        }
    }
}

/// Intermediates of one layer recorded during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct TapeEntry {
    pub input: Vec<f64>,
    pub pre: Vec<f64>,
    pub post: Vec<f64>,
}

pub type Tape = Vec<TapeEntry>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
}

fn check_specs(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::invalid("network needs at least one layer"));
    }
    for s in specs {
        if s.in_dim == 0 || s.out_dim == 0 {
            return Err(Error::invalid("layer dimensions must be positive"));
        }
    }
    for pair in specs.windows(2) {
        check_len("consecutive layer dims", pair[0].out_dim, pair[1].in_dim)?;
    }
    Ok(())
}

impl MlpParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        check_specs(specs)?;
        let layers = specs
            .iter()
            .map(|&spec| {
                let limit = (6.0 / (spec.in_dim + spec.out_dim) as f64).sqrt();
                let mut layer = Dense::zeros(spec);
                for w in &mut layer.weight {
                    *w = rng.gen_range(-limit..=limit);
                }
                layer
            })
            .collect();
        Ok(MlpParams { layers })
    }

    pub fn zeros(specs: &[LayerSpec]) -> Result<Self> {
        check_specs(specs)?;
        Ok(MlpParams {
            layers: specs.iter().map(|&s| Dense::zeros(s)).collect(),
        })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        let mlp = MlpParams { layers };
        mlp.validate()?;
        Ok(mlp)
    }

    pub fn zeros_like(&self) -> Self {
        MlpParams {
            layers: self.layers.iter().map(|l| Dense::zeros(l.spec)).collect(),
        }
    }

    /// Checks shape consistency and finiteness of every entry.
    pub fn validate(&self) -> Result<()> {
        check_specs(&self.specs())?;
        for l in &self.layers {
            check_len("layer weight", l.spec.out_dim * l.spec.in_dim, l.weight.len())?;
            check_len("layer bias", l.spec.out_dim, l.bias.len())?;
            if l.weight.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("network parameter".into()));
            }
        }
        Ok(())
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].spec.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].spec.out_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.spec.num_params()).sum()
    }

    /// Stacks `other` after `self`.
    pub fn chain(&self, other: &MlpParams) -> Result<MlpParams> {
        check_len("chained network dims", self.out_dim(), other.in_dim())?;
        let mut layers = self.layers.clone();
        layers.extend(other.layers.iter().cloned());
        Ok(MlpParams { layers })
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        check_len("network input", self.in_dim(), input.len())?;
        let mut tape = Vec::with_capacity(self.layers.len());
        let mut current = input.to_vec();
        for layer in &self.layers {
            let mut pre = vec![0.0; layer.spec.out_dim];
            layer.affine(&current, &mut pre);
            let act = layer.spec.activation;
            let post: Vec<f64> = pre.iter().map(|&p| act.apply(p)).collect();
            let input = std::mem::replace(&mut current, post.clone());
            tape.push(TapeEntry { input, pre, post });
        }
        Ok((current, tape))
    }

    /// Forward pass without recording intermediates.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        check_len("network input", self.in_dim(), input.len())?;
        let mut current = input.to_vec();
        for layer in &self.layers {
            let mut next = vec![0.0; layer.spec.out_dim];
            layer.affine(&current, &mut next);
            let act = layer.spec.activation;
            next.iter_mut().for_each(|v| *v = act.apply(*v));
            current = next;
        }
        Ok(current)
    }

    pub fn backward(&self, tape: &[TapeEntry], output_grad: &[f64]) -> Result<(MlpParams, Vec<f64>)> {
        let mut grads = self.zeros_like();
        let input_grad = self.backward_into(tape, output_grad, &mut grads)?;
        Ok((grads, input_grad))
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient.
    pub fn backward_into(&self, tape: &[TapeEntry], output_grad: &[f64], grads: &mut MlpParams) -> Result<Vec<f64>> {
        check_len("tape length", self.layers.len(), tape.len())?;
        check_len("gradient layers", self.layers.len(), grads.layers.len())?;
        check_len("output gradient", self.out_dim(), output_grad.len())?;
        let mut upstream = output_grad.to_vec();
        for ((layer, entry), g) in self.layers.iter().zip(tape).zip(grads.layers.iter_mut()).rev() {
            let spec = layer.spec;
            check_len("tape entry", spec.out_dim, entry.pre.len())?;
            check_len("tape entry input", spec.in_dim, entry.input.len())?;
            let delta: Vec<f64> = upstream
                .iter()
                .zip(entry.pre.iter().zip(&entry.post))
                .map(|(u, (&pre, &post))| u * spec.activation.derivative(pre, post))
                .collect();
            let mut down = vec![0.0; spec.in_dim];
            for (o, &d) in delta.iter().enumerate() {
                g.bias[o] += d;
                if d == 0.0 {
                    continue;
                }
                let row = o * spec.in_dim..(o + 1) * spec.in_dim;
                for ((gw, w), (x, dn)) in g.weight[row.clone()]
                    .iter_mut()
                    .zip(&layer.weight[row])
                    .zip(entry.input.iter().zip(down.iter_mut()))
                {
                    *gw += d * x;
                    *dn += d * w;
                }
            }
            upstream = down;
        }
        Ok(upstream)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.append_flat(&mut out);
        out
    }

    pub fn append_flat(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
    }

    /// Overwrites all parameters from a flat slice in [`to_flat`](Self::to_flat) order.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_len("flat parameter vector", self.num_params(), flat.len())?;
        let mut offset = 0;
        for l in &mut self.layers {
            let nw = l.weight.len();
            l.weight.copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    /// `self += scale * other`, for equally shaped networks.
    pub fn add_scaled(&mut self, other: &MlpParams, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.iter_mut().zip(&b.weight).for_each(|(x, y)| *x += scale * y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += scale * y);
        }
    }
}
