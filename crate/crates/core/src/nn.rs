//! Dense layers shared by the classifier, autoencoder and discriminator.

use std::hash::{Hash, Hasher};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::diffgraph::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// `U(-1/√fan_in, 1/√fan_in)` for weights and biases.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-bound..bound)).collect::<Vec<_>>();
        let weight = Tensor::new(vec![fan_in, fan_out], draw(fan_in * fan_out)).expect("positive extents");
        let bias = Tensor::new(vec![fan_out], draw(fan_out)).expect("positive extents");
        Self { weight, bias }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weight: Tensor::zeros(vec![fan_in, fan_out]), bias: Tensor::zeros(vec![fan_out]) }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Stack of affine layers with ReLU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths = [in, h1, ..., out]`.
    pub fn init(widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        Self { layers: widths.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect() }
    }

    pub fn zeros(widths: &[usize]) -> Self {
        Self { layers: widths.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect() }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].fan_in()];
        w.extend(self.layers.iter().map(Linear::fan_out));
        w
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    /// Records every parameter on the tape; `(weight, bias)` per layer.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<(Var, Var)>> {
        self.layers
            .iter()
            .map(|l| Ok((tape.leaf(&l.weight, trainable)?, tape.leaf(&l.bias, trainable)?)))
            .collect()
    }

    /// Runs the stack. ReLU follows every layer except the last unless
    /// `relu_last` is set.
    pub fn forward(tape: &mut Tape, bound: &[(Var, Var)], mut x: Var, relu_last: bool) -> Result<Var> {
        for (i, &(w, b)) in bound.iter().enumerate() {
            x = tape.affine(x, w, b)?;
            if relu_last || i + 1 < bound.len() {
                x = tape.relu(x)?;
            }
        }
        Ok(x)
    }
}

/// Flattens bound `(weight, bias)` pairs in declaration order.
pub fn flatten_bound(bound: &[(Var, Var)]) -> Vec<Var> {
    bound.iter().flat_map(|&(w, b)| [w, b]).collect()
}

/// Cheap fingerprint of parameter bits, used to detect which network changed.
pub fn fingerprint(params: &[&Tensor]) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for p in params {
        p.shape().hash(&mut h);
        for v in p.data() {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

/// Adds `N(0, (scale · std(p))²)` to every tensor, per tensor.
pub fn perturb(params: &mut [&mut Tensor], scale: f64, rng: &mut ChaCha8Rng) {
    for p in params.iter_mut() {
        let sigma = scale * p.std();
        if !(sigma > 0.0) {
            continue;
        }
        let normal = Normal::new(0.0, sigma).expect("positive sigma");
        p.data_mut().iter_mut().for_each(|v| *v += normal.sample(rng));
    }
}
