use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{contract, numeric, Result};

/// Whether a step moves along or against the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Descend,
    Ascend,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Direction::Descend => -1.0,
            Direction::Ascend => 1.0,
        }
    }
}

/// Bias-corrected Adam with one moment pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    /// Fresh state with zeroed moments sized to `params`.
    pub fn new(lr: f64, params: &[&Tensor]) -> Self {
        Self::with_lens(lr, params.iter().map(|p| p.len()))
    }

    pub fn with_lens(lr: f64, lens: impl IntoIterator<Item = usize>) -> Self {
        let lens: Vec<usize> = lens.into_iter().collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            first: lens.iter().map(|&n| vec![0.0; n]).collect(),
            second: lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update to every parameter in place.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>], direction: Direction) -> Result<()> {
        self.step_slices(
            &mut params.iter_mut().map(|p| p.data_mut()).collect::<Vec<_>>(),
            grads,
            direction,
        )
    }

    pub fn step_slices(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>], direction: Direction) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return contract(format!(
                "adam: state for {} tensors, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[i].len() || g.len() != p.len() {
                return contract(format!("adam: tensor {i} length mismatch"));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let sign = direction.sign();
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] += sign * self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            if !p.iter().all(|x| x.is_finite()) {
                return numeric(format!("adam produced non-finite parameter in tensor {i}"));
            }
        }
        Ok(())
    }
}

/// Plain gradient step `p ± lr·g`.
pub fn sgd_step(params: &mut [&mut [f64]], grads: &[Vec<f64>], lr: f64, direction: Direction) -> Result<()> {
    if params.len() != grads.len() {
        return contract("sgd: parameter/gradient count mismatch");
    }
    let sign = direction.sign();
    for (p, g) in params.iter_mut().zip(grads) {
        if p.len() != g.len() {
            return contract("sgd: length mismatch");
        }
        p.iter_mut().zip(g).for_each(|(p, g)| *p += sign * lr * g);
    }
    Ok(())
}
