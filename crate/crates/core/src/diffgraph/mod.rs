//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records primitive operations in execution order; every value a
//! backward rule needs (argmax rows, softmax probabilities, nearest-neighbour
//! indices) is saved on the node. [`Tape::backward`] walks the tape once in
//! reverse and returns a [`Gradients`] table indexed by [`Var`].
//!
//! Only nodes that transitively depend on a leaf created with
//! `requires_grad = true` receive gradients; frozen model parameters are
//! recorded as constants so their weight gradients are never computed.

mod adam;
mod gemm;

pub use adam::{sgd_step, AdamState, Direction};

use crate::error::{contract, numeric, Result};
use gemm::{gemm, Operand};

/// Dense row-major `f64` array with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return contract(format!("tensor extents must be positive, got {shape:?}"));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return contract(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self { shape, data: vec![0.0; len] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Population standard deviation of all entries.
    pub fn std(&self) -> f64 {
        std_dev(&self.data)
    }
}

pub(crate) fn std_dev(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Softplus { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Mean { x: Var },
    Reshape { x: Var },
    Pick { x: Var, index: usize },
    MaxSegments { x: Var, argmax: Vec<usize> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    MeanSquaredDiff { a: Var, b: Var },
    Chamfer(ChamferSaved),
}

#[derive(Debug)]
struct ChamferSaved {
    a: Var,
    b: Var,
    a_points: usize,
    b_points: usize,
    symmetric: bool,
    // per point of a: index (within its cloud) of nearest b point, and distance
    a_nn: Vec<usize>,
    a_dist: Vec<f64>,
    b_nn: Vec<usize>,
    b_dist: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Nodes are appended in execution order, so the
/// vector order is already a topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when the seed does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zero-filled when unreached.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.lens[v.0]],
        }
    }
}

fn finite_or_err(op: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        numeric(format!("non-finite value produced by {op}"))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Records a leaf. Fails when the tensor holds non-finite values.
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Result<Var> {
        finite_or_err("leaf", t.data())?;
        Ok(self.push(t.shape.clone(), t.data.clone(), Op::Leaf, requires_grad))
    }

    /// Leaf that takes part in differentiation.
    pub fn variable(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf(t, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor { shape: n.shape.clone(), data: n.value.clone() }
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        match self.value(v) {
            [x] => Ok(*x),
            other => contract(format!("expected a scalar node, found {} values", other.len())),
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => contract(format!("{what}: expected a matrix, got shape {s:?}")),
        }
    }

    /// `x · w + bias` for `x: [b, m]`, `w: [m, k]`, `bias: [k]`.
    pub fn affine(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (rows, inner) = self.dims2(x, "affine input")?;
        let (w_in, w_out) = self.dims2(w, "affine weight")?;
        if inner != w_in {
            return contract(format!("affine: input width {inner} vs weight rows {w_in}"));
        }
        if self.value(bias).len() != w_out {
            return contract(format!(
                "affine: bias length {} vs weight columns {w_out}",
                self.value(bias).len()
            ));
        }
        let mut out = vec![0.0; rows * w_out];
        gemm(
            Operand::new(self.value(x), rows, inner),
            Operand::new(self.value(w), w_in, w_out),
            0.0,
            &mut out,
        );
        let b = self.value(bias);
        for row in out.chunks_exact_mut(w_out) {
            row.iter_mut().zip(b).for_each(|(o, bj)| *o += bj);
        }
        finite_or_err("affine", &out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(bias);
        Ok(self.push(vec![rows, w_out], out, Op::Affine { x, w, b: bias }, rg))
    }

    /// Elementwise `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Relu { x }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Sigmoid { x }, rg))
    }

    /// `ln(1 + e^x)`, evaluated without overflow. Equals `-ln(1 - sigmoid(x))`.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(x).iter().map(|&v| softplus(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softplus { x }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return contract(format!(
                "{what}: shape {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        finite_or_err("add", &out)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        finite_or_err("sub", &out)?;
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Sub { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(x).iter().map(|v| v * factor).collect();
        finite_or_err("scale", &out)?;
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Scale { x, factor }, rg))
    }

    /// Mean of all entries, as a scalar node.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let vals = self.value(x);
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let rg = self.rg(x);
        Ok(self.push(vec![1], vec![m], Op::Mean { x }, rg))
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() || shape.contains(&0) {
            return contract(format!("reshape {:?} -> {shape:?}", self.shape(x)));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, value, Op::Reshape { x }, rg))
    }

    /// Selects one entry (row-major flat index) as a scalar node.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let Some(&v) = self.value(x).get(index) else {
            return contract(format!("pick index {index} out of range"));
        };
        let rg = self.rg(x);
        Ok(self.push(vec![1], vec![v], Op::Pick { x, index }, rg))
    }

    /// Column-wise max over the rows of `x: [n, f]`, giving `[f]`.
    /// Ties go to the lowest row index.
    pub fn max_reduce_points(&mut self, x: Var) -> Result<Var> {
        let (n, _) = self.dims2(x, "max_reduce_points")?;
        let pooled = self.max_reduce_segments(x, n)?;
        let f = self.shape(pooled)[1];
        // collapse the leading singleton without a separate node
        self.nodes[pooled.0].shape = vec![f];
        Ok(pooled)
    }

    /// Column-wise max within consecutive blocks of `rows_per_segment` rows:
    /// `[s·n, f] → [s, f]`. Ties go to the lowest row index in each block.
    pub fn max_reduce_segments(&mut self, x: Var, rows_per_segment: usize) -> Result<Var> {
        let (rows, f) = self.dims2(x, "max_reduce_segments")?;
        if rows_per_segment == 0 || rows % rows_per_segment != 0 {
            return contract(format!(
                "max reduction: {rows} rows cannot split into segments of {rows_per_segment}"
            ));
        }
        let segments = rows / rows_per_segment;
        let vals = self.value(x);
        let mut out = vec![f64::NEG_INFINITY; segments * f];
        let mut argmax = vec![0usize; segments * f];
        for s in 0..segments {
            let o = &mut out[s * f..(s + 1) * f];
            let a = &mut argmax[s * f..(s + 1) * f];
            for r in 0..rows_per_segment {
                let row_idx = s * rows_per_segment + r;
                let row = &vals[row_idx * f..(row_idx + 1) * f];
                for j in 0..f {
                    if row[j] > o[j] {
                        o[j] = row[j];
                        a[j] = row_idx;
                    }
                }
            }
        }
        finite_or_err("max_reduce", &out)?;
        let rg = self.rg(x);
        Ok(self.push(vec![segments, f], out, Op::MaxSegments { x, argmax }, rg))
    }

    /// Row indices (into the reduced input) chosen by a max reduction node.
    pub fn argmax(&self, pooled: Var) -> Option<&[usize]> {
        match &self.node(pooled).op {
            Op::MaxSegments { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    /// Mean over the batch of `-ln softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = self.dims2(logits, "softmax_cross_entropy")?;
        if labels.len() != b {
            return contract(format!("{} labels for a batch of {b}", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return contract(format!("label {bad} out of range for {k} classes"));
        }
        let vals = self.value(logits);
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &vals[i * k..(i + 1) * k];
            let p = softmax_into(row, &mut probs[i * k..(i + 1) * k]);
            loss += p.1 - row[labels[i]];
        }
        loss /= b as f64;
        finite_or_err("softmax_cross_entropy", &[loss])?;
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
            rg,
        ))
    }

    /// `mean((a - b)^2)` over all entries.
    pub fn mean_squared_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mean_squared_diff")?;
        let va = self.value(a);
        let vb = self.value(b);
        let m = va.iter().zip(vb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / va.len() as f64;
        finite_or_err("mean_squared_diff", &[m])?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![1], vec![m], Op::MeanSquaredDiff { a, b }, rg))
    }

    /// Per-cloud Chamfer distance for batches of clouds stacked as
    /// `a: [s·na, 3]`, `b: [s·nb, 3]`; returns `[s]`.
    ///
    /// One-directional: mean over points of `a` of the Euclidean distance to
    /// the nearest point of `b`. Symmetric: half the sum of both directions.
    pub fn chamfer(&mut self, a: Var, b: Var, clouds: usize, symmetric: bool) -> Result<Var> {
        let (ra, ca) = self.dims2(a, "chamfer lhs")?;
        let (rb, cb) = self.dims2(b, "chamfer rhs")?;
        if ca != 3 || cb != 3 {
            return contract("chamfer expects 3-D points");
        }
        if clouds == 0 || ra % clouds != 0 || rb % clouds != 0 {
            return contract(format!("chamfer: cannot split {ra}/{rb} rows into {clouds} clouds"));
        }
        let na = ra / clouds;
        let nb = rb / clouds;
        let (va, vb) = (self.value(a), self.value(b));
        let mut a_nn = vec![0; ra];
        let mut a_dist = vec![0.0; ra];
        let mut b_nn = vec![0; if symmetric { rb } else { 0 }];
        let mut b_dist = vec![0.0; if symmetric { rb } else { 0 }];
        let mut out = vec![0.0; clouds];
        for s in 0..clouds {
            let pa = &va[s * na * 3..(s + 1) * na * 3];
            let pb = &vb[s * nb * 3..(s + 1) * nb * 3];
            let fwd = nearest_neighbours(pa, pb, &mut a_nn[s * na..(s + 1) * na], &mut a_dist[s * na..(s + 1) * na]);
            if symmetric {
                let bwd = nearest_neighbours(pb, pa, &mut b_nn[s * nb..(s + 1) * nb], &mut b_dist[s * nb..(s + 1) * nb]);
                out[s] = 0.5 * (fwd / na as f64 + bwd / nb as f64);
            } else {
                out[s] = fwd / na as f64;
            }
        }
        finite_or_err("chamfer", &out)?;
        let rg = self.rg(a) || self.rg(b);
        let saved = ChamferSaved { a, b, a_points: na, b_points: nb, symmetric, a_nn, a_dist, b_nn, b_dist };
        Ok(self.push(vec![clouds], out, Op::Chamfer(saved), rg))
    }

    /// Reverse-mode sweep from a scalar `seed` node.
    pub fn backward(&self, seed: Var) -> Result<Gradients> {
        if seed.0 >= self.nodes.len() {
            return contract("backward seed is not on this tape");
        }
        if self.node(seed).value.len() != 1 {
            return contract(format!(
                "backward seed must be scalar, got shape {:?}",
                self.node(seed).shape
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; seed.0 + 1];
        grads[seed.0] = Some(vec![1.0]);
        for idx in (0..=seed.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.iter().all(|v| v.is_finite()) {
                    return numeric(format!("non-finite gradient at node {i}"));
                }
            }
        }
        let lens = self.nodes.iter().map(|n| n.value.len()).collect();
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads, lens })
    }

    fn accumulate<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (rows, inner) = (self.shape(*x)[0], self.shape(*x)[1]);
                let out_w = self.shape(*w)[1];
                let gop = Operand::new(g, rows, out_w);
                if let Some(dx) = self.accumulate(grads, *x) {
                    gemm(gop, Operand::new(self.value(*w), inner, out_w).t(), 1.0, dx);
                }
                if let Some(dw) = self.accumulate(grads, *w) {
                    gemm(Operand::new(self.value(*x), rows, inner).t(), gop, 1.0, dw);
                }
                if let Some(db) = self.accumulate(grads, *b) {
                    for row in g.chunks_exact(out_w) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                if let Some(dx) = self.accumulate(grads, *x) {
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Sigmoid { x } => {
                let y = &node.value;
                if let Some(dx) = self.accumulate(grads, *x) {
                    for ((d, &gi), &yi) in dx.iter_mut().zip(g).zip(y) {
                        *d += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::Softplus { x } => {
                let xv = self.value(*x);
                if let Some(dx) = self.accumulate(grads, *x) {
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(xv) {
                        *d += gi * sigmoid(xi);
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(d) = self.accumulate(grads, v) {
                        d.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(d) = self.accumulate(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                }
                if let Some(d) = self.accumulate(grads, *b) {
                    d.iter_mut().zip(g).for_each(|(d, gi)| *d -= gi);
                }
            }
            Op::Scale { x, factor } => {
                if let Some(d) = self.accumulate(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * factor);
                }
            }
            Op::Mean { x } => {
                if let Some(d) = self.accumulate(grads, *x) {
                    let share = g[0] / d.len() as f64;
                    d.iter_mut().for_each(|d| *d += share);
                }
            }
            Op::Reshape { x } => {
                if let Some(d) = self.accumulate(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                }
            }
            Op::Pick { x, index } => {
                if let Some(d) = self.accumulate(grads, *x) {
                    d[*index] += g[0];
                }
            }
            Op::MaxSegments { x, argmax } => {
                let f = self.shape(*x)[1];
                if let Some(d) = self.accumulate(grads, *x) {
                    for (k, (&row, &gi)) in argmax.iter().zip(g).enumerate() {
                        d[row * f + k % f] += gi;
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / labels.len() as f64;
                if let Some(d) = self.accumulate(grads, *logits) {
                    for (i, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            d[i * k + j] += scale * (probs[i * k + j] - onehot);
                        }
                    }
                }
            }
            Op::MeanSquaredDiff { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let c = 2.0 * g[0] / va.len() as f64;
                if let Some(d) = self.accumulate(grads, *a) {
                    for (i, d) in d.iter_mut().enumerate() {
                        *d += c * (va[i] - vb[i]);
                    }
                }
                if let Some(d) = self.accumulate(grads, *b) {
                    for (i, d) in d.iter_mut().enumerate() {
                        *d -= c * (va[i] - vb[i]);
                    }
                }
            }
            Op::Chamfer(s) => self.chamfer_backward(s, g, grads),
        }
    }

    fn chamfer_backward(&self, s: &ChamferSaved, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let va = self.value(s.a).to_vec();
        let vb = self.value(s.b).to_vec();
        let half = if s.symmetric { 0.5 } else { 1.0 };
        // direction src -> dst: d/dp ||p - q|| = (p - q) / ||p - q||
        let mut dir = |src: &[f64], dst: &[f64], src_var: Var, dst_var: Var, n_src: usize, n_dst: usize, nn: &[usize], dist: &[f64]| {
            let mut d_src = vec![0.0; src.len()];
            let mut d_dst = vec![0.0; dst.len()];
            for (c, &gc) in g.iter().enumerate() {
                let w = gc * half / n_src as f64;
                for i in 0..n_src {
                    let row = c * n_src + i;
                    let dval = dist[row];
                    if dval <= 0.0 {
                        continue;
                    }
                    let q = c * n_dst + nn[row];
                    for k in 0..3 {
                        let unit = (src[row * 3 + k] - dst[q * 3 + k]) / dval;
                        d_src[row * 3 + k] += w * unit;
                        d_dst[q * 3 + k] -= w * unit;
                    }
                }
            }
            if let Some(d) = self.accumulate(grads, src_var) {
                d.iter_mut().zip(&d_src).for_each(|(d, v)| *d += v);
            }
            if let Some(d) = self.accumulate(grads, dst_var) {
                d.iter_mut().zip(&d_dst).for_each(|(d, v)| *d += v);
            }
        };
        dir(&va, &vb, s.a, s.b, s.a_points, s.b_points, &s.a_nn, &s.a_dist);
        if s.symmetric {
            dir(&vb, &va, s.b, s.a, s.b_points, s.a_points, &s.b_nn, &s.b_dist);
        }
    }
}

/// Fills `out` with softmax(row); returns (max, logsumexp).
fn softmax_into(row: &[f64], out: &mut [f64]) -> (f64, f64) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
    (max, max + sum.ln())
}

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; row.len()];
    softmax_into(row, &mut out);
    out
}

/// For each 3-D point in `src`, the index of and Euclidean distance to its
/// nearest point in `dst` (lowest index on ties). Returns the distance sum.
pub(crate) fn nearest_neighbours(src: &[f64], dst: &[f64], nn: &mut [usize], dist: &mut [f64]) -> f64 {
    let mut total = 0.0;
    for (i, p) in src.chunks_exact(3).enumerate() {
        let mut best = f64::INFINITY;
        let mut arg = 0;
        for (j, q) in dst.chunks_exact(3).enumerate() {
            let dx = p[0] - q[0];
            let dy = p[1] - q[1];
            let dz = p[2] - q[2];
            let d2 = dx * dx + dy * dy + dz * dz;
            if d2 < best {
                best = d2;
                arg = j;
            }
        }
        nn[i] = arg;
        dist[i] = best.sqrt();
        total += dist[i];
    }
    total
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_difference_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return contract(format!("finite-difference step must be positive, got {h}"));
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Outcome of [`gradient_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest `|a − n| / max(|a|, |n|, 1e-3)` over all components.
    pub max_rel_err: f64,
    /// Components whose central difference at `h` disagreed with the one at
    /// `h / 10`, meaning a ReLU or max-pool kink lies within `±h`. Those are
    /// compared at `h / 100` instead.
    pub kinked: usize,
    pub components: usize,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Compares `analytic` with central differences of `f` at `x`.
pub fn gradient_check<F>(mut f: F, x: &[f64], analytic: &[f64], h: f64) -> Result<GradCheck>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic.len() != x.len() {
        return contract(format!("{} gradient components for {} inputs", analytic.len(), x.len()));
    }
    let coarse = finite_difference_gradient(&mut f, x, h)?;
    let fine = finite_difference_gradient(&mut f, x, h / 10.0)?;
    let mut out = GradCheck { max_rel_err: 0.0, kinked: 0, components: x.len() };
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let numeric = if rel_err(coarse[i], fine[i]) > 1e-6 {
            out.kinked += 1;
            let hh = h / 100.0;
            let orig = probe[i];
            probe[i] = orig + hh;
            let up = f(&probe);
            probe[i] = orig - hh;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * hh)
        } else {
            coarse[i]
        };
        out.max_rel_err = out.max_rel_err.max(rel_err(analytic[i], numeric));
    }
    Ok(out)
}
