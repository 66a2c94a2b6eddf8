//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`GradTape`] records every intermediate value of a forward pass. Calling
//! [`GradTape::backward`] on a scalar node walks the records in reverse and
//! accumulates adjoints for every node that depends on a parameter. Constant
//! leaves never receive adjoints, which is how stop-gradient is expressed:
//! feed a value in with [`GradTape::constant`] and nothing flows back into
//! whatever produced it.

use std::collections::BTreeMap;

use super::matrix::Matrix;
use crate::error::{Result, TedError};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifies one parameter tensor: `group` selects the network (encoder,
/// classifier, Q head, ...), `index` the tensor within it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamSlot {
    pub group: u16,
    pub index: u16,
}

impl ParamSlot {
    pub const fn new(group: u16, index: u16) -> Self {
        ParamSlot { group, index }
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddScalar(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Abs(Var),
    Square(Var),
    LayerNorm {
        input: Var,
        inv_std: Vec<f64>,
    },
    SumCols(Var),
    VStack(Vec<Var>),
    Gather {
        input: Var,
        cols: Vec<usize>,
    },
    MseToTarget {
        input: Var,
        target: Vec<f64>,
    },
    WeightedBce {
        logits: Var,
        labels: Vec<f64>,
        alpha: f64,
        positive_weight: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::AddScalar(..) => "add_scalar",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Abs(_) => "abs",
            Op::Square(_) => "square",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SumCols(_) => "sum_cols",
            Op::VStack(_) => "vstack",
            Op::Gather { .. } => "gather",
            Op::MseToTarget { .. } => "mse",
            Op::WeightedBce { .. } => "weighted_bce",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
    params: Vec<(ParamSlot, Var)>,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.as_slice()[0]
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Records a trainable tensor. Registering the same slot twice is allowed;
    /// the adjoints are summed.
    pub fn param(&mut self, value: &Matrix, slot: ParamSlot) -> Var {
        let v = self.push(value.clone(), Op::Param, true);
        self.params.push((slot, v));
        v
    }

    /// Leaf that is not a parameter but whose adjoint is wanted.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Param, true)
    }

    pub fn matmul(&mut self, a: Var, w: Var) -> Var {
        let value = self.value(a).matmul(self.value(w));
        let ng = self.needs(a) || self.needs(w);
        self.push(value, Op::MatMul(a, w), ng)
    }

    /// `a + r` with the 1×m row `r` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(r));
        assert_eq!(rm.rows(), 1);
        assert_eq!(am.cols(), rm.cols());
        let mut out = am.clone();
        let row = rm.as_slice().to_vec();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&row) {
                *o += b;
            }
        }
        let ng = self.needs(a) || self.needs(r);
        self.push(out, Op::AddRow(a, r), ng)
    }

    /// `a ⊙ r` with the 1×m row `r` broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(r));
        assert_eq!(rm.rows(), 1);
        assert_eq!(am.cols(), rm.cols());
        let mut out = am.clone();
        let row = rm.as_slice().to_vec();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&row) {
                *o *= b;
            }
        }
        let ng = self.needs(a) || self.needs(r);
        self.push(out, Op::MulRow(a, r), ng)
    }

    /// `a + c` for a 1×1 node `c`.
    pub fn add_scalar(&mut self, a: Var, c: Var) -> Var {
        let c_val = self.scalar(c);
        let out = self.value(a).map(|x| x + c_val);
        let ng = self.needs(a) || self.needs(c);
        self.push(out, Op::AddScalar(a, c), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x * k);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, k), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.needs(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        let ng = self.needs(a);
        self.push(out, Op::Abs(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let ng = self.needs(a);
        self.push(out, Op::Square(a), ng)
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let (rows, cols) = am.shape();
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let (mean, istd) = row_moments(am.row(i));
            for (o, &x) in out.row_mut(i).iter_mut().zip(am.row(i)) {
                *o = (x - mean) * istd;
            }
            inv_std.push(istd);
        }
        let ng = self.needs(a);
        self.push(out, Op::LayerNorm { input: a, inv_std }, ng)
    }

    /// Row sums: N×m → N×1.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let sums: Vec<f64> = (0..am.rows()).map(|i| am.row(i).iter().sum()).collect();
        let out = Matrix::from_vec(am.rows(), 1, sums);
        let ng = self.needs(a);
        self.push(out, Op::SumCols(a), ng)
    }

    /// Concatenates nodes with equal column counts along the row axis.
    pub fn vstack(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "vstack column mismatch");
            data.extend_from_slice(m.as_slice());
            rows += m.rows();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Matrix::from_vec(rows, cols, data), Op::VStack(parts.to_vec()), ng)
    }

    /// Picks column `cols[i]` from row `i`: N×m → N×1.
    pub fn gather(&mut self, a: Var, cols: &[usize]) -> Var {
        let am = self.value(a);
        assert_eq!(am.rows(), cols.len());
        let picked: Vec<f64> = cols.iter().enumerate().map(|(i, &c)| am[(i, c)]).collect();
        let out = Matrix::from_vec(cols.len(), 1, picked);
        let ng = self.needs(a);
        self.push(
            out,
            Op::Gather {
                input: a,
                cols: cols.to_vec(),
            },
            ng,
        )
    }

    /// Mean of squared differences between an N×1 node and a fixed target.
    pub fn mse_to_target(&mut self, a: Var, target: &[f64]) -> Var {
        let am = self.value(a);
        assert_eq!(am.shape(), (target.len(), 1));
        let n = target.len() as f64;
        let loss = am
            .as_slice()
            .iter()
            .zip(target)
            .map(|(q, t)| (q - t) * (q - t))
            .sum::<f64>()
            / n;
        let ng = self.needs(a);
        self.push(
            Matrix::scalar(loss),
            Op::MseToTarget {
                input: a,
                target: target.to_vec(),
            },
            ng,
        )
    }

    /// Mean weighted binary cross-entropy on logits (N×1):
    /// `-alpha * [w·l·log σ(y) + (1-l)·log(1-σ(y))]`.
    pub fn weighted_bce(&mut self, logits: Var, labels: &[f64], alpha: f64, positive_weight: f64) -> Var {
        let ym = self.value(logits);
        assert_eq!(ym.shape(), (labels.len(), 1));
        let loss = ym
            .as_slice()
            .iter()
            .zip(labels)
            .map(|(&y, &l)| weighted_bce_term(y, l, alpha, positive_weight))
            .sum::<f64>()
            / labels.len() as f64;
        let ng = self.needs(logits);
        self.push(
            Matrix::scalar(loss),
            Op::WeightedBce {
                logits,
                labels: labels.to_vec(),
                alpha,
                positive_weight,
            },
            ng,
        )
    }

    /// First node holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    /// Backpropagates from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar loss");
        if !self.value(loss).is_finite() {
            let (node, op) = self
                .nodes
                .iter()
                .take(loss.0 + 1)
                .enumerate()
                .find(|(_, n)| !n.value.is_finite())
                .map(|(i, n)| (i, n.op.name()))
                .unwrap_or((loss.0, self.nodes[loss.0].op.name()));
            return Err(TedError::NumericalFailure { node, op });
        }

        let mut adj: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut adj);
            adj[idx] = Some(g);
        }

        let mut by_slot: BTreeMap<ParamSlot, Matrix> = BTreeMap::new();
        for &(slot, v) in &self.params {
            let g = adj[v.0]
                .clone()
                .unwrap_or_else(|| Matrix::zeros(self.value(v).rows(), self.value(v).cols()));
            match by_slot.get_mut(&slot) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    by_slot.insert(slot, g);
                }
            }
        }
        Ok(Gradients { adjoints: adj, by_slot })
    }

    fn accumulate(&self, adj: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.needs(v) {
            return;
        }
        match &mut adj[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Matrix, g: &Matrix, adj: &mut [Option<Matrix>]) {
        match op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, w) => {
                if self.needs(*a) {
                    let ga = g.matmul_transposed(self.value(*w));
                    self.accumulate(adj, *a, ga);
                }
                if self.needs(*w) {
                    let gw = self.value(*a).transposed_matmul(g);
                    self.accumulate(adj, *w, gw);
                }
            }
            Op::AddRow(a, r) => {
                self.accumulate(adj, *a, g.clone());
                if self.needs(*r) {
                    self.accumulate(adj, *r, column_sums(g));
                }
            }
            Op::MulRow(a, r) => {
                let (am, rm) = (self.value(*a), self.value(*r));
                if self.needs(*a) {
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        for (x, &k) in ga.row_mut(i).iter_mut().zip(rm.as_slice()) {
                            *x *= k;
                        }
                    }
                    self.accumulate(adj, *a, ga);
                }
                if self.needs(*r) {
                    self.accumulate(adj, *r, column_sums(&g.zip_map(am, |x, y| x * y)));
                }
            }
            Op::AddScalar(a, c) => {
                self.accumulate(adj, *a, g.clone());
                if self.needs(*c) {
                    self.accumulate(adj, *c, Matrix::scalar(g.as_slice().iter().sum()));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, g.clone());
                if self.needs(*b) {
                    self.accumulate(adj, *b, g.map(|x| -x));
                }
            }
            Op::Scale(a, k) => {
                let k = *k;
                self.accumulate(adj, *a, g.map(|x| x * k));
            }
            Op::Relu(a) => {
                let ga = g.zip_map(self.value(*a), |x, v| if v > 0.0 { x } else { 0.0 });
                self.accumulate(adj, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = g.zip_map(out, |x, t| x * (1.0 - t * t));
                self.accumulate(adj, *a, ga);
            }
            Op::Abs(a) => {
                let ga = g.zip_map(self.value(*a), |x, v| x * sign(v));
                self.accumulate(adj, *a, ga);
            }
            Op::Square(a) => {
                let ga = g.zip_map(self.value(*a), |x, v| 2.0 * x * v);
                self.accumulate(adj, *a, ga);
            }
            Op::LayerNorm { input, inv_std } => {
                // dx = istd * (g - mean(g) - xhat * mean(g ⊙ xhat))
                let (rows, cols) = out.shape();
                let mut ga = Matrix::zeros(rows, cols);
                let m = cols as f64;
                for i in 0..rows {
                    let (gr, xr) = (g.row(i), out.row(i));
                    let mean_g = gr.iter().sum::<f64>() / m;
                    let mean_gx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / m;
                    for (j, o) in ga.row_mut(i).iter_mut().enumerate() {
                        *o = inv_std[i] * (gr[j] - mean_g - xr[j] * mean_gx);
                    }
                }
                self.accumulate(adj, *input, ga);
            }
            Op::SumCols(a) => {
                let am = self.value(*a);
                let mut ga = Matrix::zeros(am.rows(), am.cols());
                for i in 0..am.rows() {
                    let gi = g.as_slice()[i];
                    ga.row_mut(i).iter_mut().for_each(|x| *x = gi);
                }
                self.accumulate(adj, *a, ga);
            }
            Op::VStack(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.needs(p) {
                        let slice = g.as_slice()[offset * cols..(offset + rows) * cols].to_vec();
                        self.accumulate(adj, p, Matrix::from_vec(rows, cols, slice));
                    }
                    offset += rows;
                }
            }
            Op::Gather { input, cols } => {
                let am = self.value(*input);
                let mut ga = Matrix::zeros(am.rows(), am.cols());
                for (i, &c) in cols.iter().enumerate() {
                    ga[(i, c)] = g.as_slice()[i];
                }
                self.accumulate(adj, *input, ga);
            }
            Op::MseToTarget { input, target } => {
                let scale = g.as_slice()[0] * 2.0 / target.len() as f64;
                let q = self.value(*input);
                let ga: Vec<f64> = q.as_slice().iter().zip(target).map(|(q, t)| scale * (q - t)).collect();
                self.accumulate(adj, *input, Matrix::from_vec(target.len(), 1, ga));
            }
            Op::WeightedBce {
                logits,
                labels,
                alpha,
                positive_weight,
            } => {
                let scale = g.as_slice()[0] / labels.len() as f64;
                let ym = self.value(*logits);
                let ga: Vec<f64> = ym
                    .as_slice()
                    .iter()
                    .zip(labels)
                    .map(|(&y, &l)| scale * weighted_bce_grad(y, l, *alpha, *positive_weight))
                    .collect();
                self.accumulate(adj, *logits, Matrix::from_vec(labels.len(), 1, ga));
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = vec![0.0; g.cols()];
    for i in 0..g.rows() {
        for (o, x) in out.iter_mut().zip(g.row(i)) {
            *o += x;
        }
    }
    Matrix::row_vector(out)
}

/// Mean and inverse standard deviation used by layer normalization.
pub fn row_moments(row: &[f64]) -> (f64, f64) {
    let m = row.len() as f64;
    let mean = row.iter().sum::<f64>() / m;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One term of the weighted cross-entropy, using `log σ(y) = -softplus(-y)`
/// and `log(1 - σ(y)) = -softplus(y)`.
pub fn weighted_bce_term(y: f64, label: f64, alpha: f64, positive_weight: f64) -> f64 {
    alpha * (positive_weight * label * softplus(-y) + (1.0 - label) * softplus(y))
}

fn weighted_bce_grad(y: f64, label: f64, alpha: f64, positive_weight: f64) -> f64 {
    let s = sigmoid(y);
    alpha * (-positive_weight * label * (1.0 - s) + (1.0 - label) * s)
}

/// Adjoints produced by [`GradTape::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
    by_slot: BTreeMap<ParamSlot, Matrix>,
}

impl Gradients {
    pub fn param(&self, slot: ParamSlot) -> Option<&Matrix> {
        self.by_slot.get(&slot)
    }

    /// Gradients for `count` consecutive tensors of one group, zeros where the
    /// loss did not reach a tensor.
    pub fn group(&self, group: u16, shapes: &[(usize, usize)]) -> Vec<Matrix> {
        shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| {
                self.by_slot
                    .get(&ParamSlot::new(group, i as u16))
                    .cloned()
                    .unwrap_or_else(|| Matrix::zeros(r, c))
            })
            .collect()
    }

    /// Adjoint of any node; `None` if nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.adjoints.get(v.0).and_then(Option::as_ref)
    }

    pub fn all_finite(&self) -> bool {
        self.by_slot.values().all(Matrix::is_finite)
    }
}
