//! Wengert tape for reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so every node's inputs are earlier
//! nodes and a reverse sweep over the node list is a valid topological order.
//! Recorded values are never mutated after they are pushed.

use std::collections::BTreeMap;

use super::ops;
use super::{AutodiffError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Relu(Var),
    Exp(Var),
    PairwiseSqDist(Var, Var),
    LogSumExp(Var),
    Softmax(Var, f64),
    LogSoftmax(Var),
    KlDiv(Var, Var),
    GroupMean(Var, Vec<usize>, usize),
    Gather(Var, Vec<usize>),
    SelectRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients of a scalar loss, keyed by the parameter handles requested.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_var: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.by_var.get(&var)
    }

    pub fn len(&self) -> usize {
        self.by_var.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_var.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.by_var.iter().map(|(v, t)| (*v, t))
    }

    /// Gradients in the order of `vars`.
    pub fn collect(&self, vars: &[Var]) -> Vec<Tensor> {
        vars.iter()
            .map(|v| {
                self.by_var
                    .get(v)
                    .cloned()
                    .expect("gradient requested for every var")
            })
            .collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Records a differentiable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<Var, AutodiffError> {
        let value = eval_op(&op, |v| &self.nodes[v.0].value)?;
        let requires_grad = inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(op, value, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.record(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.record(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.record(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, AutodiffError> {
        self.record(Op::Scale(a, s))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, AutodiffError> {
        self.record(Op::AddBias(a, bias))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.record(Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.record(Op::Exp(a))
    }

    pub fn pairwise_sqdist(&mut self, z: Var, c: Var) -> Result<Var, AutodiffError> {
        self.record(Op::PairwiseSqDist(z, c))
    }

    pub fn logsumexp(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.record(Op::LogSumExp(a))
    }

    pub fn softmax(&mut self, a: Var, temperature: f64) -> Result<Var, AutodiffError> {
        self.record(Op::Softmax(a, temperature))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.record(Op::LogSoftmax(a))
    }

    pub fn kl_div(&mut self, p: Var, q: Var) -> Result<Var, AutodiffError> {
        self.record(Op::KlDiv(p, q))
    }

    pub fn group_mean(&mut self, z: Var, labels: &[usize], k: usize) -> Result<Var, AutodiffError> {
        self.record(Op::GroupMean(z, labels.to_vec(), k))
    }

    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var, AutodiffError> {
        self.record(Op::Gather(a, index.to_vec()))
    }

    /// Rows `index` of matrix `a`; repeated indices are allowed.
    pub fn select_rows(&mut self, a: Var, index: &[usize]) -> Result<Var, AutodiffError> {
        self.record(Op::SelectRows(a, index.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.record(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.record(Op::Mean(a))
    }

    /// Re-evaluates every non-leaf node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>, AutodiffError> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => {
                    let vals = &values;
                    eval_op(op, |v| &vals[v.0])?
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Activation pattern of every relu on the tape: `true` where the
    /// input was strictly positive. Used to detect kinks in gradient checks.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                out.extend(self.nodes[a.0].value.data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    /// Reverse sweep from a scalar `loss`. Requested vars that the loss does
    /// not depend on receive zero gradients.
    pub fn backward(&self, loss: Var, wrt: &[Var]) -> Result<Gradients, AutodiffError> {
        if loss.0 >= self.nodes.len() {
            return Err(AutodiffError::UnknownVar(loss.0));
        }
        if let Some(v) = wrt.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(AutodiffError::UnknownVar(v.0));
        }
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(loss_value.shape().to_vec()));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut by_var = BTreeMap::new();
        for &v in wrt {
            let shape = self.nodes[v.0].value.shape().to_vec();
            let g = match grads.get(v.0).and_then(Option::as_ref) {
                Some(g) => Tensor::new(shape, g.clone())?,
                None => Tensor::zeros(shape),
            };
            by_var.insert(v, g);
        }
        Ok(Gradients { by_var })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let out = &node.value;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if needs(*a) {
                    accumulate(grads, *a, &ops::matmul_nt(g, bv.data(), m, k, n));
                }
                if needs(*b) {
                    accumulate(grads, *b, &ops::matmul_tn(av.data(), g, m, k, n));
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g);
                }
                if needs(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g);
                }
                if needs(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let d: Vec<f64> = g.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                    accumulate(grads, *a, &d);
                }
                if needs(*b) {
                    let d: Vec<f64> = g.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                    accumulate(grads, *b, &d);
                }
            }
            Op::Scale(a, s) => {
                let d: Vec<f64> = g.iter().map(|g| g * s).collect();
                accumulate(grads, *a, &d);
            }
            Op::AddBias(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g);
                }
                if needs(*b) {
                    let n = val(*b).numel();
                    let mut d = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (o, v) in d.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *b, &d);
                }
            }
            Op::Relu(a) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(val(*a).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *a, &d);
            }
            Op::Exp(a) => {
                let d: Vec<f64> = g.iter().zip(out.data()).map(|(g, y)| g * y).collect();
                accumulate(grads, *a, &d);
            }
            Op::PairwiseSqDist(z, c) => {
                let (zv, cv) = (val(*z), val(*c));
                let (m, k, f) = (zv.rows(), cv.rows(), zv.cols());
                let mut dz = vec![0.0; m * f];
                let mut dc = vec![0.0; k * f];
                for i in 0..m {
                    let zi = zv.row(i);
                    for j in 0..k {
                        let w = 2.0 * g[i * k + j];
                        if w == 0.0 {
                            continue;
                        }
                        let cj = cv.row(j);
                        for p in 0..f {
                            let diff = w * (zi[p] - cj[p]);
                            dz[i * f + p] += diff;
                            dc[j * f + p] -= diff;
                        }
                    }
                }
                if needs(*z) {
                    accumulate(grads, *z, &dz);
                }
                if needs(*c) {
                    accumulate(grads, *c, &dc);
                }
            }
            Op::LogSumExp(a) => {
                let av = val(*a);
                let n = av.cols();
                let mut d = Vec::with_capacity(av.numel());
                for (i, gi) in g.iter().enumerate() {
                    let lse = out.data()[i];
                    d.extend(av.row(i).iter().map(|&x| gi * (x - lse).exp()));
                }
                debug_assert_eq!(d.len(), av.rows() * n);
                accumulate(grads, *a, &d);
            }
            Op::Softmax(a, t) => {
                let n = out.cols();
                let mut d = Vec::with_capacity(out.numel());
                for (s, gr) in out.data().chunks(n).zip(g.chunks(n)) {
                    let dot: f64 = s.iter().zip(gr).map(|(s, g)| s * g).sum();
                    d.extend(s.iter().zip(gr).map(|(s, g)| s * (g - dot) / t));
                }
                accumulate(grads, *a, &d);
            }
            Op::LogSoftmax(a) => {
                let n = out.cols();
                let mut d = Vec::with_capacity(out.numel());
                for (ls, gr) in out.data().chunks(n).zip(g.chunks(n)) {
                    let total: f64 = gr.iter().sum();
                    d.extend(ls.iter().zip(gr).map(|(l, g)| g - l.exp() * total));
                }
                accumulate(grads, *a, &d);
            }
            Op::KlDiv(p, q) => {
                let (pv, qv) = (val(*p), val(*q));
                let n = pv.cols();
                if needs(*p) {
                    let mut d = Vec::with_capacity(pv.numel());
                    for (i, gi) in g.iter().enumerate() {
                        d.extend(pv.row(i).iter().zip(qv.row(i)).map(|(&pi, &qi)| {
                            // p = 0 sits on the boundary of the simplex; use the
                            // zero subgradient there.
                            if pi > 0.0 {
                                gi * ((pi / qi).ln() + 1.0)
                            } else {
                                0.0
                            }
                        }));
                    }
                    accumulate(grads, *p, &d);
                }
                if needs(*q) {
                    let mut d = Vec::with_capacity(qv.numel());
                    for (i, gi) in g.iter().enumerate() {
                        d.extend(pv.row(i).iter().zip(qv.row(i)).map(|(&pi, &qi)| {
                            if pi > 0.0 {
                                -gi * pi / qi
                            } else {
                                0.0
                            }
                        }));
                    }
                    debug_assert_eq!(d.len(), pv.rows() * n);
                    accumulate(grads, *q, &d);
                }
            }
            Op::GroupMean(z, labels, k) => {
                let f = out.cols();
                let counts = ops::group_counts(labels, *k).expect("validated at record time");
                let mut d = Vec::with_capacity(labels.len() * f);
                for &y in labels {
                    let inv = counts[y] as f64;
                    d.extend(g[y * f..(y + 1) * f].iter().map(|v| v / inv));
                }
                accumulate(grads, *z, &d);
            }
            Op::Gather(a, idx) => {
                let n = val(*a).cols();
                let mut d = vec![0.0; val(*a).numel()];
                for (i, (&j, gi)) in idx.iter().zip(g).enumerate() {
                    d[i * n + j] = *gi;
                }
                accumulate(grads, *a, &d);
            }
            Op::SelectRows(a, idx) => {
                let n = val(*a).cols();
                let mut d = vec![0.0; val(*a).numel()];
                for (i, &r) in idx.iter().enumerate() {
                    for (o, gi) in d[r * n..(r + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n]) {
                        *o += gi;
                    }
                }
                accumulate(grads, *a, &d);
            }
            Op::Sum(a) => {
                let d = vec![g[0]; val(*a).numel()];
                accumulate(grads, *a, &d);
            }
            Op::Mean(a) => {
                let n = val(*a).numel();
                let d = vec![g[0] / n as f64; n];
                accumulate(grads, *a, &d);
            }
        }
    }
}

fn eval_op<'a>(op: &Op, val: impl Fn(Var) -> &'a Tensor) -> Result<Tensor, AutodiffError> {
    Ok(match op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::MatMul(a, b) => ops::matmul(val(*a), val(*b))?,
        Op::Add(a, b) => ops::add(val(*a), val(*b))?,
        Op::Sub(a, b) => ops::sub(val(*a), val(*b))?,
        Op::Mul(a, b) => ops::mul(val(*a), val(*b))?,
        Op::Scale(a, s) => ops::scale(val(*a), *s),
        Op::AddBias(a, b) => ops::add_bias(val(*a), val(*b))?,
        Op::Relu(a) => ops::relu(val(*a)),
        Op::Exp(a) => ops::exp(val(*a)),
        Op::PairwiseSqDist(z, c) => ops::pairwise_sqdist(val(*z), val(*c))?,
        Op::LogSumExp(a) => ops::logsumexp(val(*a))?,
        Op::Softmax(a, t) => ops::softmax(val(*a), *t)?,
        Op::LogSoftmax(a) => ops::log_softmax(val(*a))?,
        Op::KlDiv(p, q) => ops::kl_div(val(*p), val(*q))?,
        Op::GroupMean(z, labels, k) => ops::group_mean(val(*z), labels, *k)?,
        Op::Gather(a, idx) => ops::gather(val(*a), idx)?,
        Op::SelectRows(a, idx) => ops::select_rows(val(*a), idx)?,
        Op::Sum(a) => ops::sum(val(*a)),
        Op::Mean(a) => ops::mean(val(*a))?,
    })
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::AddBias(a, b)
        | Op::PairwiseSqDist(a, b)
        | Op::KlDiv(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Relu(a)
        | Op::Exp(a)
        | Op::LogSumExp(a)
        | Op::Softmax(a, _)
        | Op::LogSoftmax(a)
        | Op::GroupMean(a, ..)
        | Op::Gather(a, _)
        | Op::SelectRows(a, _)
        | Op::Sum(a)
        | Op::Mean(a) => vec![*a],
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, delta: &[f64]) {
    match &mut grads[var.0] {
        Some(g) => {
            for (a, d) in g.iter_mut().zip(delta) {
                *a += d;
            }
        }
        slot @ None => *slot = Some(delta.to_vec()),
    }
}
