use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Scalar, Tensor};
use crate::error::{bail, Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    /// Trainable; receives a gradient.
    Param,
    /// Named data that can be rebound before a replayed forward pass.
    Input,
    Constant,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf(LeafKind, Option<String>),
    MatMul(NodeId, NodeId),
    /// Second operand may be a `[1, n]` row broadcast over the first.
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Second operand may be a `[m, 1]` column broadcast over the first.
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddN(Vec<NodeId>),
    Concat(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    SliceRows(NodeId, usize, usize),
    Gather(NodeId, Vec<usize>),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Log(NodeId),
    Softmax(NodeId, Option<Vec<bool>>),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        weights: Vec<T>,
    },
    Sum(NodeId),
    Mean(NodeId),
    SumCols(NodeId),
    Dropout(NodeId, Vec<T>),
}

impl<T> Op<T> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf(..) => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddN(..) => "add_n",
            Op::Concat(..) => "concat",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::Gather(..) => "gather",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Log(..) => "log",
            Op::Softmax(..) => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumCols(..) => "sum_cols",
            Op::Dropout(..) => "dropout",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf(..) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddN(xs) | Op::Concat(xs) | Op::ConcatRows(xs) => xs.clone(),
            Op::Scale(a, _)
            | Op::SliceCols(a, ..)
            | Op::SliceRows(a, ..)
            | Op::Gather(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Log(a)
            | Op::Softmax(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumCols(a)
            | Op::Dropout(a, _) => vec![*a],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Define-by-run tape. Every op is evaluated when it is recorded; the
/// recorded ops can be replayed with [`Graph::forward`] after rebinding
/// named leaves.
#[derive(Clone, Debug)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    leaves: HashMap<String, NodeId>,
    stale: bool,
    seed: u64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self::with_seed(0)
    }

    /// `seed` drives dropout masks.
    pub fn with_seed(seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            leaves: HashMap::new(),
            stale: false,
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.dims2()
    }

    pub fn leaf_id(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    /// Names and ids of every trainable leaf.
    pub fn params(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match &n.op {
            Op::Leaf(LeafKind::Param, Some(name)) => Some((name.as_str(), NodeId(i))),
            _ => None,
        })
    }

    fn push_leaf(&mut self, kind: LeafKind, name: Option<String>, value: Tensor<T>) -> Result<NodeId> {
        if !value.is_finite() {
            bail!(Numeric, "leaf {:?} holds non-finite values", name);
        }
        let id = NodeId(self.nodes.len());
        if let Some(n) = &name {
            if self.leaves.insert(n.clone(), id).is_some() {
                bail!(Input, "leaf name {n:?} bound twice");
            }
        }
        self.nodes.push(Node {
            op: Op::Leaf(kind, name),
            value,
            requires_grad: kind == LeafKind::Param,
        });
        Ok(id)
    }

    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Result<NodeId> {
        self.push_leaf(LeafKind::Param, Some(name.to_string()), value)
    }

    pub fn input(&mut self, name: &str, value: Tensor<T>) -> Result<NodeId> {
        self.push_leaf(LeafKind::Input, Some(name.to_string()), value)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf(LeafKind::Constant, None),
            value,
            requires_grad: false,
        });
        id
    }

    /// Rebinds a named leaf. The graph must be replayed with
    /// [`Graph::forward`] before gradients can be taken again.
    pub fn set_leaf(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .leaf_id(name)
            .ok_or_else(|| Error::Input(format!("no leaf named {name:?}")))?;
        let node = &mut self.nodes[id.0];
        if node.value.shape() != value.shape() {
            bail!(
                Shape,
                "leaf {name:?} has shape {:?}, got {:?}",
                node.value.shape(),
                value.shape()
            );
        }
        node.value = value;
        self.stale = true;
        Ok(())
    }

    /// Binds the given named leaves and recomputes every node once, in
    /// recording order.
    pub fn forward(&mut self, inputs: &[(&str, Tensor<T>)]) -> Result<()> {
        for (name, value) in inputs {
            self.set_leaf(name, value.clone())?;
        }
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf(..)) {
                continue;
            }
            let value = self.eval(i, &self.nodes[i].op)?;
            self.nodes[i].value = value;
        }
        self.stale = false;
        Ok(())
    }

    fn push(&mut self, op: Op<T>) -> Result<NodeId> {
        let id = self.nodes.len();
        let value = self.eval(id, &op)?;
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(id))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }
    pub fn scale(&mut self, a: NodeId, s: T) -> Result<NodeId> {
        self.push(Op::Scale(a, s))
    }
    pub fn add_n(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        self.push(Op::AddN(xs.to_vec()))
    }
    /// Concatenates along columns.
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        self.push(Op::Concat(xs.to_vec()))
    }
    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        self.push(Op::ConcatRows(xs.to_vec()))
    }
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.push(Op::SliceCols(a, start, end))
    }
    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.push(Op::SliceRows(a, start, end))
    }
    /// Row lookup: embedding tables and beam reordering.
    pub fn gather(&mut self, table: NodeId, rows: &[usize]) -> Result<NodeId> {
        self.push(Op::Gather(table, rows.to_vec()))
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Tanh(a))
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid(a))
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Log(a))
    }
    /// Row-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax(a, None))
    }
    /// Row-wise softmax over entries where `keep` is true; the rest are
    /// exactly zero. A fully masked row is an input error.
    pub fn masked_softmax(&mut self, a: NodeId, keep: Vec<bool>) -> Result<NodeId> {
        self.push(Op::Softmax(a, Some(keep)))
    }
    /// `sum_i w_i * -log softmax(logits_i)[targets_i]` as a `1x1` node.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], weights: &[T]) -> Result<NodeId> {
        self.push(Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
        })
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(a))
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Mean(a))
    }
    /// Row sums, `[m, n] -> [m, 1]`.
    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SumCols(a))
    }

    /// Inverted dropout. Identity when `train` is false or `p` is zero.
    pub fn dropout(&mut self, a: NodeId, p: f32, train: bool) -> Result<NodeId> {
        if !train || p <= 0.0 {
            return Ok(a);
        }
        if p >= 1.0 {
            bail!(Config, "dropout rate must be below 1, got {p}");
        }
        let idx = self.nodes.len() as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ idx.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let keep = T::from_f64(1.0 / (1.0 - p as f64));
        let mask = (0..self.nodes[a.0].value.numel())
            .map(|_| if rng.gen::<f32>() < p { T::zero() } else { keep })
            .collect();
        self.push(Op::Dropout(a, mask))
    }

    fn shape_err(&self, id: usize, op: &Op<T>, detail: String) -> Error {
        Error::Shape(format!("node {id} ({}): {detail}", op.kind()))
    }

    fn eval(&self, id: usize, op: &Op<T>) -> Result<Tensor<T>> {
        let v = |n: &NodeId| &self.nodes[n.0].value;
        let out = match op {
            Op::Leaf(..) => unreachable!("leaves are not evaluated"),
            Op::MatMul(a, b) => {
                let (m, k) = v(a).dims2();
                let (k2, n) = v(b).dims2();
                if k != k2 {
                    return Err(self.shape_err(id, op, format!("lhs {:?} rhs {:?}", v(a).shape(), v(b).shape())));
                }
                let mut out = vec![T::zero(); m * n];
                T::gemm(m, k, n, v(a).data(), (k as isize, 1), v(b).data(), (n as isize, 1), &mut out, T::zero());
                Tensor::new(vec![m, n], out)?
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -T::one() } else { T::one() };
                let (m, n) = v(a).dims2();
                let (bm, bn) = v(b).dims2();
                let bd = v(b).data();
                let data: Vec<T> = if (bm, bn) == (m, n) {
                    v(a).data().iter().zip(bd).map(|(&x, &y)| x + sign * y).collect()
                } else if bm == 1 && bn == n {
                    v(a).data()
                        .chunks(n.max(1))
                        .flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| x + sign * y))
                        .collect()
                } else {
                    return Err(self.shape_err(id, op, format!("lhs {:?} rhs {:?}", v(a).shape(), v(b).shape())));
                };
                Tensor::new(vec![m, n], data)?
            }
            Op::Mul(a, b) => {
                let (m, n) = v(a).dims2();
                let (bm, bn) = v(b).dims2();
                let bd = v(b).data();
                let data: Vec<T> = if (bm, bn) == (m, n) {
                    v(a).data().iter().zip(bd).map(|(&x, &y)| x * y).collect()
                } else if bm == m && bn == 1 {
                    v(a).data()
                        .chunks(n.max(1))
                        .zip(bd)
                        .flat_map(|(row, &s)| row.iter().map(move |&x| x * s))
                        .collect()
                } else {
                    return Err(self.shape_err(id, op, format!("lhs {:?} rhs {:?}", v(a).shape(), v(b).shape())));
                };
                Tensor::new(vec![m, n], data)?
            }
            Op::Scale(a, s) => {
                let (m, n) = v(a).dims2();
                Tensor::new(vec![m, n], v(a).data().iter().map(|&x| x * *s).collect())?
            }
            Op::AddN(xs) => {
                let (m, n) = v(&xs[0]).dims2();
                let mut out = vec![T::zero(); m * n];
                for x in xs {
                    if v(x).dims2() != (m, n) {
                        return Err(self.shape_err(id, op, format!("operand {:?} vs {:?}", v(x).shape(), [m, n])));
                    }
                    for (o, &y) in out.iter_mut().zip(v(x).data()) {
                        *o = *o + y;
                    }
                }
                Tensor::new(vec![m, n], out)?
            }
            Op::Concat(xs) => {
                let m = v(&xs[0]).rows();
                if let Some(bad) = xs.iter().find(|x| v(x).rows() != m) {
                    return Err(self.shape_err(id, op, format!("row count {} vs {}", v(bad).rows(), m)));
                }
                let n: usize = xs.iter().map(|x| v(x).cols()).sum();
                let mut out = Vec::with_capacity(m * n);
                for r in 0..m {
                    for x in xs {
                        out.extend_from_slice(v(x).row(r));
                    }
                }
                Tensor::new(vec![m, n], out)?
            }
            Op::ConcatRows(xs) => {
                let n = v(&xs[0]).cols();
                if let Some(bad) = xs.iter().find(|x| v(x).cols() != n) {
                    return Err(self.shape_err(id, op, format!("column count {} vs {}", v(bad).cols(), n)));
                }
                let m: usize = xs.iter().map(|x| v(x).rows()).sum();
                let mut out = Vec::with_capacity(m * n);
                for x in xs {
                    out.extend_from_slice(v(x).data());
                }
                Tensor::new(vec![m, n], out)?
            }
            Op::SliceCols(a, s, e) => {
                let (m, n) = v(a).dims2();
                if s >= e || *e > n {
                    return Err(self.shape_err(id, op, format!("columns {s}..{e} of {n}")));
                }
                let mut out = Vec::with_capacity(m * (e - s));
                for r in 0..m {
                    out.extend_from_slice(&v(a).row(r)[*s..*e]);
                }
                Tensor::new(vec![m, e - s], out)?
            }
            Op::SliceRows(a, s, e) => {
                let (m, n) = v(a).dims2();
                if s >= e || *e > m {
                    return Err(self.shape_err(id, op, format!("rows {s}..{e} of {m}")));
                }
                Tensor::new(vec![e - s, n], v(a).data()[s * n..e * n].to_vec())?
            }
            Op::Gather(t, rows) => {
                let (m, n) = v(t).dims2();
                let mut out = Vec::with_capacity(rows.len() * n);
                for &r in rows {
                    if r >= m {
                        bail!(Input, "node {id} (gather): row {r} out of range for table with {m} rows");
                    }
                    out.extend_from_slice(v(t).row(r));
                }
                Tensor::new(vec![rows.len(), n], out)?
            }
            Op::Tanh(a) => map(v(a), |x| x.tanh()),
            Op::Sigmoid(a) => map(v(a), |x| T::one() / (T::one() + (-x).exp())),
            Op::Log(a) => map(v(a), |x| x.ln()),
            Op::Softmax(a, mask) => {
                let (m, n) = v(a).dims2();
                if let Some(mask) = mask {
                    if mask.len() != m * n {
                        return Err(self.shape_err(id, op, format!("mask of {} for {:?}", mask.len(), [m, n])));
                    }
                }
                let mut out = vec![T::zero(); m * n];
                for r in 0..m {
                    let row = v(a).row(r);
                    let keep = |j: usize| mask.as_ref().map_or(true, |mk| mk[r * n + j]);
                    let mut mx = T::neg_infinity();
                    for (j, &x) in row.iter().enumerate() {
                        if keep(j) && x > mx {
                            mx = x;
                        }
                    }
                    if mx == T::neg_infinity() {
                        bail!(Input, "node {id} (softmax): row {r} has every position masked");
                    }
                    let mut total = T::zero();
                    for (j, &x) in row.iter().enumerate() {
                        if keep(j) {
                            let e = (x - mx).exp();
                            out[r * n + j] = e;
                            total = total + e;
                        }
                    }
                    for o in &mut out[r * n..(r + 1) * n] {
                        *o = *o / total;
                    }
                }
                Tensor::new(vec![m, n], out)?
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
            } => {
                let (m, n) = v(logits).dims2();
                if targets.len() != m || weights.len() != m {
                    return Err(self.shape_err(
                        id,
                        op,
                        format!("{} targets / {} weights for {m} rows", targets.len(), weights.len()),
                    ));
                }
                let mut total = T::zero();
                for r in 0..m {
                    if weights[r] == T::zero() {
                        continue;
                    }
                    if targets[r] >= n {
                        bail!(Input, "node {id} (cross_entropy): target {} out of range {n}", targets[r]);
                    }
                    let row = v(logits).row(r);
                    total = total + weights[r] * (log_sum_exp(row) - row[targets[r]]);
                }
                Tensor::scalar(total)
            }
            Op::Sum(a) => Tensor::scalar(v(a).data().iter().fold(T::zero(), |s, &x| s + x)),
            Op::Mean(a) => {
                let n = v(a).numel();
                if n == 0 {
                    return Err(self.shape_err(id, op, "mean of empty tensor".into()));
                }
                let s = v(a).data().iter().fold(T::zero(), |s, &x| s + x);
                Tensor::scalar(s / T::from_f64(n as f64))
            }
            Op::SumCols(a) => {
                let (m, n) = v(a).dims2();
                let data = (0..m)
                    .map(|r| v(a).data()[r * n..(r + 1) * n].iter().fold(T::zero(), |s, &x| s + x))
                    .collect();
                Tensor::new(vec![m, 1], data)?
            }
            Op::Dropout(a, mask) => {
                let (m, n) = v(a).dims2();
                Tensor::new(vec![m, n], v(a).data().iter().zip(mask).map(|(&x, &k)| x * k).collect())?
            }
        };
        if !out.is_finite() {
            bail!(Numeric, "node {id} ({}) produced non-finite values", op.kind());
        }
        Ok(out)
    }

    /// Reverse sweep from a one-element `seed`, summing over fan-out in
    /// reverse recording order.
    pub fn backward(&self, seed: NodeId) -> Result<Gradients<T>> {
        if self.stale {
            bail!(State, "leaves were rebound since the last forward pass");
        }
        if seed.0 >= self.nodes.len() {
            bail!(State, "node {} has not been evaluated", seed.0);
        }
        if self.nodes[seed.0].value.numel() != 1 {
            bail!(
                Shape,
                "backward seed must be a scalar, node {} has shape {:?}",
                seed.0,
                self.nodes[seed.0].value.shape()
            );
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; seed.0 + 1];
        grads[seed.0] = Some(vec![T::one()]);
        for i in (0..=seed.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(i, &node.op, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        let mut out = Vec::with_capacity(grads.len());
        for (i, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[i];
            out.push(match g {
                Some(g) if node.requires_grad => Some(Tensor::new(node.value.shape().to_vec(), g)?),
                _ => None,
            });
        }
        let params = self
            .params()
            .filter(|(_, id)| id.0 < out.len() && out[id.0].is_some())
            .map(|(name, id)| (name.to_string(), id))
            .collect();
        Ok(Gradients { grads: out, params })
    }

    fn propagate(&self, id: usize, op: &Op<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let v = |n: &NodeId| &self.nodes[n.0].value;
        let wants = |n: &NodeId| self.nodes[n.0].requires_grad;
        let y = &self.nodes[id].value;
        match op {
            Op::Leaf(..) => {}
            Op::MatMul(a, b) => {
                let (m, k) = v(a).dims2();
                let n = v(b).cols();
                if wants(a) {
                    // dA += dY @ B^T
                    let ga = slot(grads, *a, m * k);
                    T::gemm(m, n, k, dy, (n as isize, 1), v(b).data(), (1, n as isize), ga, T::one());
                }
                if wants(b) {
                    // dB += A^T @ dY
                    let gb = slot(grads, *b, k * n);
                    T::gemm(k, m, n, v(a).data(), (1, k as isize), dy, (n as isize, 1), gb, T::one());
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -T::one() } else { T::one() };
                if wants(a) {
                    axpy(slot(grads, *a, dy.len()), dy, T::one());
                }
                if wants(b) {
                    let nb = v(b).numel();
                    let gb = slot(grads, *b, nb);
                    if nb == dy.len() {
                        axpy(gb, dy, sign);
                    } else {
                        for row in dy.chunks(nb) {
                            axpy(gb, row, sign);
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let n = v(a).cols();
                let broadcast = v(b).numel() != v(a).numel();
                if wants(a) {
                    let ga = slot(grads, *a, dy.len());
                    if broadcast {
                        for ((g, d), &s) in ga.chunks_mut(n).zip(dy.chunks(n)).zip(v(b).data()) {
                            axpy(g, d, s);
                        }
                    } else {
                        for ((g, &d), &s) in ga.iter_mut().zip(dy).zip(v(b).data()) {
                            *g = *g + d * s;
                        }
                    }
                }
                if wants(b) {
                    let gb = slot(grads, *b, v(b).numel());
                    if broadcast {
                        for ((g, d), x) in gb.iter_mut().zip(dy.chunks(n)).zip(v(a).data().chunks(n)) {
                            *g = *g + dot(d, x);
                        }
                    } else {
                        for ((g, &d), &x) in gb.iter_mut().zip(dy).zip(v(a).data()) {
                            *g = *g + d * x;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if wants(a) {
                    axpy(slot(grads, *a, dy.len()), dy, *s);
                }
            }
            Op::AddN(xs) => {
                for x in xs {
                    if wants(x) {
                        axpy(slot(grads, *x, dy.len()), dy, T::one());
                    }
                }
            }
            Op::Concat(xs) => {
                let (m, n) = y.dims2();
                let mut offset = 0;
                for x in xs {
                    let w = v(x).cols();
                    if wants(x) {
                        let g = slot(grads, *x, m * w);
                        for r in 0..m {
                            axpy(&mut g[r * w..(r + 1) * w], &dy[r * n + offset..r * n + offset + w], T::one());
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for x in xs {
                    let len = v(x).numel();
                    if wants(x) {
                        axpy(slot(grads, *x, len), &dy[offset..offset + len], T::one());
                    }
                    offset += len;
                }
            }
            Op::SliceCols(a, s, e) => {
                if wants(a) {
                    let (m, n) = v(a).dims2();
                    let w = e - s;
                    let g = slot(grads, *a, m * n);
                    for r in 0..m {
                        axpy(&mut g[r * n + s..r * n + e], &dy[r * w..(r + 1) * w], T::one());
                    }
                }
            }
            Op::SliceRows(a, s, e) => {
                if wants(a) {
                    let n = v(a).cols();
                    let g = slot(grads, *a, v(a).numel());
                    axpy(&mut g[s * n..e * n], dy, T::one());
                }
            }
            Op::Gather(t, rows) => {
                if wants(t) {
                    let n = v(t).cols();
                    let g = slot(grads, *t, v(t).numel());
                    for (i, &r) in rows.iter().enumerate() {
                        axpy(&mut g[r * n..(r + 1) * n], &dy[i * n..(i + 1) * n], T::one());
                    }
                }
            }
            Op::Tanh(a) => {
                if wants(a) {
                    let g = slot(grads, *a, dy.len());
                    for ((g, &d), &yv) in g.iter_mut().zip(dy).zip(y.data()) {
                        *g = *g + d * (T::one() - yv * yv);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if wants(a) {
                    let g = slot(grads, *a, dy.len());
                    for ((g, &d), &yv) in g.iter_mut().zip(dy).zip(y.data()) {
                        *g = *g + d * yv * (T::one() - yv);
                    }
                }
            }
            Op::Log(a) => {
                if wants(a) {
                    let g = slot(grads, *a, dy.len());
                    for ((g, &d), &x) in g.iter_mut().zip(dy).zip(v(a).data()) {
                        *g = *g + d / x;
                    }
                }
            }
            Op::Softmax(a, _) => {
                if wants(a) {
                    let n = y.cols();
                    let g = slot(grads, *a, dy.len());
                    for ((g, d), p) in g.chunks_mut(n).zip(dy.chunks(n)).zip(y.data().chunks(n)) {
                        let inner = dot(d, p);
                        for ((g, &d), &p) in g.iter_mut().zip(d).zip(p) {
                            *g = *g + p * (d - inner);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
            } => {
                if wants(logits) {
                    let n = v(logits).cols();
                    let g = slot(grads, *logits, v(logits).numel());
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == T::zero() {
                            continue;
                        }
                        let row = v(logits).row(r);
                        let lse = log_sum_exp(row);
                        let scale = dy[0] * w;
                        for (j, (g, &x)) in g[r * n..(r + 1) * n].iter_mut().zip(row).enumerate() {
                            let p = (x - lse).exp();
                            let target = if j == t { T::one() } else { T::zero() };
                            *g = *g + scale * (p - target);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if wants(a) {
                    let g = slot(grads, *a, v(a).numel());
                    for g in g.iter_mut() {
                        *g = *g + dy[0];
                    }
                }
            }
            Op::Mean(a) => {
                if wants(a) {
                    let n = v(a).numel();
                    let share = dy[0] / T::from_f64(n as f64);
                    for g in slot(grads, *a, n).iter_mut() {
                        *g = *g + share;
                    }
                }
            }
            Op::SumCols(a) => {
                if wants(a) {
                    let n = v(a).cols();
                    let g = slot(grads, *a, v(a).numel());
                    for (row, &d) in g.chunks_mut(n).zip(dy) {
                        for g in row {
                            *g = *g + d;
                        }
                    }
                }
            }
            Op::Dropout(a, mask) => {
                if wants(a) {
                    let g = slot(grads, *a, dy.len());
                    for ((g, &d), &k) in g.iter_mut().zip(dy).zip(mask) {
                        *g = *g + d * k;
                    }
                }
            }
        }
    }
}

fn map<T: Scalar>(a: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    let (m, n) = a.dims2();
    Tensor::new(vec![m, n], a.data().iter().map(|&x| f(x)).collect()).expect("same element count")
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let mx = row.iter().fold(T::neg_infinity(), |m, &x| if x > m { x } else { m });
    let s = row.iter().fold(T::zero(), |s, &x| s + (x - mx).exp());
    mx + s.ln()
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], id: NodeId, len: usize) -> &mut [T] {
    grads[id.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn axpy<T: Scalar>(y: &mut [T], x: &[T], a: T) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y = *y + a * x;
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, NodeId>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to any node that lies on a path from a
    /// trainable leaf to the seed.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of a named trainable leaf.
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).and_then(|&id| self.wrt(id))
    }

    /// Names of every trainable leaf that received a gradient.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Consumes the sweep, keeping only the named parameter gradients.
    pub fn into_params(mut self) -> BTreeMap<String, Tensor<T>> {
        let ids = std::mem::take(&mut self.params);
        ids.into_iter()
            .filter_map(|(name, id)| self.grads[id.0].take().map(|g| (name, g)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_by_identity() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[1, 3]));
        let s = g.softmax(a).unwrap();
        for &p in g.value(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn tanh_and_sigmoid_at_zero() {
        let mut g = Graph::<f32>::new();
        let z = g.constant(Tensor::zeros(&[1, 1]));
        let th = g.tanh(z).unwrap();
        let sg = g.sigmoid(z).unwrap();
        assert_eq!(g.value(th).item(), 0.0);
        assert_eq!(g.value(sg).item(), 0.5);
    }

    #[test]
    fn shape_mismatch_names_the_node() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("node 2 (matmul)"), "{err}");
    }

    #[test]
    fn non_finite_output_is_numeric_error() {
        let mut g = Graph::<f32>::new();
        let z = g.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(g.log(z), Err(Error::Numeric(_))));
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::<f32>::new();
        let x = g.param("x", t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0])).unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.param("x").unwrap().data(), &[1.0; 6]);
        assert_eq!(grads.param("x").unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn grad_of_square_at_three() {
        let mut g = Graph::<f32>::new();
        let x = g.param("x", Tensor::scalar(3.0)).unwrap();
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.param("x").unwrap().item(), 6.0);
    }

    #[test]
    fn cross_entropy_grad_at_uniform_logits() {
        let mut g = Graph::<f32>::new();
        let x = g.param("logits", Tensor::zeros(&[1, 3])).unwrap();
        let l = g.cross_entropy(x, &[2], &[1.0]).unwrap();
        assert!((g.value(l).item() - 3f32.ln()).abs() < 1e-6);
        let grads = g.backward(l).unwrap();
        let expect = [1.0 / 3.0, 1.0 / 3.0, -2.0 / 3.0];
        for (a, e) in grads.param("logits").unwrap().data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_requires_scalar_seed() {
        let mut g = Graph::<f32>::new();
        let x = g.param("x", Tensor::zeros(&[1, 2])).unwrap();
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn backward_after_rebinding_without_forward_is_state_error() {
        let mut g = Graph::<f32>::new();
        let x = g.param("x", Tensor::scalar(1.0)).unwrap();
        let y = g.mul(x, x).unwrap();
        g.set_leaf("x", Tensor::scalar(2.0)).unwrap();
        assert!(matches!(g.backward(y), Err(Error::State(_))));
        g.forward(&[]).unwrap();
        assert_eq!(g.value(y).item(), 4.0);
        assert_eq!(g.backward(y).unwrap().param("x").unwrap().item(), 4.0);
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0]));
        let s = g
            .masked_softmax(a, vec![true, true, false, true, false, false])
            .unwrap();
        let v = g.value(s);
        assert_eq!(v.at(0, 2), 0.0);
        assert_eq!(v.at(1, 0), 1.0);
        assert!((v.row(0).iter().sum::<f32>() - 1.0).abs() < 1e-6);
        let a2 = g.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(g.masked_softmax(a2, vec![false, false]), Err(Error::Input(_))));
    }

    #[test]
    fn dropout_eval_mode_is_identity() {
        let mut g = Graph::<f32>::with_seed(3);
        let x = g.constant(Tensor::full(&[4, 4], 1.0));
        assert_eq!(g.dropout(x, 0.2, false).unwrap(), x);
        let d = g.dropout(x, 0.5, true).unwrap();
        for &v in g.value(d).data() {
            assert!(v == 0.0 || v == 2.0);
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let build = || {
            let mut g = Graph::<f32>::with_seed(11);
            let a = g.constant(t(&[2, 3], &[0.3, -1.2, 2.2, 0.7, 0.1, -0.4]));
            let w = g.constant(t(&[3, 2], &[0.5, 1.5, -0.25, 0.75, 1.0, -2.0]));
            let h = g.matmul(a, w).unwrap();
            let h = g.tanh(h).unwrap();
            let h = g.dropout(h, 0.3, true).unwrap();
            let s = g.softmax(h).unwrap();
            g.value(s).clone()
        };
        let (x, y) = (build(), build());
        assert!(x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
