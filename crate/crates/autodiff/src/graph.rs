//! Define-by-run computation graph.
//!
//! Every operation appends a node holding its output value. A node requires
//! grad when any of its inputs does; `backward` walks the node list in strict
//! reverse insertion order, which is a valid reverse topological order
//! because inputs always precede their consumers.
//!
//! A graph built with [`Graph::no_grad`] records values only. Teacher passes
//! and inference use it.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tag recorded with each node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Param,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    Exp,
    Log,
    Relu,
    Softmax,
    LogSoftmax,
    LogSumExp,
    L2Normalize,
    Mean,
    Sum,
    Concat,
    GatherRows,
    Embedding,
    Transpose,
    MaskedFill,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs is one row repeated over every lhs row
    Row,
    /// rhs is a single value
    Scalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    L2Normalize(Var, Vec<f64>),
    Mean(Var, Option<usize>),
    Sum(Var),
    Concat(Vec<Var>, usize),
    GatherRows(Var, Vec<usize>, OpKind),
    Transpose(Var),
    MaskedFill(Var, Vec<bool>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param(_) => OpKind::Param,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::Relu(_) => OpKind::Relu,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LogSoftmax(_) => OpKind::LogSoftmax,
            Op::LogSumExp(_) => OpKind::LogSumExp,
            Op::L2Normalize(..) => OpKind::L2Normalize,
            Op::Mean(..) => OpKind::Mean,
            Op::Sum(_) => OpKind::Sum,
            Op::Concat(..) => OpKind::Concat,
            Op::GatherRows(_, _, k) => *k,
            Op::Transpose(_) => OpKind::Transpose,
            Op::MaskedFill(..) => OpKind::MaskedFill,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b, _) | Op::Sub(a, b, _) | Op::Mul(a, b, _) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Relu(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::LogSumExp(a)
            | Op::L2Normalize(a, _)
            | Op::Mean(a, _)
            | Op::Sum(a)
            | Op::GatherRows(a, _, _)
            | Op::Transpose(a)
            | Op::MaskedFill(a, _) => vec![*a],
            Op::Concat(vs, _) => vs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Smallest row norm `l2_normalize_rows` accepts.
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    record: bool,
    params: HashMap<ParamId, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A recording graph.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            record: true,
            params: HashMap::new(),
        }
    }

    /// A graph whose nodes never require grad; `backward` on it is a no-op.
    pub fn no_grad() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Input node ids of `v`; always smaller than `v`'s own id.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// The stored parameter behind `v`, when `v` is a parameter leaf.
    pub fn param_id(&self, v: Var) -> Option<ParamId> {
        match self.nodes[v.0].op {
            Op::Param(id) => Some(id),
            _ => None,
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`, if any
    /// flowed into it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Sign of every ReLU input entry, node by node. Two evaluations with
    /// equal patterns lie on the same linear piece of every ReLU.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(&self.nodes[a.0].value),
                _ => None,
            })
            .flat_map(|t| t.data().iter().map(|&x| x > 0.0))
            .collect()
    }

    /// Smallest `|x|` over every ReLU input entry; infinite without ReLUs.
    pub fn relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(&self.nodes[a.0].value),
                _ => None,
            })
            .flat_map(|t| t.data().iter().map(|x| x.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad: requires_grad && self.record,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// Leaf that participates in differentiation without being a stored
    /// parameter.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Registers a stored parameter. Repeated calls return the same node so
    /// every use accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(Op::Param(id), store.value(id).clone(), true);
        self.params.insert(id, v);
        v
    }

    pub fn param_by_name(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        Ok(self.param(store, id))
    }

    // ---- forward ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), out, rg))
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            return Ok(Bcast::Same);
        }
        if tb.is_scalar() {
            return Ok(Bcast::Scalar);
        }
        if let (Ok((_, ca)), Ok((1, cb))) = (ta.dims2(), tb.dims2()) {
            if ca == cb {
                return Ok(Bcast::Row);
            }
        }
        Err(Error::ShapeMismatch {
            op,
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        })
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let bc = self.bcast(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let bd = tb.data();
        let cols = ta.cols();
        let data: Vec<f64> = match bc {
            Bcast::Same => ta.data().iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Scalar => ta.data().iter().map(|&x| f(x, bd[0])).collect(),
            Bcast::Row => ta.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % cols])).collect(),
        };
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(mk(a, b, bc), out, rg))
    }

    /// Elementwise sum; `b` may also be a row vector or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("subtract", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("multiply", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * s).collect())?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Scale(a, s), out, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())?;
        let rg = self.rg(&[a]);
        Ok(self.push(op, out, rg))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| x.is_nan() || x <= 0.0) {
            return Err(Error::NonPositive { op: "log", value: bad });
        }
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    fn row_max(row: &[f64]) -> f64 {
        row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    fn check_row_max(op: &'static str, m: f64) -> Result<()> {
        if m.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("{op}: row maximum is {m}")))
        }
    }

    /// Softmax over each row. Entries equal to `-inf` get probability zero.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &t.data()[i * c..(i + 1) * c];
            let m = Self::row_max(row);
            Self::check_row_max("row-softmax", m)?;
            let o = &mut out[i * c..(i + 1) * c];
            let mut s = 0.0;
            for (o, &x) in o.iter_mut().zip(row) {
                *o = (x - m).exp();
                s += *o;
            }
            o.iter_mut().for_each(|v| *v /= s);
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Softmax(a), out, rg))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &t.data()[i * c..(i + 1) * c];
            let m = Self::row_max(row);
            Self::check_row_max("log-softmax", m)?;
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for (o, &x) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::LogSoftmax(a), out, rg))
    }

    /// `log Σ_j exp(a[i, j])` per row, shape `[rows, 1]`.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2()?;
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let row = &t.data()[i * c..(i + 1) * c];
            let m = Self::row_max(row);
            Self::check_row_max("log-sum-exp", m)?;
            out.push(m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln());
        }
        let out = Tensor::new(vec![r, 1], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::LogSumExp(a), out, rg))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2()?;
        let mut out = t.data().to_vec();
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n.is_nan() || n < MIN_NORM {
                return Err(Error::ZeroNorm { row: i, norm: n });
            }
            row.iter_mut().for_each(|x| *x /= n);
            norms.push(n);
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::L2Normalize(a, norms), out, rg))
    }

    /// Mean over `axis` (0: over rows giving `[1, cols]`, 1: over columns
    /// giving `[rows, 1]`) or over everything when `None` giving `[1]`.
    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2()?;
        let d = t.data();
        let out = match axis {
            None => Tensor::scalar(d.iter().sum::<f64>() / d.len() as f64),
            Some(0) => {
                let mut o = vec![0.0; c];
                for i in 0..r {
                    for (o, x) in o.iter_mut().zip(&d[i * c..(i + 1) * c]) {
                        *o += x;
                    }
                }
                o.iter_mut().for_each(|v| *v /= r as f64);
                Tensor::new(vec![1, c], o)?
            }
            Some(1) => Tensor::new(
                vec![r, 1],
                (0..r)
                    .map(|i| d[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
                    .collect(),
            )?,
            Some(ax) => return Err(Error::InvalidArgument(format!("mean axis {ax}"))),
        };
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Mean(a, axis), out, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Sum(a), out, rg))
    }

    /// Concatenate matrices along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, vs: &[Var], axis: usize) -> Result<Var> {
        let first = *vs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concatenate needs at least one input".into()))?;
        let (_, c0) = self.value(first).dims2()?;
        let (r0, _) = self.value(first).dims2()?;
        let out = match axis {
            0 => {
                let mut data = Vec::new();
                let mut rows = 0;
                for &v in vs {
                    let (r, c) = self.value(v).dims2()?;
                    if c != c0 {
                        return Err(self.mismatch("concatenate", first, v));
                    }
                    rows += r;
                    data.extend_from_slice(self.value(v).data());
                }
                Tensor::new(vec![rows, c0], data)?
            }
            1 => {
                let mut widths = Vec::with_capacity(vs.len());
                for &v in vs {
                    let (r, c) = self.value(v).dims2()?;
                    if r != r0 {
                        return Err(self.mismatch("concatenate", first, v));
                    }
                    widths.push(c);
                }
                let total: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(r0 * total);
                for i in 0..r0 {
                    for (&v, &w) in vs.iter().zip(&widths) {
                        data.extend_from_slice(&self.value(v).data()[i * w..(i + 1) * w]);
                    }
                }
                Tensor::new(vec![r0, total], data)?
            }
            ax => return Err(Error::InvalidArgument(format!("concatenate axis {ax}"))),
        };
        let rg = self.rg(vs);
        Ok(self.push(Op::Concat(vs.to_vec(), axis), out, rg))
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    fn gather(&mut self, a: Var, idx: &[usize], kind: OpKind) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2()?;
        let op = if kind == OpKind::Embedding {
            "embedding-lookup"
        } else {
            "gather-rows"
        };
        if idx.is_empty() {
            return Err(Error::InvalidArgument(format!("{op}: empty index list")));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::IndexOutOfRange { op, index: i, len: r });
            }
            data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let out = Tensor::new(vec![idx.len(), c], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::GatherRows(a, idx.to_vec(), kind), out, rg))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        self.gather(a, idx, OpKind::GatherRows)
    }

    /// Rows of `table` for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather(table, ids, OpKind::Embedding)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Transpose(a), out, rg))
    }

    /// Replace entries where `mask` is true by `value`; no gradient flows
    /// through replaced entries.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], value: f64) -> Result<Var> {
        let t = self.value(a);
        if mask.len() != t.numel() {
            return Err(Error::ShapeMismatch {
                op: "masked-fill",
                lhs: t.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let data = t
            .data()
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::MaskedFill(a, mask.to_vec()), out, rg))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar `loss`. Gradients from earlier calls are
    /// discarded; parameter gradients are read with
    /// [`Graph::accumulate_param_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        if !lt.all_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                grads[id] = Some(g);
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2().expect("checked in forward");
                let n = out.cols();
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                acc(*a, &mut |da| gemm(m, n, k, g, false, bv, true, da, 1.0));
                acc(*b, &mut |db| gemm(k, m, n, av, true, g, false, db, 1.0));
            }
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| reduce_into(db, g, *bc, out.cols(), sign, |_| 1.0));
            }
            Op::Mul(a, b, bc) => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                let cols = out.cols();
                acc(*a, &mut |da| {
                    for (i, d) in da.iter_mut().enumerate() {
                        let y = match bc {
                            Bcast::Same => bv[i],
                            Bcast::Scalar => bv[0],
                            Bcast::Row => bv[i % cols],
                        };
                        *d += g[i] * y;
                    }
                });
                acc(*b, &mut |db| reduce_into(db, g, *bc, cols, 1.0, |i| av[i]));
            }
            Op::Scale(a, s) => acc(*a, &mut |da| da.iter_mut().zip(g).for_each(|(d, gi)| *d += s * gi)),
            Op::Exp(a) => acc(*a, &mut |da| {
                for ((d, gi), y) in da.iter_mut().zip(g).zip(out.data()) {
                    *d += gi * y;
                }
            }),
            Op::Log(a) => {
                let x = nodes[a.0].value.data();
                acc(*a, &mut |da| {
                    for ((d, gi), xi) in da.iter_mut().zip(g).zip(x) {
                        *d += gi / xi;
                    }
                })
            }
            Op::Relu(a) => {
                let x = nodes[a.0].value.data();
                acc(*a, &mut |da| {
                    for ((d, gi), xi) in da.iter_mut().zip(g).zip(x) {
                        if *xi > 0.0 {
                            *d += gi;
                        }
                    }
                })
            }
            Op::Softmax(a) => {
                let c = out.cols();
                acc(*a, &mut |da| {
                    for ((drow, grow), yrow) in da.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, gi), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (gi - dot);
                        }
                    }
                })
            }
            Op::LogSoftmax(a) => {
                let c = out.cols();
                acc(*a, &mut |da| {
                    for ((drow, grow), yrow) in da.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                        let gs: f64 = grow.iter().sum();
                        for ((d, gi), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += gi - y.exp() * gs;
                        }
                    }
                })
            }
            Op::LogSumExp(a) => {
                let x = &nodes[a.0].value;
                let c = x.cols();
                acc(*a, &mut |da| {
                    for (i, (drow, xrow)) in da.chunks_mut(c).zip(x.data().chunks(c)).enumerate() {
                        let lse = out.data()[i];
                        for (d, xi) in drow.iter_mut().zip(xrow) {
                            *d += g[i] * (xi - lse).exp();
                        }
                    }
                })
            }
            Op::L2Normalize(a, norms) => {
                let c = out.cols();
                acc(*a, &mut |da| {
                    for (i, ((drow, grow), yrow)) in
                        da.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)).enumerate()
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((d, gi), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += (gi - y * dot) / norms[i];
                        }
                    }
                })
            }
            Op::Mean(a, axis) => {
                let (r, c) = nodes[a.0].value.dims2().expect("checked in forward");
                acc(*a, &mut |da| match axis {
                    None => {
                        let s = g[0] / (r * c) as f64;
                        da.iter_mut().for_each(|d| *d += s);
                    }
                    Some(0) => {
                        for row in da.chunks_mut(c) {
                            for (d, gi) in row.iter_mut().zip(g) {
                                *d += gi / r as f64;
                            }
                        }
                    }
                    _ => {
                        for (row, gi) in da.chunks_mut(c).zip(g) {
                            row.iter_mut().for_each(|d| *d += gi / c as f64);
                        }
                    }
                })
            }
            Op::Sum(a) => acc(*a, &mut |da| da.iter_mut().for_each(|d| *d += g[0])),
            Op::Concat(vs, axis) => {
                let total_cols = out.cols();
                let mut offset = 0;
                for v in vs {
                    let (r, c) = nodes[v.0].value.dims2().expect("checked in forward");
                    let off = offset;
                    acc(*v, &mut |dv| {
                        if *axis == 0 {
                            add_into(dv, &g[off * total_cols..(off + r) * total_cols]);
                        } else {
                            for (i, row) in dv.chunks_mut(c).enumerate() {
                                let src = &g[i * total_cols + off..i * total_cols + off + c];
                                add_into(row, src);
                            }
                        }
                    });
                    offset += if *axis == 0 { r } else { c };
                }
            }
            Op::GatherRows(a, idx, _) => {
                let c = out.cols();
                acc(*a, &mut |da| {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut da[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                })
            }
            Op::Transpose(a) => {
                let (r, c) = nodes[a.0].value.dims2().expect("checked in forward");
                acc(*a, &mut |da| {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[j * r + i];
                        }
                    }
                })
            }
            Op::MaskedFill(a, mask) => acc(*a, &mut |da| {
                for ((d, gi), m) in da.iter_mut().zip(g).zip(mask) {
                    if !m {
                        *d += gi;
                    }
                }
            }),
        }
    }

    /// Adds every registered parameter's gradient into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (&id, &v) in &self.params {
            if let Some(g) = self.grad(v) {
                store.accumulate_grad(id, g);
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Accumulates `sign · Σ g[i]·w(i)` into the broadcast operand's gradient.
fn reduce_into(db: &mut [f64], g: &[f64], bc: Bcast, cols: usize, sign: f64, w: impl Fn(usize) -> f64) {
    match bc {
        Bcast::Same => {
            for (i, d) in db.iter_mut().enumerate() {
                *d += sign * g[i] * w(i);
            }
        }
        Bcast::Scalar => {
            db[0] += sign * g.iter().enumerate().map(|(i, gi)| gi * w(i)).sum::<f64>();
        }
        Bcast::Row => {
            for (i, gi) in g.iter().enumerate() {
                db[i % cols] += sign * gi * w(i);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let i = g.constant(t(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let y = g.matmul(a, i).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(!g.requires_grad(y));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let a = g.constant(t(&[vec![0.0, 0.0, 0.0]]));
        let y = g.softmax_rows(a).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_three_four() {
        let mut g = Graph::new();
        let a = g.constant(t(&[vec![3.0, 4.0]]));
        let y = g.l2_normalize_rows(a).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn log_and_normalize_reject_bad_input() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(g.log(z), Err(Error::NonPositive { .. })));
        assert!(matches!(g.l2_normalize_rows(z), Err(Error::ZeroNorm { .. })));
    }

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = g.mul(w, w).unwrap();
        let l = g.sum(sq).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn reuse_accumulates() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        let s = g.add(w, w).unwrap();
        let l = g.sum(s).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn constant_loss_has_no_grads() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::scalar(3.0)).unwrap();
        let mut g = Graph::new();
        let _w = g.param(&store, id);
        let c = g.constant(Tensor::scalar(1.0));
        let l = g.sum(c).unwrap();
        g.backward(l).unwrap();
        g.accumulate_param_grads(&mut store);
        assert_eq!(store.get(id).grad.data(), &[0.0]);
        assert!(!store.get(id).touched);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(w), Err(Error::NotScalar(_))));
    }

    #[test]
    fn no_grad_graph_never_requires_grad() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::scalar(3.0)).unwrap();
        let mut g = Graph::no_grad();
        let w = g.param(&store, id);
        let y = g.mul(w, w).unwrap();
        assert!(!g.requires_grad(y));
        g.backward(y).unwrap();
        assert!(g.grad(w).is_none());
    }

    #[test]
    fn inputs_precede_nodes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 2]));
        let b = g.exp(a).unwrap();
        let c = g.matmul(a, b).unwrap();
        let d = g.concat(&[a, b, c], 0).unwrap();
        for v in [b, c, d] {
            assert!(g.inputs(v).iter().all(|i| i.index() < v.index()));
        }
        assert_eq!(g.kind(d), OpKind::Concat);
    }

    #[test]
    fn masked_softmax_ignores_neg_inf() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[vec![1.0, 2.0, 3.0]]));
        let m = g.masked_fill(a, &[false, true, false], f64::NEG_INFINITY).unwrap();
        let s = g.softmax_rows(m).unwrap();
        assert_eq!(g.value(s).data()[1], 0.0);
        let w = g.constant(t(&[vec![1.0, 5.0, -1.0]]));
        let p = g.mul(s, w).unwrap();
        let l = g.sum(p).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap()[1], 0.0);
    }
}
