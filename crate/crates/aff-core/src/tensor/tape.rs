//! Recorded computation and reverse-mode differentiation.
//!
//! A [`Tape`] is an append-only record of tensor operations. Node ids are
//! topologically ordered by construction, so the backward sweep is a single
//! reverse pass. Values needed by backward rules (dropout masks, saved
//! outputs) live on the node, which also makes the record replayable:
//! [`Tape::replay_matches`] re-executes every node from its parents and
//! checks the stored values bit-for-bit.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{NodeRef, ParamId, ParamStore, Tensor};

static RECORD_COUNTER: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EwKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl EwKind {
    fn name(self) -> &'static str {
        match self {
            EwKind::Add => "add",
            EwKind::Sub => "sub",
            EwKind::Mul => "mul",
            EwKind::Div => "div",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActKind {
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

/// Allowed right-operand broadcasts for elementwise ops: equal shapes, a
/// one-element tensor, or a suffix of the left shape (bias style).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    Trailing,
}

impl Bcast {
    /// Flat index into the right operand for flat index `i` of the left.
    #[inline]
    fn map(self, i: usize, b_numel: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Scalar => 0,
            // The broadcast shape is a row-major suffix, so it tiles the
            // flat data with period b_numel.
            Bcast::Trailing => i % b_numel,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Ew {
        kind: EwKind,
        a: usize,
        b: usize,
        bcast: Bcast,
    },
    AddScalar {
        a: usize,
        c: f64,
    },
    MulScalar {
        a: usize,
        c: f64,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    Transpose2d {
        a: usize,
    },
    Reduce {
        kind: ReduceKind,
        a: usize,
        axis: usize,
    },
    Act {
        kind: ActKind,
        a: usize,
    },
    Softmax {
        a: usize,
        axis: usize,
    },
    Reshape {
        a: usize,
    },
    Concat {
        axis: usize,
        parts: Vec<usize>,
    },
    Slice {
        a: usize,
        axis: usize,
        start: usize,
        end: usize,
    },
    GatherRows {
        a: usize,
        rows: Vec<usize>,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        pad: usize,
    },
    MaxPool2 {
        a: usize,
    },
    Dropout {
        a: usize,
        mask: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only computation record.
pub struct Tape {
    record: u64,
    nodes: Vec<Node>,
    watched: Vec<(ParamId, usize)>,
    adjoints: Vec<Vec<f64>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            record: RECORD_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            watched: Vec::new(),
            adjoints: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &'static str, op: Op, value: Tensor) -> Result<Tensor> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let index = self.nodes.len();
        let value = value.with_node(NodeRef {
            record: self.record,
            index,
        });
        self.nodes.push(Node {
            op,
            value: value.clone(),
        });
        Ok(value)
    }

    /// Node index of `t`, entering untracked tensors as constant leaves.
    fn node_of(&mut self, t: &Tensor, op: &'static str) -> Result<usize> {
        match t.node() {
            Some(n) if n.record == self.record && n.index < self.nodes.len() => Ok(n.index),
            Some(_) => Err(Error::NotOnRecord { op }),
            None => {
                let leaf = self.push(op, Op::Leaf, t.detached())?;
                Ok(leaf.node().unwrap().index)
            }
        }
    }

    /// Node index of `t` without implicit leaf registration.
    fn strict_node(&self, t: &Tensor, op: &'static str) -> Result<usize> {
        match t.node() {
            Some(n) if n.record == self.record && n.index < self.nodes.len() => Ok(n.index),
            _ => Err(Error::NotOnRecord { op }),
        }
    }

    fn value(&self, idx: usize) -> &Tensor {
        &self.nodes[idx].value
    }

    /// Enter a constant leaf holding a copy of `t`.
    pub fn constant(&mut self, t: &Tensor) -> Result<Tensor> {
        self.push("constant", Op::Leaf, t.detached())
    }

    /// Copy of `t`'s value entered as a fresh leaf: gradients do not flow
    /// back through it.
    pub fn detach(&mut self, t: &Tensor) -> Result<Tensor> {
        self.constant(t)
    }

    /// Enter a parameter as a leaf; backward will route its adjoint into
    /// `Parameter::grad`.
    pub fn watch(&mut self, store: &ParamStore, id: ParamId) -> Result<Tensor> {
        let t = self.push("watch", Op::Leaf, store.value(id).detached())?;
        self.watched
            .push((id, t.node().expect("just pushed").index));
        Ok(t)
    }

    /// Parameters entered on this record, in watch order.
    pub fn watched(&self) -> &[(ParamId, usize)] {
        &self.watched
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise(EwKind::Add, a, b)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise(EwKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise(EwKind::Mul, a, b)
    }

    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise(EwKind::Div, a, b)
    }

    pub fn elementwise(&mut self, kind: EwKind, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let name = kind.name();
        let bcast = resolve_bcast(a.shape(), b.shape()).ok_or_else(|| Error::ShapeMismatch {
            op: name,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })?;
        if kind == EwKind::Div && b.data().iter().any(|&v| v == 0.0) {
            return Err(Error::DivByZero { op: name });
        }
        let ai = self.node_of(a, name)?;
        let bi = self.node_of(b, name)?;
        let out = ew_kernel(kind, self.value(ai), self.value(bi), bcast);
        self.push(name, Op::Ew { kind, a: ai, b: bi, bcast }, out)
    }

    pub fn add_scalar(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        let ai = self.node_of(a, "add_scalar")?;
        let out = map_kernel(self.value(ai), |v| v + c);
        self.push("add_scalar", Op::AddScalar { a: ai, c }, out)
    }

    pub fn mul_scalar(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        let ai = self.node_of(a, "mul_scalar")?;
        let out = map_kernel(self.value(ai), |v| v * c);
        self.push("mul_scalar", Op::MulScalar { a: ai, c }, out)
    }

    // ---- linear algebra --------------------------------------------------

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.rank() != 2 || b.rank() != 2 {
            return Err(Error::Rank {
                op: "matmul",
                expected: 2,
                got: if a.rank() != 2 { a.rank() } else { b.rank() },
            });
        }
        if a.shape()[1] != b.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let ai = self.node_of(a, "matmul")?;
        let bi = self.node_of(b, "matmul")?;
        let out = matmul_kernel(self.value(ai), self.value(bi));
        self.push("matmul", Op::MatMul { a: ai, b: bi }, out)
    }

    pub fn transpose2d(&mut self, a: &Tensor) -> Result<Tensor> {
        if a.rank() != 2 {
            return Err(Error::Rank {
                op: "transpose2d",
                expected: 2,
                got: a.rank(),
            });
        }
        let ai = self.node_of(a, "transpose2d")?;
        let out = transpose_kernel(self.value(ai));
        self.push("transpose2d", Op::Transpose2d { a: ai }, out)
    }

    // ---- reductions -------------------------------------------------------

    pub fn reduce(&mut self, kind: ReduceKind, a: &Tensor, axis: usize) -> Result<Tensor> {
        if axis >= a.rank() {
            return Err(Error::AxisOutOfRange {
                axis,
                rank: a.rank(),
            });
        }
        if a.shape()[axis] == 0 && kind != ReduceKind::Sum {
            return Err(Error::EmptyAxis {
                op: match kind {
                    ReduceKind::Mean => "mean",
                    ReduceKind::Max => "max",
                    ReduceKind::Sum => unreachable!(),
                },
            });
        }
        let ai = self.node_of(a, "reduce")?;
        let out = reduce_kernel(kind, self.value(ai), axis);
        self.push("reduce", Op::Reduce { kind, a: ai, axis }, out)
    }

    pub fn sum_axis(&mut self, a: &Tensor, axis: usize) -> Result<Tensor> {
        self.reduce(ReduceKind::Sum, a, axis)
    }

    pub fn mean_axis(&mut self, a: &Tensor, axis: usize) -> Result<Tensor> {
        self.reduce(ReduceKind::Mean, a, axis)
    }

    pub fn max_axis(&mut self, a: &Tensor, axis: usize) -> Result<Tensor> {
        self.reduce(ReduceKind::Max, a, axis)
    }

    /// Sum every element down to a rank-0 scalar.
    pub fn sum_all(&mut self, a: &Tensor) -> Result<Tensor> {
        let mut t = if a.node().is_some() {
            a.clone()
        } else {
            self.constant(a)?
        };
        while t.rank() > 0 {
            let axis = t.rank() - 1;
            t = self.reduce(ReduceKind::Sum, &t, axis)?;
        }
        Ok(t)
    }

    // ---- activations -------------------------------------------------------

    pub fn activation(&mut self, kind: ActKind, a: &Tensor) -> Result<Tensor> {
        let ai = self.node_of(a, "activation")?;
        let out = act_kernel(kind, self.value(ai));
        self.push("activation", Op::Act { kind, a: ai }, out)
    }

    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor> {
        self.activation(ActKind::Relu, a)
    }

    pub fn tanh(&mut self, a: &Tensor) -> Result<Tensor> {
        self.activation(ActKind::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: &Tensor) -> Result<Tensor> {
        self.activation(ActKind::Sigmoid, a)
    }

    pub fn softmax(&mut self, a: &Tensor, axis: usize) -> Result<Tensor> {
        if axis >= a.rank() {
            return Err(Error::AxisOutOfRange {
                axis,
                rank: a.rank(),
            });
        }
        if a.shape()[axis] == 0 {
            return Err(Error::EmptyAxis { op: "softmax" });
        }
        let ai = self.node_of(a, "softmax")?;
        let out = softmax_kernel(self.value(ai), axis);
        self.push("softmax", Op::Softmax { a: ai, axis }, out)
    }

    // ---- shape ops ---------------------------------------------------------

    pub fn reshape(&mut self, a: &Tensor, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != a.numel() {
            return Err(Error::ElementCount {
                shape,
                expected,
                got: a.numel(),
            });
        }
        let ai = self.node_of(a, "reshape")?;
        let out = Tensor::from_vec(shape, self.value(ai).data().to_vec())?;
        self.push("reshape", Op::Reshape { a: ai }, out)
    }

    pub fn concat(&mut self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Empty { what: "concat parts" });
        }
        let rank = parts[0].rank();
        if axis >= rank {
            return Err(Error::AxisOutOfRange { axis, rank });
        }
        for p in parts {
            if p.rank() != rank {
                return Err(Error::Rank {
                    op: "concat",
                    expected: rank,
                    got: p.rank(),
                });
            }
            for (d, (&ea, &eb)) in parts[0].shape().iter().zip(p.shape()).enumerate() {
                if d != axis && ea != eb {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        lhs: parts[0].shape().to_vec(),
                        rhs: p.shape().to_vec(),
                    });
                }
            }
        }
        let idxs: Vec<usize> = parts
            .iter()
            .map(|p| self.node_of(p, "concat"))
            .collect::<Result<_>>()?;
        let vals: Vec<&Tensor> = idxs.iter().map(|&i| self.value(i)).collect();
        let out = concat_kernel(&vals, axis);
        self.push("concat", Op::Concat { axis, parts: idxs }, out)
    }

    pub fn slice(&mut self, a: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        if axis >= a.rank() {
            return Err(Error::AxisOutOfRange {
                axis,
                rank: a.rank(),
            });
        }
        if start > end || end > a.shape()[axis] {
            return Err(Error::InvalidValue {
                what: "slice bounds",
                detail: format!(
                    "{start}..{end} on axis {axis} of extent {}",
                    a.shape()[axis]
                ),
            });
        }
        let ai = self.node_of(a, "slice")?;
        let out = slice_kernel(self.value(ai), axis, start, end);
        self.push(
            "slice",
            Op::Slice {
                a: ai,
                axis,
                start,
                end,
            },
            out,
        )
    }

    /// Row lookup into a rank-2 table; backward scatter-adds into the table.
    pub fn gather_rows(&mut self, a: &Tensor, rows: &[usize]) -> Result<Tensor> {
        if a.rank() != 2 {
            return Err(Error::Rank {
                op: "gather_rows",
                expected: 2,
                got: a.rank(),
            });
        }
        let bound = a.shape()[0];
        if let Some(&bad) = rows.iter().find(|&&r| r >= bound) {
            return Err(Error::IndexOutOfRange {
                what: "gather_rows row",
                index: bad,
                bound,
            });
        }
        let ai = self.node_of(a, "gather_rows")?;
        let out = gather_kernel(self.value(ai), rows);
        self.push(
            "gather_rows",
            Op::GatherRows {
                a: ai,
                rows: rows.to_vec(),
            },
            out,
        )
    }

    // ---- structured ops ------------------------------------------------------

    /// 2-D convolution, stride 1, symmetric zero padding. x is (B,C,H,W),
    /// w is (O,C,KH,KW), b is (O,).
    pub fn conv2d(&mut self, x: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> Result<Tensor> {
        if x.rank() != 4 {
            return Err(Error::Rank {
                op: "conv2d input",
                expected: 4,
                got: x.rank(),
            });
        }
        if w.rank() != 4 {
            return Err(Error::Rank {
                op: "conv2d weight",
                expected: 4,
                got: w.rank(),
            });
        }
        if b.rank() != 1 || b.shape()[0] != w.shape()[0] || x.shape()[1] != w.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let (h, ww) = (x.shape()[2], x.shape()[3]);
        let (kh, kw) = (w.shape()[2], w.shape()[3]);
        if h + 2 * pad < kh || ww + 2 * pad < kw {
            return Err(Error::InvalidValue {
                what: "conv2d extents",
                detail: format!("kernel {kh}x{kw} exceeds padded input {h}x{ww} (pad {pad})"),
            });
        }
        let xi = self.node_of(x, "conv2d")?;
        let wi = self.node_of(w, "conv2d")?;
        let bi = self.node_of(b, "conv2d")?;
        let out = conv2d_kernel(self.value(xi), self.value(wi), self.value(bi), pad);
        self.push(
            "conv2d",
            Op::Conv2d {
                x: xi,
                w: wi,
                b: bi,
                pad,
            },
            out,
        )
    }

    /// 2x2 max pooling with stride 2; spatial extents must be even. Ties
    /// route the gradient to the first maximal element in window scan order.
    pub fn max_pool2(&mut self, a: &Tensor) -> Result<Tensor> {
        if a.rank() != 4 {
            return Err(Error::Rank {
                op: "max_pool2",
                expected: 4,
                got: a.rank(),
            });
        }
        if a.shape()[2] % 2 != 0 || a.shape()[3] % 2 != 0 {
            return Err(Error::InvalidValue {
                what: "max_pool2 extents",
                detail: format!("spatial extents must be even, got {:?}", a.shape()),
            });
        }
        let ai = self.node_of(a, "max_pool2")?;
        let out = maxpool2_kernel(self.value(ai));
        self.push("max_pool2", Op::MaxPool2 { a: ai }, out)
    }

    /// Inverted dropout: each element independently survives with
    /// probability 1-p (uniform draw > p, one draw per element in row-major
    /// order) and is rescaled by 1/(1-p).
    pub fn dropout(&mut self, a: &Tensor, p: f64, rng: &mut RngStream) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidValue {
                what: "dropout rate",
                detail: format!("expected p in [0,1), got {p}"),
            });
        }
        let ai = self.node_of(a, "dropout")?;
        let scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(ai).numel())
            .map(|_| if rng.next_uniform() > p { scale } else { 0.0 })
            .collect();
        let out = dropout_kernel(self.value(ai), &mask);
        self.push("dropout", Op::Dropout { a: ai, mask }, out)
    }

    /// Mean over the batch of -log softmax(logits)[label], computed with
    /// max-subtracted log-sum-exp. Returns a rank-0 scalar.
    pub fn cross_entropy(&mut self, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
        if logits.rank() != 2 {
            return Err(Error::Rank {
                op: "cross_entropy",
                expected: 2,
                got: logits.rank(),
            });
        }
        let (b, c) = (logits.shape()[0], logits.shape()[1]);
        if labels.len() != b {
            return Err(Error::CountMismatch {
                what: "cross_entropy labels",
                expected: b,
                got: labels.len(),
            });
        }
        if b == 0 || c == 0 {
            return Err(Error::EmptyAxis { op: "cross_entropy" });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::IndexOutOfRange {
                what: "cross_entropy label",
                index: bad,
                bound: c,
            });
        }
        let li = self.node_of(logits, "cross_entropy")?;
        let out = cross_entropy_kernel(self.value(li), labels);
        self.push(
            "cross_entropy",
            Op::CrossEntropy {
                logits: li,
                labels: labels.to_vec(),
            },
            out,
        )
    }

    // ---- backward ------------------------------------------------------------

    /// Reverse sweep from a scalar loss. Adjoints of watched parameters are
    /// accumulated into `Parameter::grad` (call `store.zero_grads()` first
    /// unless accumulation is intended).
    pub fn backward(&mut self, loss: &Tensor, store: &mut ParamStore) -> Result<()> {
        let loss_idx = self.strict_node(loss, "backward")?;
        if self.value(loss_idx).numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.value(loss_idx).shape().to_vec(),
            });
        }
        let mut adj: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.numel()])
            .collect();
        adj[loss_idx][0] = 1.0;
        for idx in (0..=loss_idx).rev() {
            let g = adj[idx].clone();
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            self.backward_node(idx, &g, &mut adj);
        }
        for &(pid, nidx) in &self.watched {
            store.accumulate_grad(pid, &adj[nidx])?;
        }
        self.adjoints = adj;
        Ok(())
    }

    /// Adjoint of a node from the most recent backward pass.
    pub fn grad(&self, t: &Tensor) -> Result<Tensor> {
        let idx = self.strict_node(t, "grad")?;
        if self.adjoints.is_empty() {
            return Err(Error::InvalidValue {
                what: "grad",
                detail: "backward has not run on this record".into(),
            });
        }
        Tensor::from_vec(self.value(idx).shape().to_vec(), self.adjoints[idx].clone())
    }

    fn backward_node(&self, idx: usize, g: &[f64], adj: &mut [Vec<f64>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Ew { kind, a, b, bcast } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let bn = bv.len();
                // Local buffers so a == b (e.g. mul(x, x)) accumulates both
                // contributions.
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bn];
                match kind {
                    EwKind::Add => {
                        for (i, &gi) in g.iter().enumerate() {
                            da[i] += gi;
                            db[bcast.map(i, bn)] += gi;
                        }
                    }
                    EwKind::Sub => {
                        for (i, &gi) in g.iter().enumerate() {
                            da[i] += gi;
                            db[bcast.map(i, bn)] -= gi;
                        }
                    }
                    EwKind::Mul => {
                        for (i, &gi) in g.iter().enumerate() {
                            let bi = bcast.map(i, bn);
                            da[i] += gi * bv[bi];
                            db[bi] += gi * av[i];
                        }
                    }
                    EwKind::Div => {
                        for (i, &gi) in g.iter().enumerate() {
                            let bi = bcast.map(i, bn);
                            da[i] += gi / bv[bi];
                            db[bi] -= gi * av[i] / (bv[bi] * bv[bi]);
                        }
                    }
                }
                add_into(&mut adj[*a], &da);
                add_into(&mut adj[*b], &db);
            }
            Op::AddScalar { a, .. } => {
                for (i, &gi) in g.iter().enumerate() {
                    adj[*a][i] += gi;
                }
            }
            Op::MulScalar { a, c } => {
                for (i, &gi) in g.iter().enumerate() {
                    adj[*a][i] += gi * c;
                }
            }
            Op::MatMul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                let mut da = vec![0.0; av.numel()];
                let mut db = vec![0.0; bv.numel()];
                // dA = G . B^T
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for kk in 0..k {
                            da[i * k + kk] += gij * bv.data()[kk * n + j];
                        }
                    }
                }
                // dB = A^T . G
                for kk in 0..k {
                    for i in 0..m {
                        let aik = av.data()[i * k + kk];
                        if aik == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[kk * n + j] += aik * g[i * n + j];
                        }
                    }
                }
                add_into(&mut adj[*a], &da);
                add_into(&mut adj[*b], &db);
            }
            Op::Transpose2d { a } => {
                let (r, c) = {
                    let s = self.value(*a).shape();
                    (s[0], s[1])
                };
                for i in 0..r {
                    for j in 0..c {
                        adj[*a][i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Reduce { kind, a, axis } => {
                let av = self.value(*a);
                let (outer, ext, inner) = axis_split(av.shape(), *axis);
                match kind {
                    ReduceKind::Sum => {
                        for o in 0..outer {
                            for k in 0..ext {
                                for i in 0..inner {
                                    adj[*a][(o * ext + k) * inner + i] += g[o * inner + i];
                                }
                            }
                        }
                    }
                    ReduceKind::Mean => {
                        let scale = 1.0 / ext as f64;
                        for o in 0..outer {
                            for k in 0..ext {
                                for i in 0..inner {
                                    adj[*a][(o * ext + k) * inner + i] += g[o * inner + i] * scale;
                                }
                            }
                        }
                    }
                    ReduceKind::Max => {
                        // First maximal element along the axis takes the
                        // whole gradient.
                        for o in 0..outer {
                            for i in 0..inner {
                                let mut best = 0;
                                let mut best_v = av.data()[(o * ext) * inner + i];
                                for k in 1..ext {
                                    let v = av.data()[(o * ext + k) * inner + i];
                                    if v > best_v {
                                        best_v = v;
                                        best = k;
                                    }
                                }
                                adj[*a][(o * ext + best) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::Act { kind, a } => {
                let x = self.value(*a).data();
                let y = self.value(idx).data();
                match kind {
                    ActKind::Relu => {
                        for (i, &gi) in g.iter().enumerate() {
                            // subgradient 0 at exactly 0
                            if x[i] > 0.0 {
                                adj[*a][i] += gi;
                            }
                        }
                    }
                    ActKind::Tanh => {
                        for (i, &gi) in g.iter().enumerate() {
                            adj[*a][i] += gi * (1.0 - y[i] * y[i]);
                        }
                    }
                    ActKind::Sigmoid => {
                        for (i, &gi) in g.iter().enumerate() {
                            adj[*a][i] += gi * y[i] * (1.0 - y[i]);
                        }
                    }
                }
            }
            Op::Softmax { a, axis } => {
                let y = self.value(idx);
                let (outer, ext, inner) = axis_split(y.shape(), *axis);
                for o in 0..outer {
                    for i in 0..inner {
                        let mut dot = 0.0;
                        for k in 0..ext {
                            let f = (o * ext + k) * inner + i;
                            dot += g[f] * y.data()[f];
                        }
                        for k in 0..ext {
                            let f = (o * ext + k) * inner + i;
                            adj[*a][f] += y.data()[f] * (g[f] - dot);
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                for (i, &gi) in g.iter().enumerate() {
                    adj[*a][i] += gi;
                }
            }
            Op::Concat { axis, parts } => {
                let out_shape = self.value(idx).shape().to_vec();
                let (outer, _, inner) = axis_split(&out_shape, *axis);
                let exts: Vec<usize> = parts
                    .iter()
                    .map(|&p| self.value(p).shape()[*axis])
                    .collect();
                let total: usize = exts.iter().sum();
                for o in 0..outer {
                    let mut offset = 0;
                    for (pi, &p) in parts.iter().enumerate() {
                        let e = exts[pi];
                        for k in 0..e {
                            for i in 0..inner {
                                adj[p][(o * e + k) * inner + i] +=
                                    g[(o * total + offset + k) * inner + i];
                            }
                        }
                        offset += e;
                    }
                }
            }
            Op::Slice {
                a,
                axis,
                start,
                end,
            } => {
                let a_shape = self.value(*a).shape().to_vec();
                let (outer, ext, inner) = axis_split(&a_shape, *axis);
                let w = end - start;
                for o in 0..outer {
                    for k in 0..w {
                        for i in 0..inner {
                            adj[*a][(o * ext + start + k) * inner + i] += g[(o * w + k) * inner + i];
                        }
                    }
                }
            }
            Op::GatherRows { a, rows } => {
                let cols = self.value(*a).shape()[1];
                for (r, &row) in rows.iter().enumerate() {
                    for j in 0..cols {
                        adj[*a][row * cols + j] += g[r * cols + j];
                    }
                }
            }
            Op::Conv2d { x, w, b, pad } => {
                conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    *pad,
                    g,
                    self.value(idx).shape(),
                    adj,
                    *x,
                    *w,
                    *b,
                );
            }
            Op::MaxPool2 { a } => {
                let av = self.value(*a);
                let (bs, cs, h, w) = shape4(av.shape());
                let (oh, ow) = (h / 2, w / 2);
                for bi in 0..bs {
                    for ci in 0..cs {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best_f = ((bi * cs + ci) * h + oy * 2) * w + ox * 2;
                                let mut best_v = av.data()[best_f];
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        let f = ((bi * cs + ci) * h + oy * 2 + dy) * w + ox * 2 + dx;
                                        if av.data()[f] > best_v {
                                            best_v = av.data()[f];
                                            best_f = f;
                                        }
                                    }
                                }
                                adj[*a][best_f] += g[((bi * cs + ci) * oh + oy) * ow + ox];
                            }
                        }
                    }
                }
            }
            Op::Dropout { a, mask } => {
                for (i, &gi) in g.iter().enumerate() {
                    adj[*a][i] += gi * mask[i];
                }
            }
            Op::CrossEntropy { logits, labels } => {
                let lv = self.value(*logits);
                let (bsz, c) = (lv.shape()[0], lv.shape()[1]);
                let gs = g[0];
                let scale = gs / bsz as f64;
                for r in 0..bsz {
                    let row = &lv.data()[r * c..(r + 1) * c];
                    let probs = stable_softmax_row(row);
                    for j in 0..c {
                        let indicator = if j == labels[r] { 1.0 } else { 0.0 };
                        adj[*logits][r * c + j] += scale * (probs[j] - indicator);
                    }
                }
            }
        }
    }

    // ---- replay ---------------------------------------------------------------

    /// Re-execute every node from its parents and compare with the stored
    /// values bit-for-bit.
    pub fn replay_matches(&self) -> Result<bool> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = |i: usize| &values[i];
            let recomputed = match &node.op {
                Op::Leaf => node.value.detached(),
                Op::Ew { kind, a, b, bcast } => ew_kernel(*kind, v(*a), v(*b), *bcast),
                Op::AddScalar { a, c } => map_kernel(v(*a), |x| x + c),
                Op::MulScalar { a, c } => map_kernel(v(*a), |x| x * c),
                Op::MatMul { a, b } => matmul_kernel(v(*a), v(*b)),
                Op::Transpose2d { a } => transpose_kernel(v(*a)),
                Op::Reduce { kind, a, axis } => reduce_kernel(*kind, v(*a), *axis),
                Op::Act { kind, a } => act_kernel(*kind, v(*a)),
                Op::Softmax { a, axis } => softmax_kernel(v(*a), *axis),
                Op::Reshape { a } => {
                    Tensor::from_vec(node.value.shape().to_vec(), v(*a).data().to_vec())?
                }
                Op::Concat { axis, parts } => {
                    let vals: Vec<&Tensor> = parts.iter().map(|&p| &values[p]).collect();
                    concat_kernel(&vals, *axis)
                }
                Op::Slice {
                    a,
                    axis,
                    start,
                    end,
                } => slice_kernel(v(*a), *axis, *start, *end),
                Op::GatherRows { a, rows } => gather_kernel(v(*a), rows),
                Op::Conv2d { x, w, b, pad } => conv2d_kernel(v(*x), v(*w), v(*b), *pad),
                Op::MaxPool2 { a } => maxpool2_kernel(v(*a)),
                Op::Dropout { a, mask } => dropout_kernel(v(*a), mask),
                Op::CrossEntropy { logits, labels } => cross_entropy_kernel(v(*logits), labels),
            };
            if recomputed.data() != node.value.data() || recomputed.shape() != node.value.shape() {
                return Ok(false);
            }
            values.push(recomputed);
        }
        Ok(true)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let ext = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, ext, inner)
}

fn shape4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

fn resolve_bcast(a: &[usize], b: &[usize]) -> Option<Bcast> {
    if a == b {
        Some(Bcast::Same)
    } else if b.iter().product::<usize>() == 1 {
        Some(Bcast::Scalar)
    } else if !b.is_empty() && b.len() < a.len() && a[a.len() - b.len()..] == *b {
        Some(Bcast::Trailing)
    } else {
        None
    }
}

// ---- pure kernels (shared by forward and replay) -------------------------

fn ew_kernel(kind: EwKind, a: &Tensor, b: &Tensor, bcast: Bcast) -> Tensor {
    let bn = b.numel();
    let bd = b.data();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &av)| {
            let bv = bd[bcast.map(i, bn)];
            match kind {
                EwKind::Add => av + bv,
                EwKind::Sub => av - bv,
                EwKind::Mul => av * bv,
                EwKind::Div => av / bv,
            }
        })
        .collect();
    Tensor::from_vec(a.shape().to_vec(), data).expect("kernel preserves element count")
}

fn map_kernel(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_vec(a.shape().to_vec(), a.data().iter().map(|&v| f(v)).collect())
        .expect("kernel preserves element count")
}

fn matmul_kernel(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let aik = a.data()[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data()[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    Tensor::from_vec(vec![m, n], out).expect("kernel preserves element count")
}

fn transpose_kernel(a: &Tensor) -> Tensor {
    let (r, c) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data()[i * c + j];
        }
    }
    Tensor::from_vec(vec![c, r], out).expect("kernel preserves element count")
}

fn reduce_kernel(kind: ReduceKind, a: &Tensor, axis: usize) -> Tensor {
    let (outer, ext, inner) = axis_split(a.shape(), axis);
    let mut shape = a.shape().to_vec();
    shape.remove(axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let mut acc = match kind {
                ReduceKind::Sum | ReduceKind::Mean => 0.0,
                ReduceKind::Max => a.data()[(o * ext) * inner + i],
            };
            for k in 0..ext {
                let v = a.data()[(o * ext + k) * inner + i];
                match kind {
                    ReduceKind::Sum | ReduceKind::Mean => acc += v,
                    ReduceKind::Max => {
                        if v > acc {
                            acc = v;
                        }
                    }
                }
            }
            if kind == ReduceKind::Mean {
                acc /= ext as f64;
            }
            out[o * inner + i] = acc;
        }
    }
    Tensor::from_vec(shape, out).expect("kernel preserves element count")
}

fn act_kernel(kind: ActKind, a: &Tensor) -> Tensor {
    map_kernel(a, |x| match kind {
        ActKind::Relu => {
            if x > 0.0 {
                x
            } else {
                0.0
            }
        }
        ActKind::Tanh => x.tanh(),
        ActKind::Sigmoid => {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        }
    })
}

fn softmax_kernel(a: &Tensor, axis: usize) -> Tensor {
    let (outer, ext, inner) = axis_split(a.shape(), axis);
    let mut out = vec![0.0; a.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let mut max = f64::NEG_INFINITY;
            for k in 0..ext {
                max = max.max(a.data()[(o * ext + k) * inner + i]);
            }
            let mut sum = 0.0;
            for k in 0..ext {
                let f = (o * ext + k) * inner + i;
                out[f] = (a.data()[f] - max).exp();
                sum += out[f];
            }
            for k in 0..ext {
                out[(o * ext + k) * inner + i] /= sum;
            }
        }
    }
    Tensor::from_vec(a.shape().to_vec(), out).expect("kernel preserves element count")
}

fn concat_kernel(parts: &[&Tensor], axis: usize) -> Tensor {
    let (outer, _, inner) = axis_split(parts[0].shape(), axis);
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut shape = parts[0].shape().to_vec();
    shape[axis] = total;
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let e = p.shape()[axis];
            out.extend_from_slice(&p.data()[o * e * inner..(o + 1) * e * inner]);
        }
    }
    Tensor::from_vec(shape, out).expect("kernel preserves element count")
}

fn slice_kernel(a: &Tensor, axis: usize, start: usize, end: usize) -> Tensor {
    let (outer, ext, inner) = axis_split(a.shape(), axis);
    let w = end - start;
    let mut shape = a.shape().to_vec();
    shape[axis] = w;
    let mut out = Vec::with_capacity(outer * w * inner);
    for o in 0..outer {
        out.extend_from_slice(&a.data()[(o * ext + start) * inner..(o * ext + end) * inner]);
    }
    Tensor::from_vec(shape, out).expect("kernel preserves element count")
}

fn gather_kernel(a: &Tensor, rows: &[usize]) -> Tensor {
    let cols = a.shape()[1];
    let mut out = Vec::with_capacity(rows.len() * cols);
    for &r in rows {
        out.extend_from_slice(&a.data()[r * cols..(r + 1) * cols]);
    }
    Tensor::from_vec(vec![rows.len(), cols], out).expect("kernel preserves element count")
}

fn conv2d_kernel(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> Tensor {
    let (bs, cs, h, ww) = shape4(x.shape());
    let (oc, _, kh, kw) = shape4(w.shape());
    let oh = h + 2 * pad - kh + 1;
    let ow = ww + 2 * pad - kw + 1;
    let mut out = vec![0.0; bs * oc * oh * ow];
    for bi in 0..bs {
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[o];
                    for ci in 0..cs {
                        for ky in 0..kh {
                            let iy = (oy + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox + kx) as isize - pad as isize;
                                if ix < 0 || ix >= ww as isize {
                                    continue;
                                }
                                acc += x.data()[((bi * cs + ci) * h + iy as usize) * ww
                                    + ix as usize]
                                    * w.data()[((o * cs + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((bi * oc + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::from_vec(vec![bs, oc, oh, ow], out).expect("kernel preserves element count")
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    pad: usize,
    g: &[f64],
    out_shape: &[usize],
    adj: &mut [Vec<f64>],
    xi: usize,
    wi: usize,
    bi_node: usize,
) {
    let (bs, cs, h, ww) = shape4(x.shape());
    let (oc, _, kh, kw) = shape4(w.shape());
    let (oh, ow) = (out_shape[2], out_shape[3]);
    for bi in 0..bs {
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = g[((bi * oc + o) * oh + oy) * ow + ox];
                    if go == 0.0 {
                        continue;
                    }
                    adj[bi_node][o] += go;
                    for ci in 0..cs {
                        for ky in 0..kh {
                            let iy = (oy + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox + kx) as isize - pad as isize;
                                if ix < 0 || ix >= ww as isize {
                                    continue;
                                }
                                let xf = ((bi * cs + ci) * h + iy as usize) * ww + ix as usize;
                                let wf = ((o * cs + ci) * kh + ky) * kw + kx;
                                adj[xi][xf] += go * w.data()[wf];
                                adj[wi][wf] += go * x.data()[xf];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn maxpool2_kernel(a: &Tensor) -> Tensor {
    let (bs, cs, h, w) = shape4(a.shape());
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; bs * cs * oh * ow];
    for bi in 0..bs {
        for ci in 0..cs {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let v = a.data()[((bi * cs + ci) * h + oy * 2 + dy) * w + ox * 2 + dx];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out[((bi * cs + ci) * oh + oy) * ow + ox] = best;
                }
            }
        }
    }
    Tensor::from_vec(vec![bs, cs, oh, ow], out).expect("kernel preserves element count")
}

fn dropout_kernel(a: &Tensor, mask: &[f64]) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(mask)
        .map(|(&v, &m)| v * m)
        .collect();
    Tensor::from_vec(a.shape().to_vec(), data).expect("kernel preserves element count")
}

fn stable_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn cross_entropy_kernel(logits: &Tensor, labels: &[usize]) -> Tensor {
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    let mut total = 0.0;
    for r in 0..b {
        let row = &logits.data()[r * c..(r + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[labels[r]];
    }
    Tensor::scalar(total / b as f64)
}
