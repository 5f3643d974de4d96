//! Dense rank-≤3 tensors and a reverse-mode autodiff tape.
//!
//! Values live in the [`Tape`] arena; a [`Var`] is a handle into it. Every
//! forward op checks its output for NaN/Inf and returns [`Error::Numeric`]
//! instead of propagating it. Parameters are held as [`Tensor`]s outside the
//! tape and are re-bound with [`Tape::leaf`] at every step; the tape is reset
//! explicitly between steps.

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

fn check_shape(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    if shape.len() > MAX_RANK {
        return Err(Error::shape(op, format!("rank {} exceeds {MAX_RANK}", shape.len())));
    }
    if shape.contains(&0) {
        return Err(Error::shape(op, format!("zero-sized dimension in {shape:?}")));
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::shape(
            op,
            format!("shape {shape:?} holds {numel} values, got {len}"),
        ));
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape("tensor", &shape, data.len())?;
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("valid zero tensor")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(Vec::new(), vec![value]).expect("scalar tensor")
    }

    /// Marks the tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the stored gradient, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("gradient of length {} for shape {:?}", g.len(), self.shape),
            ));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Sigmoid,
    Tanh,
    Exp,
    Log,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(BinaryKind, Var, Var),
    Unary(UnaryKind, Var),
    ScalarMul(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Sum(Var),
    SumAxis(Var, usize),
    Concat(Vec<Var>),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LogSoftmax(Var),
    Embedding(Var, Vec<usize>),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Wengert list of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn pad3(shape: &[usize]) -> [usize; 3] {
    let mut out = [1; 3];
    let off = 3 - shape.len();
    out[off..].copy_from_slice(shape);
    out
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let (pa, pb) = (pad3(a), pad3(b));
    let mut out = Vec::with_capacity(rank);
    for k in (3 - rank)..3 {
        let d = match (pa[k], pb[k]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(
                    op,
                    format!("cannot broadcast {a:?} with {b:?}"),
                ))
            }
        };
        out.push(d);
    }
    Ok(out)
}

/// Flat index into `input` for every flat position of `out` under broadcasting.
fn broadcast_index(out: &[usize], input: &[usize]) -> Vec<usize> {
    let po = pad3(out);
    let pi = pad3(input);
    let strides = [pi[1] * pi[2], pi[2], 1];
    let mut idx = Vec::with_capacity(po.iter().product());
    for i0 in 0..po[0] {
        let o0 = if pi[0] == 1 { 0 } else { i0 * strides[0] };
        for i1 in 0..po[1] {
            let o1 = if pi[1] == 1 { 0 } else { i1 * strides[1] };
            for i2 in 0..po[2] {
                let o2 = if pi[2] == 1 { 0 } else { i2 };
                idx.push(o0 + o1 + o2);
            }
        }
    }
    idx
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn check_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric { op })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every recorded node so the tape can be reused for the next step.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// The single value of a one-element node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node has a valid shape")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a copy of `t`; it participates in backward iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        check_shape("constant", &shape, data.len())?;
        check_finite("constant", &data)?;
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn scalar(&mut self, value: f64) -> Result<Var> {
        self.constant(Vec::new(), vec![value])
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(name, &sa, &sb)?;
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let (va, vb) = (self.value(a), self.value(b));
        let value: Vec<f64> = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ia = broadcast_index(&out_shape, &sa);
            let ib = broadcast_index(&out_shape, &sb);
            ia.iter().zip(&ib).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        check_finite(name, &value)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out_shape, value, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let (name, f): (&'static str, fn(f64) -> f64) = match kind {
            UnaryKind::Sigmoid => ("sigmoid", sigmoid),
            UnaryKind::Tanh => ("tanh", f64::tanh),
            UnaryKind::Exp => ("exp", f64::exp),
            UnaryKind::Log => ("log", f64::ln),
        };
        let value: Vec<f64> = self.value(x).iter().map(|&v| f(v)).collect();
        check_finite(name, &value)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::Unary(kind, x), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn scalar_mul(&mut self, x: Var, c: f64) -> Result<Var> {
        let value: Vec<f64> = self.value(x).iter().map(|&v| v * c).collect();
        check_finite("scalar_mul", &value)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::ScalarMul(x, c), rg))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let value: Vec<f64> = self.value(x).iter().map(|&v| v + c).collect();
        check_finite("add_scalar", &value)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::AddScalar(x), rg))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scalar_mul(x, -1.0)
    }

    /// `[.., m, k] @ [k, n] -> [.., m, n]`; the left operand may carry one
    /// leading batch axis.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} @ {sb:?}")));
        }
        let k = sb[0];
        let n = sb[1];
        let rows = self.value(a).len() / k;
        let mut value = vec![0.0; rows * n];
        matmul_into(self.value(a), self.value(b), rows, k, n, &mut value);
        check_finite("matmul", &value)?;
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(shape, value, Op::MatMul(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).iter().sum();
        check_finite("sum", &[s])?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Vec::new(), vec![s], Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scalar_mul(s, 1.0 / n)
    }

    /// Sums out `axis`, dropping it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let v = self.value(x);
        let mut value = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    value[o * inner + i] += v[base + i];
                }
            }
        }
        check_finite("sum_axis", &value)?;
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.any_grad(&[x]);
        Ok(self.push(out_shape, value, Op::SumAxis(x, axis), rg))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", format!("axis {axis}")))?;
        let s = self.sum_axis(x, axis)?;
        self.scalar_mul(s, 1.0 / len as f64)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let lead = {
            let s = self.shape(*first);
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape(
                    "concat",
                    format!("leading dims {:?} vs {lead:?}", &s[..s.len().saturating_sub(1)]),
                ));
            }
            widths.push(last_dim(s));
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut value = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.any_grad(parts);
        Ok(self.push(shape, value, Op::Concat(parts.to_vec()), rg))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(Error::Domain(format!("clamp bounds lo={lo} hi={hi}")));
        }
        let value: Vec<f64> = self.value(x).iter().map(|&v| v.clamp(lo, hi)).collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::Clamp(x, lo, hi), rg))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let value = row_log_softmax(self.value(x), last_dim(self.shape(x)))
            .into_iter()
            .map(f64::exp)
            .collect::<Vec<_>>();
        check_finite("softmax", &value)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::Softmax(x), rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let value = row_log_softmax(self.value(x), last_dim(self.shape(x)));
        check_finite("log_softmax", &value)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::LogSoftmax(x), rg))
    }

    /// Gathers rows of a `[vocab, dim]` table; output shape is `ids_shape ++ [dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::shape("embedding", format!("table shape {ts:?}")));
        }
        if ids_shape.len() + 1 > MAX_RANK || ids_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::shape(
                "embedding",
                format!("ids shape {ids_shape:?} for {} ids", ids.len()),
            ));
        }
        let (vocab, dim) = (ts[0], ts[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::shape("embedding", format!("id {bad} >= vocab {vocab}")));
        }
        let t = self.value(table);
        let mut value = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            value.extend_from_slice(&t[i * dim..(i + 1) * dim]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(dim);
        let rg = self.any_grad(&[table]);
        Ok(self.push(shape, value, Op::Embedding(table, ids.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        check_shape("reshape", &shape, self.value(x).len())?;
        let value = self.value(x).to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(shape, value, Op::Reshape(x), rg))
    }

    /// Reverse sweep from a scalar `loss`. Callable once per [`Tape::reset`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward(
                "backward already ran on this tape; call reset first".into(),
            ));
        }
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                ln.shape
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward's loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient recorded for `v` into `t.grad`. Nothing happens when
    /// `v` was unreachable from the loss.
    pub fn grad_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                slot => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let n = g.len();
                let (ia, ib): (Vec<usize>, Vec<usize>) = if sa == sb {
                    ((0..n).collect(), (0..n).collect())
                } else {
                    (
                        broadcast_index(&node.shape, sa),
                        broadcast_index(&node.shape, sb),
                    )
                };
                let mut ga = vec![0.0; va.len()];
                let mut gb = vec![0.0; vb.len()];
                for o in 0..n {
                    let (i, j) = (ia[o], ib[o]);
                    let (da, db) = match kind {
                        BinaryKind::Add => (1.0, 1.0),
                        BinaryKind::Sub => (1.0, -1.0),
                        BinaryKind::Mul => (vb[j], va[i]),
                        BinaryKind::Div => (1.0 / vb[j], -va[i] / (vb[j] * vb[j])),
                    };
                    ga[i] += g[o] * da;
                    gb[j] += g[o] * db;
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Unary(kind, x) => {
                let xv = &self.nodes[x.0].value;
                let y = &node.value;
                let gx = (0..g.len())
                    .map(|i| {
                        g[i] * match kind {
                            UnaryKind::Sigmoid => y[i] * (1.0 - y[i]),
                            UnaryKind::Tanh => 1.0 - y[i] * y[i],
                            UnaryKind::Exp => y[i],
                            UnaryKind::Log => 1.0 / xv[i],
                        }
                    })
                    .collect();
                acc(*x, gx);
            }
            Op::ScalarMul(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let sb = &self.nodes[b.0].shape;
                let (k, n) = (sb[0], sb[1]);
                let rows = va.len() / k;
                if self.nodes[a.0].requires_grad {
                    // dA = G Bᵀ
                    let mut ga = vec![0.0; va.len()];
                    for r in 0..rows {
                        let grow = &g[r * n..(r + 1) * n];
                        for kk in 0..k {
                            let brow = &vb[kk * n..(kk + 1) * n];
                            ga[r * k + kk] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    acc(*a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ G
                    let mut gb = vec![0.0; vb.len()];
                    for r in 0..rows {
                        let grow = &g[r * n..(r + 1) * n];
                        for kk in 0..k {
                            let av = va[r * k + kk];
                            if av == 0.0 {
                                continue;
                            }
                            let dst = &mut gb[kk * n..(kk + 1) * n];
                            dst.iter_mut().zip(grow).for_each(|(d, gv)| *d += av * gv);
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.len();
                acc(*x, vec![g[0]; n]);
            }
            Op::SumAxis(x, axis) => {
                let shape = &self.nodes[x.0].shape;
                let (outer, len, inner) = split_axis(shape, *axis);
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                acc(*x, gx);
            }
            Op::Concat(parts) => {
                let total = last_dim(&node.shape);
                let rows = g.len() / total;
                let mut offset = 0;
                for p in parts {
                    let w = last_dim(&self.nodes[p.0].shape);
                    let mut gp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    acc(*p, gp);
                    offset += w;
                }
            }
            Op::Clamp(x, lo, hi) => {
                let xv = &self.nodes[x.0].value;
                let gx = xv
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > *lo && v < *hi { gv } else { 0.0 })
                    .collect();
                acc(*x, gx);
            }
            Op::Softmax(x) => {
                let w = last_dim(&node.shape);
                let y = &node.value;
                let mut gx = vec![0.0; y.len()];
                for r in 0..y.len() / w {
                    let (ys, gs) = (&y[r * w..(r + 1) * w], &g[r * w..(r + 1) * w]);
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for i in 0..w {
                        gx[r * w + i] = ys[i] * (gs[i] - dot);
                    }
                }
                acc(*x, gx);
            }
            Op::LogSoftmax(x) => {
                let w = last_dim(&node.shape);
                let y = &node.value;
                let mut gx = vec![0.0; y.len()];
                for r in 0..y.len() / w {
                    let gs = &g[r * w..(r + 1) * w];
                    let total: f64 = gs.iter().sum();
                    for i in 0..w {
                        gx[r * w + i] = gs[i] - y[r * w + i].exp() * total;
                    }
                }
                acc(*x, gx);
            }
            Op::Embedding(table, ids) => {
                let ts = &self.nodes[table.0].shape;
                let dim = ts[1];
                let mut gt = vec![0.0; ts[0] * dim];
                for (row, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id * dim..(id + 1) * dim];
                    dst.iter_mut()
                        .zip(&g[row * dim..(row + 1) * dim])
                        .for_each(|(d, v)| *d += v);
                }
                acc(*table, gt);
            }
        }
        Ok(())
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matmul_into(a: &[f64], b: &[f64], rows: usize, k: usize, n: usize, out: &mut [f64]) {
    for r in 0..rows {
        let orow = &mut out[r * n..(r + 1) * n];
        for kk in 0..k {
            let av = a[r * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, bv)| *o += av * bv);
        }
    }
}

fn row_log_softmax(x: &[f64], w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(w) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Maximum over coordinates of `|analytic − numeric| / max(1, |numeric|)`
/// for a scalar function of `x`, using central differences with step `h`.
///
/// `f` must be deterministic: it is evaluated twice at `x` and any difference
/// between the two results is reported as an error.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |point: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.leaf(point);
        let out = f(&mut tape, xv)?;
        if tape.value(out).len() != 1 {
            return Err(Error::GradCheck(format!(
                "function output has shape {:?}, expected a scalar",
                tape.shape(out)
            )));
        }
        Ok(tape.scalar_value(out))
    };
    let base = {
        let mut p = x.clone();
        p.set_requires_grad(false);
        p
    };
    let first = eval(&base)?;
    let second = eval(&base)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::GradCheck(format!(
            "function is not deterministic ({first} vs {second}); freeze its noise"
        )));
    }

    let analytic = {
        let mut tape = Tape::new();
        let p = base.clone().with_grad();
        let xv = tape.leaf(&p);
        let out = f(&mut tape, xv)?;
        tape.backward(out)?;
        tape.grad(xv)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; x.numel()])
    };

    let mut worst = 0.0_f64;
    for i in 0..x.numel() {
        let mut plus = base.clone();
        plus.data_mut()[i] += h;
        let mut minus = base.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Relative gradient error of every primitive op on fixed inputs, each
/// reduced to a scalar through a fixed weighted sum.
pub fn primitive_grad_checks(h: f64) -> Result<Vec<(&'static str, f64)>> {
    type Build = fn(&mut Tape, Var) -> Result<Var>;
    let x23 = Tensor::new(vec![2, 3], vec![0.3, -0.7, 1.1, 0.5, -1.3, 0.9])?;
    let x6 = Tensor::new(vec![2, 3], vec![0.4, 1.3, 0.7, 2.1, 0.9, 1.6])?;
    let x3d = Tensor::new(vec![2, 2, 3], (0..12).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect())?;

    fn reduce(t: &mut Tape, y: Var) -> Result<Var> {
        let n = t.value(y).len();
        let w = (0..n).map(|i| 0.5 + 0.25 * i as f64).collect();
        let w = t.constant(t.shape(y).to_vec(), w)?;
        let p = t.mul(y, w)?;
        t.sum(p)
    }
    fn other(t: &mut Tape) -> Result<Var> {
        t.constant(vec![3], vec![0.8, -1.2, 1.7])
    }

    let cases: Vec<(&'static str, &Tensor, Build)> = vec![
        ("add", &x23, |t, x| { let o = other(t)?; let y = t.add(x, o)?; let y = t.mul(y, y)?; reduce(t, y) }),
        ("sub", &x23, |t, x| { let o = other(t)?; let y = t.sub(o, x)?; let y = t.mul(y, y)?; reduce(t, y) }),
        ("mul", &x23, |t, x| { let y = t.mul(x, x)?; reduce(t, y) }),
        ("div", &x6, |t, x| { let o = other(t)?; let y = t.div(o, x)?; reduce(t, y) }),
        ("sigmoid", &x23, |t, x| { let y = t.sigmoid(x)?; reduce(t, y) }),
        ("tanh", &x23, |t, x| { let y = t.tanh(x)?; reduce(t, y) }),
        ("exp", &x23, |t, x| { let y = t.exp(x)?; reduce(t, y) }),
        ("log", &x6, |t, x| { let y = t.log(x)?; reduce(t, y) }),
        ("scalar_mul", &x23, |t, x| { let y = t.scalar_mul(x, -2.5)?; let y = t.mul(y, x)?; reduce(t, y) }),
        ("add_scalar", &x23, |t, x| { let y = t.add_scalar(x, 0.7)?; let y = t.mul(y, y)?; reduce(t, y) }),
        ("neg", &x23, |t, x| { let y = t.neg(x)?; let y = t.exp(y)?; reduce(t, y) }),
        ("matmul", &x3d, |t, x| {
            let w = t.constant(vec![3, 2], vec![0.2, -0.4, 0.9, 0.1, -0.6, 0.3])?;
            let y = t.matmul(x, w)?;
            let y = t.mul(y, y)?;
            reduce(t, y)
        }),
        ("sum", &x23, |t, x| { let y = t.mul(x, x)?; t.sum(y) }),
        ("mean", &x23, |t, x| { let y = t.exp(x)?; t.mean(y) }),
        ("sum_axis", &x3d, |t, x| { let y = t.sum_axis(x, 1)?; let y = t.mul(y, y)?; reduce(t, y) }),
        ("mean_axis", &x3d, |t, x| { let y = t.mean_axis(x, 2)?; let y = t.mul(y, y)?; reduce(t, y) }),
        ("concat", &x23, |t, x| {
            let e = t.exp(x)?;
            let y = t.concat(&[x, e])?;
            let y = t.mul(y, y)?;
            reduce(t, y)
        }),
        ("clamp", &x23, |t, x| { let y = t.clamp(x, -1.0, 1.0)?; let y = t.mul(y, x)?; reduce(t, y) }),
        ("softmax", &x23, |t, x| { let y = t.softmax(x)?; reduce(t, y) }),
        ("log_softmax", &x23, |t, x| { let y = t.log_softmax(x)?; reduce(t, y) }),
        ("embedding", &x23, |t, x| { let y = t.embedding(x, &[1, 0, 1, 1], &[2, 2])?; let y = t.mul(y, y)?; reduce(t, y) }),
        ("reshape", &x23, |t, x| { let y = t.reshape(x, vec![3, 2])?; let y = t.sigmoid(y)?; reduce(t, y) }),
    ];
    cases
        .into_iter()
        .map(|(name, x, f)| grad_check(f, x, h).map(|e| (name, e)))
        .collect()
}
