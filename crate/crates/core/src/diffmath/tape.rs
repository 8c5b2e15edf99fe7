//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive appends a node holding its forward value. Node ids are
//! handed out in creation order, which is already a topological order, so
//! `backward` is a single reverse sweep that visits each node once.

use std::cell::Cell;
use std::fmt;

use super::tensor::{axis_split, strides, Tensor};
use crate::error::{contract, ensure, numeric, Result};

/// Lower clamp applied to the second KL argument before the log.
pub const KL_CLAMP: f64 = 1e-12;

/// Tolerance on probability-vector sums accepted by [`Tape::kl_rows`].
pub const PROB_SUM_TOL: f64 = 1e-6;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds, used for reporting and for gradient fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    Tanh,
    Exp,
    Log,
    Sqrt,
    Sum,
    SumAll,
    Reshape,
    Concat,
    Narrow,
    IndexSelect,
    Gather,
    Softmax,
    LogSoftmax,
    KlRows,
}

impl OpKind {
    pub const ALL: [OpKind; 22] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Scale,
        OpKind::Tanh,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Sqrt,
        OpKind::Sum,
        OpKind::SumAll,
        OpKind::Reshape,
        OpKind::Concat,
        OpKind::Narrow,
        OpKind::IndexSelect,
        OpKind::Gather,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::KlRows,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale => "scale",
            OpKind::Tanh => "tanh",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sqrt => "sqrt",
            OpKind::Sum => "sum",
            OpKind::SumAll => "sum_all",
            OpKind::Reshape => "reshape",
            OpKind::Concat => "concat",
            OpKind::Narrow => "narrow",
            OpKind::IndexSelect => "index_select",
            OpKind::Gather => "gather",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::KlRows => "kl_rows",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.iter().copied().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

thread_local! {
    static GRAD_FAULT: Cell<Option<(OpKind, f64)>> = const { Cell::new(None) };
}

/// Runs `f` with the backward rule of `kind` scaled by `factor` on every tape
/// created on this thread. Test fixture for the gradient checker.
pub fn with_gradient_fault<R>(kind: OpKind, factor: f64, f: impl FnOnce() -> R) -> R {
    let prev = GRAD_FAULT.with(|c| c.replace(Some((kind, factor))));
    let out = f();
    GRAD_FAULT.with(|c| c.set(prev));
    out
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Sum { input: Var, axis: usize },
    SumAll(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { input: Var, axis: usize, start: usize },
    IndexSelect { input: Var, indices: Vec<usize> },
    Gather { input: Var, indices: Vec<usize> },
    Softmax { input: Var, axis: usize },
    LogSoftmax { input: Var, axis: usize },
    KlRows { p: Var, q: Var, axis: usize },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Scale(..) => OpKind::Scale,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::Sqrt(..) => OpKind::Sqrt,
            Op::Sum { .. } => OpKind::Sum,
            Op::SumAll(..) => OpKind::SumAll,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Concat { .. } => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::IndexSelect { .. } => OpKind::IndexSelect,
            Op::Gather { .. } => OpKind::Gather,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LogSoftmax { .. } => OpKind::LogSoftmax,
            Op::KlRows { .. } => OpKind::KlRows,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation graph for one forward/backward pass.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    fault: Option<(OpKind, f64)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            fault: GRAD_FAULT.with(|c| c.get()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that receives a gradient on `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated into `v` by the last `backward`, zeros if `v` was
    /// unreachable from the loss.
    pub fn grad(&self, v: Var) -> Tensor {
        let shape = self.nodes[v.0].value.shape().to_vec();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    // ---- contraction and layout ------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        ensure!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul shapes {:?} x {:?}",
            sa,
            sb
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.tracked(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        ensure!(s.len() == 2, "transpose needs a matrix, got {:?}", s);
        let (r, c) = (s[0], s[1]);
        let out = transpose_raw(self.value(a).data(), r, c);
        let rg = self.tracked(&[a]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let rg = self.tracked(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        ensure!(!inputs.is_empty(), "concat of nothing");
        let first = self.shape(inputs[0]).to_vec();
        ensure!(axis < first.len(), "concat axis {} out of range", axis);
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            ensure!(
                s.len() == first.len()
                    && s.iter()
                        .zip(&first)
                        .enumerate()
                        .all(|(i, (x, y))| i == axis || x == y),
                "concat shape {:?} incompatible with {:?} on axis {}",
                s,
                first,
                axis
            );
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let rg = self.tracked(inputs);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        ensure!(axis < s.len(), "narrow axis {} out of range for {:?}", axis, s);
        ensure!(
            start + len <= s[axis],
            "narrow [{}, {}) exceeds axis length {}",
            start,
            start + len,
            s[axis]
        );
        let (outer, alen, inner) = axis_split(&s, axis);
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.tracked(&[a]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Narrow {
                input: a,
                axis,
                start,
            },
            rg,
        ))
    }

    /// Rows of the leading axis picked by `indices` (repeats allowed).
    pub fn index_select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        ensure!(!s.is_empty(), "index_select on a scalar");
        let width: usize = s[1..].iter().product();
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            ensure!(i < s[0], "index {} out of range for leading axis {}", i, s[0]);
            out.extend_from_slice(&d[i * width..(i + 1) * width]);
        }
        let mut shape = s;
        shape[0] = indices.len();
        let rg = self.tracked(&[a]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::IndexSelect {
                input: a,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// `[n, c] -> [n]`, picking column `indices[i]` from row `i`.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        ensure!(
            s.len() == 2 && s[0] == indices.len(),
            "gather needs [n, c] with n = {} indices, got {:?}",
            indices.len(),
            s
        );
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(s[0]);
        for (i, &c) in indices.iter().enumerate() {
            ensure!(c < s[1], "gather column {} out of range {}", c, s[1]);
            out.push(d[i * s[1] + c]);
        }
        let rg = self.tracked(&[a]);
        Ok(self.push(
            Tensor::from_vec(out),
            Op::Gather {
                input: a,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let plan = BroadcastPlan::new(self.shape(a), self.shape(b))?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(plan.numel);
        plan.for_each(|_, ia, ib| out.push(f(da[ia], db[ib])));
        let rg = self.tracked(&[a, b]);
        Ok(self.push(Tensor::new(plan.out_shape.clone(), out)?, op, rg))
    }

    /// Elementwise sum. Operands must have equal rank; each axis must match or be 1.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
            .expect("unary preserves shape");
        let rg = self.tracked(&[a]);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        ensure!(
            self.value(a).data().iter().all(|&x| x > 0.0),
            "log of a non-positive value"
        );
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        ensure!(
            self.value(a).data().iter().all(|&x| x > 0.0),
            "sqrt needs strictly positive inputs"
        );
        Ok(self.unary(a, Op::Sqrt(a), f64::sqrt))
    }

    // ---- reductions --------------------------------------------------------

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        ensure!(axis < s.len(), "sum axis {} out of range for {:?}", axis, s);
        let (outer, len, inner) = axis_split(&s, axis);
        let d = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let row = &d[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (acc, x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let rg = self.tracked(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Sum { input: a, axis }, rg))
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| contract(format!("mean axis {axis} out of range")))?;
        let s = self.sum(a, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// Sum of every element, as a rank-0 scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        let rg = self.tracked(&[a]);
        self.push(Tensor::scalar(total), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    // ---- normalized exponentials -------------------------------------------

    fn check_finite(&self, a: Var, what: &str) -> Result<()> {
        if self.value(a).all_finite() {
            Ok(())
        } else {
            Err(numeric(format!("{what} input contains non-finite values")))
        }
    }

    /// Softmax along `axis`, stabilized by subtracting the slice maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        ensure!(axis < s.len(), "softmax axis {} out of range for {:?}", axis, s);
        self.check_finite(a, "softmax")?;
        let out = softmax_raw(self.value(a).data(), &s, axis, false);
        let rg = self.tracked(&[a]);
        Ok(self.push(Tensor::new(s, out)?, Op::Softmax { input: a, axis }, rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        ensure!(axis < s.len(), "log_softmax axis {} out of range for {:?}", axis, s);
        self.check_finite(a, "log_softmax")?;
        let out = softmax_raw(self.value(a).data(), &s, axis, true);
        let rg = self.tracked(&[a]);
        Ok(self.push(Tensor::new(s, out)?, Op::LogSoftmax { input: a, axis }, rg))
    }

    /// Mean over all slices along `axis` of `sum p * ln(p / q)`.
    ///
    /// Terms with `p = 0` contribute nothing; `q` is clamped below at
    /// [`KL_CLAMP`]. Both arguments must hold probability vectors along `axis`.
    pub fn kl_rows(&mut self, p: Var, q: Var, axis: usize) -> Result<Var> {
        let s = self.shape(p).to_vec();
        ensure!(
            s == self.shape(q),
            "kl_rows shape mismatch {:?} vs {:?}",
            s,
            self.shape(q)
        );
        ensure!(axis < s.len(), "kl_rows axis {} out of range for {:?}", axis, s);
        let (outer, len, inner) = axis_split(&s, axis);
        let (pd, qd) = (self.value(p).data(), self.value(q).data());
        for (name, d) in [("p", pd), ("q", qd)] {
            for o in 0..outer {
                for i in 0..inner {
                    let mut sum = 0.0;
                    for k in 0..len {
                        let x = d[(o * len + k) * inner + i];
                        ensure!(
                            x >= 0.0 && x.is_finite(),
                            "kl_rows: {} has invalid probability {}",
                            name,
                            x
                        );
                        sum += x;
                    }
                    ensure!(
                        (sum - 1.0).abs() <= PROB_SUM_TOL,
                        "kl_rows: {} slice sums to {}",
                        name,
                        sum
                    );
                }
            }
        }
        let mut total = 0.0;
        for (&pi, &qi) in pd.iter().zip(qd) {
            if pi > 0.0 {
                total += pi * (pi / qi.max(KL_CLAMP)).ln();
            }
        }
        let slices = (outer * inner) as f64;
        let rg = self.tracked(&[p, q]);
        Ok(self.push(
            Tensor::scalar(total / slices),
            Op::KlRows { p, q, axis },
            rg,
        ))
    }

    // ---- reverse sweep -----------------------------------------------------

    /// Accumulates d`loss`/d`x` into every tracked node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        ensure!(!self.backward_done, "backward already ran on this tape");
        let lv = self.value(loss);
        ensure!(
            lv.numel() == 1,
            "backward needs a scalar loss, got shape {:?}",
            lv.shape()
        );
        if !lv.item().is_finite() {
            return Err(numeric(format!("loss is not finite: {}", lv.item())));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            let contributions = self.local_grads(id, &g);
            self.grads[id] = Some(g);
            let factor = match self.fault {
                Some((kind, f)) if kind == self.nodes[id].op.kind() => f,
                _ => 1.0,
            };
            for (input, mut delta) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                if factor != 1.0 {
                    delta.iter_mut().for_each(|x| *x *= factor);
                }
                match &mut self.grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `id` for upstream gradient `g`.
    fn local_grads(&self, id: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[id];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let shp = |v: Var| self.nodes[v.0].value.shape();
        let want = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (m, k) = (shp(*a)[0], shp(*a)[1]);
                let n = shp(*b)[1];
                let mut res = Vec::new();
                if want(*a) {
                    let bt = transpose_raw(val(*b), k, n);
                    res.push((*a, matmul_raw(g, &bt, m, n, k)));
                }
                if want(*b) {
                    let at = transpose_raw(val(*a), m, k);
                    res.push((*b, matmul_raw(&at, g, k, m, n)));
                }
                res
            }
            Op::Transpose(a) => {
                let (r, c) = (shp(*a)[0], shp(*a)[1]);
                vec![(*a, transpose_raw(g, c, r))]
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                let plan = BroadcastPlan::new(shp(*a), shp(*b)).expect("validated in forward");
                let (da, db) = (val(*a), val(*b));
                let mut ga = vec![0.0; da.len()];
                let mut gb = vec![0.0; db.len()];
                match node.op {
                    Op::Add(..) => plan.for_each(|o, ia, ib| {
                        ga[ia] += g[o];
                        gb[ib] += g[o];
                    }),
                    Op::Sub(..) => plan.for_each(|o, ia, ib| {
                        ga[ia] += g[o];
                        gb[ib] -= g[o];
                    }),
                    Op::Mul(..) => plan.for_each(|o, ia, ib| {
                        ga[ia] += g[o] * db[ib];
                        gb[ib] += g[o] * da[ia];
                    }),
                    _ => plan.for_each(|o, ia, ib| {
                        ga[ia] += g[o] / db[ib];
                        gb[ib] -= g[o] * da[ia] / (db[ib] * db[ib]);
                    }),
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|x| x * c).collect())],
            Op::Tanh(a) => vec![(
                *a,
                g.iter().zip(out).map(|(gi, y)| gi * (1.0 - y * y)).collect(),
            )],
            Op::Exp(a) => vec![(*a, g.iter().zip(out).map(|(gi, y)| gi * y).collect())],
            Op::Log(a) => vec![(*a, g.iter().zip(val(*a)).map(|(gi, x)| gi / x).collect())],
            Op::Sqrt(a) => vec![(
                *a,
                g.iter().zip(out).map(|(gi, y)| gi * 0.5 / y).collect(),
            )],
            Op::Sum { input, axis } => {
                let (outer, len, inner) = axis_split(shp(*input), *axis);
                let mut gi = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        gi[(o * len + k) * inner..(o * len + k + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![(*input, gi)]
            }
            Op::SumAll(a) => vec![(*a, vec![g[0]; val(*a).len()])],
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut res: Vec<(Var, Vec<f64>)> = inputs
                    .iter()
                    .map(|&v| (v, Vec::with_capacity(val(v).len())))
                    .collect();
                for o in 0..outer {
                    let mut offset = 0;
                    for (v, buf) in res.iter_mut() {
                        let len = shp(*v)[*axis];
                        let base = (o * total + offset) * inner;
                        buf.extend_from_slice(&g[base..base + len * inner]);
                        offset += len;
                    }
                }
                res
            }
            Op::Narrow { input, axis, start } => {
                let (outer, alen, inner) = axis_split(shp(*input), *axis);
                let len = node.value.shape()[*axis];
                let mut gi = vec![0.0; outer * alen * inner];
                for o in 0..outer {
                    let base = (o * alen + start) * inner;
                    gi[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*input, gi)]
            }
            Op::IndexSelect { input, indices } => {
                let s = shp(*input);
                let width: usize = s[1..].iter().product();
                let mut gi = vec![0.0; s[0] * width];
                for (r, &i) in indices.iter().enumerate() {
                    for (acc, x) in gi[i * width..(i + 1) * width]
                        .iter_mut()
                        .zip(&g[r * width..(r + 1) * width])
                    {
                        *acc += x;
                    }
                }
                vec![(*input, gi)]
            }
            Op::Gather { input, indices } => {
                let c = shp(*input)[1];
                let mut gi = vec![0.0; val(*input).len()];
                for (i, &col) in indices.iter().enumerate() {
                    gi[i * c + col] += g[i];
                }
                vec![(*input, gi)]
            }
            Op::Softmax { input, axis } => {
                let (outer, len, inner) = axis_split(shp(*input), *axis);
                let mut gi = vec![0.0; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g[idx(k)] * out[idx(k)]).sum();
                        for k in 0..len {
                            gi[idx(k)] = out[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                vec![(*input, gi)]
            }
            Op::LogSoftmax { input, axis } => {
                let (outer, len, inner) = axis_split(shp(*input), *axis);
                let mut gi = vec![0.0; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let gsum: f64 = (0..len).map(|k| g[idx(k)]).sum();
                        for k in 0..len {
                            gi[idx(k)] = g[idx(k)] - out[idx(k)].exp() * gsum;
                        }
                    }
                }
                vec![(*input, gi)]
            }
            Op::KlRows { p, q, axis } => {
                let (outer, _, inner) = axis_split(shp(*p), *axis);
                let w = g[0] / (outer * inner) as f64;
                let (pd, qd) = (val(*p), val(*q));
                let mut gp = vec![0.0; pd.len()];
                let mut gq = vec![0.0; qd.len()];
                for (k, (&pi, &qi)) in pd.iter().zip(qd).enumerate() {
                    if pi > 0.0 {
                        let qc = qi.max(KL_CLAMP);
                        gp[k] = w * ((pi / qc).ln() + 1.0);
                        if qi >= KL_CLAMP {
                            gq[k] = -w * pi / qi;
                        }
                    }
                }
                vec![(*p, gp), (*q, gq)]
            }
        }
    }
}

/// Index mapping for same-rank broadcasting where each axis matches or is 1.
struct BroadcastPlan {
    out_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
    numel: usize,
}

impl BroadcastPlan {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        ensure!(
            a.len() == b.len(),
            "broadcast needs equal ranks, got {:?} and {:?}",
            a,
            b
        );
        let mut out_shape = Vec::with_capacity(a.len());
        for (&x, &y) in a.iter().zip(b) {
            ensure!(
                x == y || x == 1 || y == 1,
                "shapes {:?} and {:?} do not broadcast",
                a,
                b
            );
            out_shape.push(x.max(y));
        }
        let sa = strides(a);
        let sb = strides(b);
        let a_strides = a
            .iter()
            .zip(&sa)
            .zip(&out_shape)
            .map(|((&n, &s), &o)| if n == 1 && o != 1 { 0 } else { s })
            .collect();
        let b_strides = b
            .iter()
            .zip(&sb)
            .zip(&out_shape)
            .map(|((&n, &s), &o)| if n == 1 && o != 1 { 0 } else { s })
            .collect();
        let numel = out_shape.iter().product();
        Ok(BroadcastPlan {
            out_shape,
            a_strides,
            b_strides,
            numel,
        })
    }

    /// Calls `f(out_index, a_index, b_index)` in row-major output order.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        if self.numel == 0 {
            return;
        }
        let rank = self.out_shape.len();
        if rank == 0 {
            f(0, 0, 0);
            return;
        }
        let mut counter = vec![0usize; rank];
        let (mut ia, mut ib) = (0usize, 0usize);
        let last = rank - 1;
        let inner = self.out_shape[last];
        let (sa, sb) = (self.a_strides[last], self.b_strides[last]);
        let mut o = 0;
        while o < self.numel {
            for k in 0..inner {
                f(o + k, ia + k * sa, ib + k * sb);
            }
            o += inner;
            // advance the outer counters
            let mut axis = last;
            while axis > 0 {
                axis -= 1;
                counter[axis] += 1;
                ia += self.a_strides[axis];
                ib += self.b_strides[axis];
                if counter[axis] < self.out_shape[axis] {
                    break;
                }
                ia -= self.a_strides[axis] * counter[axis];
                ib -= self.b_strides[axis] * counter[axis];
                counter[axis] = 0;
            }
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            for (acc, y) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *acc += x * y;
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn softmax_raw(d: &[f64], shape: &[usize], axis: usize, log: bool) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| d[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (d[idx(k)] - max).exp();
                out[idx(k)] = e;
                total += e;
            }
            if log {
                let lse = total.ln();
                for k in 0..len {
                    out[idx(k)] = d[idx(k)] - max - lse;
                }
            } else {
                for k in 0..len {
                    out[idx(k)] /= total;
                }
            }
        }
    }
    out
}
