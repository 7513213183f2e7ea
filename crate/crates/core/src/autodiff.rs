//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive appends one node to the [`Tape`]; [`Tape::backward`]
//! walks the tape in exact reverse order, so gradient accumulation is
//! deterministic. Gradients are kept for leaf nodes only.
//!
//! ```
//! use gae_distill::autodiff::Tape;
//! use gae_distill::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let w = tape.param(Tensor::filled(2, 2, 3.0));
//! let loss = tape.sum(w);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(w).unwrap(), &Tensor::filled(2, 2, 1.0));
//! ```

use std::cell::Cell;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, SparseMatrix, Tensor};

/// Guard used by row normalization and `log`.
pub const EPS: f64 = 1e-8;

/// Names of every differentiable primitive, as used by
/// [`inject_adjoint_fault`].
pub const OP_NAMES: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "normalize_rows",
    "pow",
    "exp",
    "log",
    "prelu",
    "gather_rows",
    "segment_sum",
    "segment_softmax",
    "sum",
    "mean_rows",
    "spmm",
    "replace_rows",
    "pair_dot",
    "row_sum",
];

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static ADJOINT_FAULT: Cell<Option<&'static str>> = const { Cell::new(None) };
}

/// Scales the adjoint of the named primitive by 1.5 on this thread.
/// Negative control for the gradient checker; `None` restores correct
/// behavior.
#[doc(hidden)]
pub fn inject_adjoint_fault(op: Option<&'static str>) {
    ADJOINT_FAULT.with(|f| f.set(op));
}

/// Handle to a node on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    NormalizeRows { x: usize, norms: Vec<f64> },
    Pow(usize, f64),
    Exp(usize),
    Log(usize),
    PRelu { x: usize, slope: usize },
    GatherRows { x: usize, ids: Vec<usize> },
    SegmentSum { x: usize, segments: Vec<usize> },
    SegmentSoftmax { x: usize, offsets: Vec<usize> },
    Sum(usize),
    MeanRows { x: usize, ids: Vec<usize> },
    SpMM { adj: Arc<SparseMatrix>, x: usize },
    ReplaceRows { x: usize, ids: Vec<usize>, row: usize },
    PairDot { x: usize, y: usize, left: Vec<usize>, right: Vec<usize> },
    RowSum(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::Pow(..) => "pow",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::PRelu { .. } => "prelu",
            Op::GatherRows { .. } => "gather_rows",
            Op::SegmentSum { .. } => "segment_sum",
            Op::SegmentSoftmax { .. } => "segment_softmax",
            Op::Sum(..) => "sum",
            Op::MeanRows { .. } => "mean_rows",
            Op::SpMM { .. } => "spmm",
            Op::ReplaceRows { .. } => "replace_rows",
            Op::PairDot { .. } => "pair_dot",
            Op::RowSum(..) => "row_sum",
        }
    }
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed primitives.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn segment_offsets(op: &'static str, segments: &[usize], num_segments: usize) -> Result<Vec<usize>> {
    if segments.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::shape(op, "segment ids must be non-decreasing"));
    }
    if segments.last().is_some_and(|&s| s >= num_segments) {
        return Err(Error::shape(op, "segment id out of range"));
    }
    let mut offsets = vec![0; num_segments + 1];
    for &s in segments {
        offsets[s + 1] += 1;
    }
    for i in 0..num_segments {
        offsets[i + 1] += offsets[i];
    }
    Ok(offsets)
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Autodiff("variable does not belong to this tape".into()));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {}", op.name())));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                self.nodes[*a].requires_grad || self.nodes[*b].requires_grad
            }
            Op::PRelu { x, slope: y }
            | Op::ReplaceRows { x, row: y, .. }
            | Op::PairDot { x, y, .. } => self.nodes[*x].requires_grad || self.nodes[*y].requires_grad,
            Op::Scale(x, _)
            | Op::Pow(x, _)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sum(x)
            | Op::RowSum(x)
            | Op::NormalizeRows { x, .. }
            | Op::GatherRows { x, .. }
            | Op::SegmentSum { x, .. }
            | Op::SegmentSoftmax { x, .. }
            | Op::MeanRows { x, .. }
            | Op::SpMM { x, .. } => self.nodes[*x].requires_grad,
        };
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var { tape: self.id, index })
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var { tape: self.id, index }
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.idx(v).expect("foreign variable")].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[self.idx(v).expect("foreign variable")].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip(&mut self, op: Op, a: usize, b: usize, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(va.rows(), va.cols(), data)?;
        self.push(out, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[a].value.matmul(&self.nodes[b].value)?;
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.zip(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.zip(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.zip(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let a = self.idx(a)?;
        let out = self.nodes[a].value.map(|v| v * c);
        self.push(out, Op::Scale(a, c))
    }

    /// Divides each row by `max(‖row‖, EPS)`.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let x = self.idx(x)?;
        let v = &self.nodes[x].value;
        let mut out = v.clone();
        let mut norms = Vec::with_capacity(v.rows());
        for i in 0..v.rows() {
            let n = v.row(i).iter().map(|a| a * a).sum::<f64>().sqrt().max(EPS);
            for o in out.row_mut(i) {
                *o /= n;
            }
            norms.push(n);
        }
        self.push(out, Op::NormalizeRows { x, norms })
    }

    /// Elementwise power. Non-integer exponents need nonnegative input;
    /// negatives within 1e-12 of zero (rounding residue) are read as zero.
    pub fn pow(&mut self, x: Var, p: f64) -> Result<Var> {
        let x = self.idx(x)?;
        let integral = p.fract() == 0.0;
        let mut data = Vec::with_capacity(self.nodes[x].value.len());
        for &v in self.nodes[x].value.data() {
            let base = if !integral && v < 0.0 {
                if v < -1e-12 {
                    return Err(Error::Domain {
                        op: "pow",
                        detail: format!("{v} raised to non-integer power {p}"),
                    });
                }
                0.0
            } else {
                v
            };
            data.push(base.powf(p));
        }
        let (r, c) = self.nodes[x].value.shape();
        self.push(Tensor::from_vec(r, c, data)?, Op::Pow(x, p))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let x = self.idx(x)?;
        let out = self.nodes[x].value.map(f64::exp);
        self.push(out, Op::Exp(x))
    }

    /// `ln(max(x, EPS))`; negative input is a domain error.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let x = self.idx(x)?;
        let v = &self.nodes[x].value;
        if let Some(bad) = v.data().iter().find(|&&a| a < 0.0 || a.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("log of {bad}"),
            });
        }
        let out = v.map(|a| a.max(EPS).ln());
        self.push(out, Op::Log(x))
    }

    /// Parametric rectifier: `x` where positive, `slope · x` elsewhere.
    /// `slope` is a `1×1` variable.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let (x, s) = (self.idx(x)?, self.idx(slope)?);
        if self.nodes[s].value.shape() != (1, 1) {
            return Err(Error::shape("prelu", "slope must be 1x1"));
        }
        let a = self.nodes[s].value.item();
        let out = self.nodes[x].value.map(|v| if v > 0.0 { v } else { a * v });
        self.push(out, Op::PRelu { x, slope: s })
    }

    pub fn gather_rows(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let x = self.idx(x)?;
        let v = &self.nodes[x].value;
        if ids.iter().any(|&i| i >= v.rows()) {
            return Err(Error::shape("gather_rows", "row index out of range"));
        }
        let out = v.select_rows(ids);
        self.push(out, Op::GatherRows { x, ids: ids.to_vec() })
    }

    /// Sums rows sharing a segment id; ids are sorted, output has
    /// `num_segments` rows (empty segments are zero).
    pub fn segment_sum(&mut self, x: Var, segments: &[usize], num_segments: usize) -> Result<Var> {
        let x = self.idx(x)?;
        let v = &self.nodes[x].value;
        if segments.len() != v.rows() {
            return Err(Error::shape("segment_sum", "one segment id per row required"));
        }
        segment_offsets("segment_sum", segments, num_segments)?;
        let mut out = Tensor::zeros(num_segments, v.cols());
        for (r, &s) in segments.iter().enumerate() {
            for (o, &a) in out.row_mut(s).iter_mut().zip(v.row(r)) {
                *o += a;
            }
        }
        self.push(
            out,
            Op::SegmentSum {
                x,
                segments: segments.to_vec(),
            },
        )
    }

    /// Softmax over the rows of each segment, independently per column.
    pub fn segment_softmax(&mut self, x: Var, segments: &[usize], num_segments: usize) -> Result<Var> {
        let x = self.idx(x)?;
        let v = &self.nodes[x].value;
        if segments.len() != v.rows() {
            return Err(Error::shape("segment_softmax", "one segment id per row required"));
        }
        let offsets = segment_offsets("segment_softmax", segments, num_segments)?;
        let cols = v.cols();
        let mut out = v.clone();
        for w in offsets.windows(2) {
            for c in 0..cols {
                let range = w[0]..w[1];
                if range.is_empty() {
                    continue;
                }
                let max = range.clone().map(|r| v.get(r, c)).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for r in range.clone() {
                    let e = (v.get(r, c) - max).exp();
                    out.set(r, c, e);
                    total += e;
                }
                for r in range {
                    out.set(r, c, out.get(r, c) / total);
                }
            }
        }
        self.push(out, Op::SegmentSoftmax { x, offsets })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let x = self.idx(x).expect("foreign variable");
        let out = Tensor::scalar(self.nodes[x].value.sum());
        self.push(out, Op::Sum(x)).expect("sum of finite values")
    }

    /// Mean of every entry in the selected rows.
    pub fn mean_rows(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let x = self.idx(x)?;
        let v = &self.nodes[x].value;
        if ids.is_empty() || v.cols() == 0 {
            return Err(Error::shape("mean_rows", "empty index set"));
        }
        if ids.iter().any(|&i| i >= v.rows()) {
            return Err(Error::shape("mean_rows", "row index out of range"));
        }
        let total: f64 = ids.iter().map(|&i| v.row(i).iter().sum::<f64>()).sum();
        let out = Tensor::scalar(total / (ids.len() * v.cols()) as f64);
        self.push(out, Op::MeanRows { x, ids: ids.to_vec() })
    }

    pub fn spmm(&mut self, adj: &Arc<SparseMatrix>, x: Var) -> Result<Var> {
        let x = self.idx(x)?;
        let out = adj.matmul(&self.nodes[x].value)?;
        self.push(out, Op::SpMM { adj: Arc::clone(adj), x })
    }

    /// Copy of `x` whose rows at `ids` are replaced by the `1×C` `row`.
    pub fn replace_rows(&mut self, x: Var, ids: &[usize], row: Var) -> Result<Var> {
        let (x, r) = (self.idx(x)?, self.idx(row)?);
        let v = &self.nodes[x].value;
        let rv = &self.nodes[r].value;
        if rv.rows() != 1 || rv.cols() != v.cols() {
            return Err(Error::shape(
                "replace_rows",
                format!("row {:?} for {:?}", rv.shape(), v.shape()),
            ));
        }
        if ids.iter().any(|&i| i >= v.rows()) {
            return Err(Error::shape("replace_rows", "row index out of range"));
        }
        let mut out = v.clone();
        for &i in ids {
            out.row_mut(i).copy_from_slice(rv.row(0));
        }
        self.push(
            out,
            Op::ReplaceRows {
                x,
                ids: ids.to_vec(),
                row: r,
            },
        )
    }

    /// `out[e] = x[left[e]] · y[right[e]]`, an `E×1` column.
    pub fn pair_dot(&mut self, x: Var, y: Var, left: &[usize], right: &[usize]) -> Result<Var> {
        let (x, y) = (self.idx(x)?, self.idx(y)?);
        let (vx, vy) = (&self.nodes[x].value, &self.nodes[y].value);
        if vx.cols() != vy.cols() || left.len() != right.len() {
            return Err(Error::shape("pair_dot", "operand widths or index lengths differ"));
        }
        if left.iter().any(|&i| i >= vx.rows()) || right.iter().any(|&i| i >= vy.rows()) {
            return Err(Error::shape("pair_dot", "row index out of range"));
        }
        let out: Vec<f64> = left
            .iter()
            .zip(right)
            .map(|(&i, &j)| vx.row(i).iter().zip(vy.row(j)).map(|(a, b)| a * b).sum())
            .collect();
        self.push(
            Tensor::column(out),
            Op::PairDot {
                x,
                y,
                left: left.to_vec(),
                right: right.to_vec(),
            },
        )
    }

    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let x = self.idx(x)?;
        let v = &self.nodes[x].value;
        let out = Tensor::column((0..v.rows()).map(|i| v.row(i).iter().sum()).collect());
        self.push(out, Op::RowSum(x))
    }

    /// Accumulates `d loss / d leaf` into every leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.idx(loss)?;
        if self.nodes[root].value.shape() != (1, 1) {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got {:?}",
                self.nodes[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(Tensor::scalar(1.0));
        let fault = ADJOINT_FAULT.with(Cell::get);
        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let mut contributions = self.adjoint(i, &g);
            if fault == Some(self.nodes[i].op.name()) {
                for (_, t) in &mut contributions {
                    *t = t.map(|v| 1.5 * v);
                }
            }
            for (j, t) in contributions {
                if !self.nodes[j].requires_grad {
                    continue;
                }
                match &mut grads[j] {
                    Some(acc) => acc.add_scaled(&t, 1.0),
                    slot => *slot = Some(t),
                }
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.add_scaled(&g, 1.0),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to its inputs given output grad `g`.
    fn adjoint(&self, i: usize, g: &Tensor) -> Vec<(usize, Tensor)> {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let needs = |j: usize| self.nodes[j].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let mut out = Vec::new();
                if needs(*a) {
                    let mut ga = Tensor::zeros(val(*a).rows(), val(*a).cols());
                    gemm(g, false, val(*b), true, &mut ga);
                    out.push((*a, ga));
                }
                if needs(*b) {
                    let mut gb = Tensor::zeros(val(*b).rows(), val(*b).cols());
                    gemm(val(*a), true, g, false, &mut gb);
                    out.push((*b, gb));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => {
                let prod = |t: &Tensor| {
                    let data = t.data().iter().zip(g.data()).map(|(x, y)| x * y).collect();
                    Tensor::from_vec(t.rows(), t.cols(), data).expect("same shape")
                };
                vec![(*a, prod(val(*b))), (*b, prod(val(*a)))]
            }
            Op::Scale(a, c) => vec![(*a, g.map(|v| v * c))],
            Op::NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut gx = g.clone();
                for (r, &n) in norms.iter().enumerate() {
                    let row = gx.row_mut(r);
                    if n > EPS {
                        let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                        for (o, &yv) in row.iter_mut().zip(y.row(r)) {
                            *o = (*o - yv * dot) / n;
                        }
                    } else {
                        for o in row.iter_mut() {
                            *o /= n;
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::Pow(x, p) => {
                let xv = val(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&a, &gv)| {
                        let a = if p.fract() != 0.0 && a < 0.0 { 0.0 } else { a };
                        gv * p * a.powf(p - 1.0)
                    })
                    .collect();
                vec![(*x, Tensor::from_vec(xv.rows(), xv.cols(), data).expect("same shape"))]
            }
            Op::Exp(x) => {
                let data = node.value.data().iter().zip(g.data()).map(|(y, gv)| y * gv).collect();
                vec![(*x, Tensor::from_vec(g.rows(), g.cols(), data).expect("same shape"))]
            }
            Op::Log(x) => {
                let data = val(*x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&a, &gv)| if a >= EPS { gv / a } else { 0.0 })
                    .collect();
                vec![(*x, Tensor::from_vec(g.rows(), g.cols(), data).expect("same shape"))]
            }
            Op::PRelu { x, slope } => {
                let a = val(*slope).item();
                let xv = val(*x);
                let mut gs = 0.0;
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| {
                        if v > 0.0 {
                            gv
                        } else {
                            gs += v * gv;
                            a * gv
                        }
                    })
                    .collect();
                vec![
                    (*x, Tensor::from_vec(xv.rows(), xv.cols(), data).expect("same shape")),
                    (*slope, Tensor::scalar(gs)),
                ]
            }
            Op::GatherRows { x, ids } => {
                let mut gx = Tensor::zeros(val(*x).rows(), val(*x).cols());
                for (r, &i) in ids.iter().enumerate() {
                    for (o, &v) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                vec![(*x, gx)]
            }
            Op::SegmentSum { x, segments } => {
                let mut gx = Tensor::zeros(val(*x).rows(), val(*x).cols());
                for (r, &s) in segments.iter().enumerate() {
                    gx.row_mut(r).copy_from_slice(g.row(s));
                }
                vec![(*x, gx)]
            }
            Op::SegmentSoftmax { x, offsets } => {
                let y = &node.value;
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for w in offsets.windows(2) {
                    for c in 0..y.cols() {
                        let dot: f64 = (w[0]..w[1]).map(|r| y.get(r, c) * g.get(r, c)).sum();
                        for r in w[0]..w[1] {
                            gx.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::Sum(x) => {
                let (r, c) = val(*x).shape();
                vec![(*x, Tensor::filled(r, c, g.item()))]
            }
            Op::MeanRows { x, ids } => {
                let (r, c) = val(*x).shape();
                let share = g.item() / (ids.len() * c) as f64;
                let mut gx = Tensor::zeros(r, c);
                for &i in ids {
                    for o in gx.row_mut(i) {
                        *o += share;
                    }
                }
                vec![(*x, gx)]
            }
            Op::SpMM { adj, x } => {
                let mut gx = Tensor::zeros(val(*x).rows(), val(*x).cols());
                adj.transpose_matmul_into(g, &mut gx);
                vec![(*x, gx)]
            }
            Op::ReplaceRows { x, ids, row } => {
                let mut gx = g.clone();
                let mut gr = Tensor::zeros(1, g.cols());
                for &i in ids {
                    gr.add_scaled(&Tensor::from_vec(1, g.cols(), g.row(i).to_vec()).expect("row"), 1.0);
                    gx.row_mut(i).fill(0.0);
                }
                vec![(*x, gx), (*row, gr)]
            }
            Op::PairDot { x, y, left, right } => {
                let (vx, vy) = (val(*x), val(*y));
                let mut out = Vec::new();
                if needs(*x) {
                    let mut gx = Tensor::zeros(vx.rows(), vx.cols());
                    for (e, (&i, &j)) in left.iter().zip(right).enumerate() {
                        let ge = g.get(e, 0);
                        for (o, &b) in gx.row_mut(i).iter_mut().zip(vy.row(j)) {
                            *o += ge * b;
                        }
                    }
                    out.push((*x, gx));
                }
                if needs(*y) {
                    let mut gy = Tensor::zeros(vy.rows(), vy.cols());
                    for (e, (&i, &j)) in left.iter().zip(right).enumerate() {
                        let ge = g.get(e, 0);
                        for (o, &a) in gy.row_mut(j).iter_mut().zip(vx.row(i)) {
                            *o += ge * a;
                        }
                    }
                    out.push((*y, gy));
                }
                out
            }
            Op::RowSum(x) => {
                let (r, c) = val(*x).shape();
                let mut gx = Tensor::zeros(r, c);
                for i in 0..r {
                    gx.row_mut(i).fill(g.get(i, 0));
                }
                vec![(*x, gx)]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::from_vec(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_grad_is_ones() {
        let mut tape = Tape::new();
        let w = tape.param(t(2, 2, &[1.0, -2.0, 3.0, 0.5]));
        let s = tape.sum(w);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &Tensor::filled(2, 2, 1.0));
    }

    #[test]
    fn bilinear_grad_is_other_factor() {
        let mut tape = Tape::new();
        let a = tape.param(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b_val = t(2, 2, &[0.5, -1.0, 2.0, 7.0]);
        let b = tape.constant(b_val.clone());
        let p = tape.mul(a, b).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &b_val);
        assert!(tape.grad(b).is_none());
    }

    #[test]
    fn segment_softmax_values() {
        let mut tape = Tape::new();
        let single = tape.constant(t(1, 1, &[4.2]));
        let y = tape.segment_softmax(single, &[0], 1).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0]);

        let x = tape.constant(t(2, 1, &[0.0, 2f64.ln()]));
        let y = tape.segment_softmax(x, &[0, 0], 1).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] - 1.0 / 3.0).abs() < 1e-15 && (v[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn segment_softmax_sums_to_one_per_segment() {
        let mut tape = Tape::new();
        let x = tape.constant(t(6, 1, &[0.3, -1.0, 5.0, 2.0, 2.0, -7.0]));
        let segs = [0, 0, 0, 2, 2, 3];
        let y = tape.segment_softmax(x, &segs, 4).unwrap();
        let s = tape.segment_sum(y, &segs, 4).unwrap();
        let sums = tape.value(s).data();
        assert!(sums[1] == 0.0);
        for k in [0, 2, 3] {
            assert!((sums[k] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unsorted_segments_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(3, 1));
        assert!(tape.segment_sum(x, &[1, 0, 1], 2).is_err());
        assert!(tape.segment_softmax(x, &[0, 0, 2], 2).is_err());
    }

    #[test]
    fn errors() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::zeros(2, 3));
        let b = tape.param(Tensor::zeros(2, 3));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
        assert!(tape.backward(a).is_err(), "non-scalar");
        let neg = tape.constant(t(1, 1, &[-1.0]));
        assert!(matches!(tape.log(neg), Err(Error::Domain { .. })));
        let mut other = Tape::new();
        let foreign = other.param(Tensor::scalar(1.0));
        assert!(tape.backward(foreign).is_err());
        let big = tape.constant(t(1, 1, &[1000.0]));
        assert!(matches!(tape.exp(big), Err(Error::NonFinite(_))));
    }

    #[test]
    fn log_and_normalize_guard_zero() {
        let mut tape = Tape::new();
        let z = tape.param(Tensor::zeros(2, 3));
        let n = tape.normalize_rows(z).unwrap();
        assert_eq!(tape.value(n), &Tensor::zeros(2, 3));
        let zero = tape.constant(Tensor::scalar(0.0));
        let l = tape.log(zero).unwrap();
        assert_eq!(tape.value(l).item(), EPS.ln());
    }

    #[test]
    fn backward_is_repeatable() {
        let run = |tape: &mut Tape| {
            let w = tape.param(t(2, 2, &[0.1, 0.2, -0.3, 0.4]));
            let x = tape.constant(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
            let y = tape.matmul(x, w).unwrap();
            let y = tape.exp(y).unwrap();
            let s = tape.sum(y);
            (w, s)
        };
        let mut tape = Tape::new();
        let (w, s) = run(&mut tape);
        tape.backward(s).unwrap();
        let first = tape.grad(w).unwrap().clone();
        tape.zero_grad();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &first);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &first.map(|v| 2.0 * v));
    }

    #[test]
    fn replace_rows_routes_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let r = tape.param(t(1, 2, &[9.0, 8.0]));
        let y = tape.replace_rows(x, &[0, 2], r).unwrap();
        assert_eq!(tape.value(y).data(), &[9.0, 8.0, 3.0, 4.0, 9.0, 8.0]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(tape.grad(r).unwrap().data(), &[2.0, 2.0]);
    }
}
