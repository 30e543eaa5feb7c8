//! Tensor-level reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its output value to an
//! append-only [`Tape`]. [`Tape::backward`] walks the tape once in reverse
//! and accumulates adjoints into every node that depends on a
//! differentiable leaf. Values are `f64` matrices; vectors are `1 x n` rows
//! and scalars are `1 x 1`.
//!
//! Operations that are awkward to express as primitive chains (losses,
//! Chamfer distance, neighborhood attention) implement [`FusedOp`] and carry
//! a hand-written adjoint.

use std::any::Any;
use std::fmt;
use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub type Cache = Box<dyn Any>;

/// An operation with a hand-written adjoint.
pub trait FusedOp {
    fn name(&self) -> &'static str;

    /// Output value plus whatever the adjoint needs.
    fn forward(&self, inputs: &[&Mat]) -> (Mat, Option<Cache>);

    /// Adjoints of every input given the output adjoint `grad`.
    fn backward(
        &self,
        inputs: &[&Mat],
        output: &Mat,
        cache: Option<&Cache>,
        grad: &Mat,
    ) -> Vec<Option<Mat>>;
}

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `n x m` plus a broadcast `1 x m` row.
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    /// Column-wise maximum over rows, `n x m -> 1 x m`.
    MaxRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Rc<[usize]>),
    /// Each row repeated `r` times consecutively.
    RepeatRows(Var, usize),
    /// `1 x m -> n x m`.
    BroadcastRows(Var, usize),
    /// Row-major reshape.
    Reshape(Var, usize, usize),
    Fused(Rc<dyn FusedOp>, Vec<Var>),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::AddRow(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MaxRows(a)
            | Op::SliceCols(a, _, _)
            | Op::GatherRows(a, _)
            | Op::RepeatRows(a, _)
            | Op::BroadcastRows(a, _)
            | Op::Reshape(a, _, _) => vec![*a],
            Op::ConcatCols(v) | Op::Fused(_, v) => v.clone(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MaxRows(_) => "max_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::RepeatRows(..) => "repeat_rows",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::Reshape(..) => "reshape",
            Op::Fused(f, _) => f.name(),
        }
    }
}

struct Node {
    op: Op,
    value: Mat,
    cache: Option<Cache>,
    requires_grad: bool,
}

/// Append-only record of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
    visited: usize,
}

impl Gradients {
    /// `None` when the node does not influence the loss or is not differentiable.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with zeros substituted for absent adjoints.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(shape))
    }

    /// Number of nodes whose adjoint was propagated.
    pub fn visited(&self) -> usize {
        self.visited
    }
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

    /// A leaf; `requires_grad` marks it differentiable.
    pub fn leaf(&mut self, value: Mat, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            cache: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar_constant(&mut self, v: f64) -> Var {
        self.constant(Mat::from_elem((1, 1), v))
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let (value, cache) = {
            let vals: Vec<&Mat> = op.inputs().iter().map(|v| &self.nodes[v.0].value).collect();
            eval(&op, &vals)
        };
        self.nodes.push(Node {
            op,
            value,
            cache,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).ncols(), self.value(b).nrows(), "matmul shape");
        self.push(Op::MatMul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a row vector");
        assert_eq!(self.value(a).ncols(), self.value(row).ncols(), "add_row shape");
        self.push(Op::AddRow(a, row))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape");
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub shape");
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul shape");
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.push(Op::Scale(a, k))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.push(Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.push(Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.push(Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.push(Op::Softplus(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.push(Op::Mean(a))
    }

    pub fn max_rows(&mut self, a: Var) -> Var {
        assert!(self.value(a).nrows() > 0, "max over zero rows");
        self.push(Op::MaxRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).nrows();
        assert!(parts.iter().all(|&p| self.value(p).nrows() == rows), "concat rows");
        self.push(Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        assert!(start < end && end <= self.value(a).ncols(), "slice bounds");
        self.push(Op::SliceCols(a, start, end))
    }

    pub fn gather_rows(&mut self, a: Var, rows: impl Into<Rc<[usize]>>) -> Var {
        let rows = rows.into();
        let n = self.value(a).nrows();
        assert!(rows.iter().all(|&r| r < n), "gather index");
        self.push(Op::GatherRows(a, rows))
    }

    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        self.push(Op::RepeatRows(a, times))
    }

    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        assert_eq!(self.value(a).nrows(), 1, "broadcast expects a row vector");
        self.push(Op::BroadcastRows(a, rows))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(self.value(a).len(), rows * cols, "reshape size");
        self.push(Op::Reshape(a, rows, cols))
    }

    pub fn fused(&mut self, op: Rc<dyn FusedOp>, inputs: &[Var]) -> Var {
        self.push(Op::Fused(op, inputs.to_vec()))
    }

    /// Dense layer `x W + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    /// Recomputes every node from the recorded leaves in tape order.
    pub fn replay(&self) -> Vec<Mat> {
        let mut values: Vec<Mat> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf => node.value.clone(),
                op => {
                    let ins: Vec<&Mat> = op.inputs().iter().map(|v| &values[v.0]).collect();
                    eval(op, &ins).0
                }
            };
            values.push(v);
        }
        values
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let out = &self.nodes[loss.0];
        if out.value.dim() != (1, 1) {
            return Err(Error::Graph(format!(
                "loss must be scalar, got shape {:?}",
                out.value.dim()
            )));
        }
        if !out.requires_grad {
            return Err(Error::Graph(
                "loss is detached from every differentiable leaf".into(),
            ));
        }
        let mut grads: Vec<Option<Mat>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones((1, 1)));
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            visited += 1;
            let inputs = node.op.inputs();
            let in_vals: Vec<&Mat> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let in_grads = adjoint(&node.op, &in_vals, &node.value, node.cache.as_ref(), &g);
            for (v, ig) in inputs.iter().zip(in_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(ig.dim(), self.nodes[v.0].value.dim(), "{}", node.op.name());
                match &mut grads[v.0] {
                    Some(acc) => *acc += &ig,
                    slot => *slot = Some(ig),
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads, visited })
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn eval(op: &Op, v: &[&Mat]) -> (Mat, Option<Cache>) {
    let value = match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::MatMul(..) => v[0].dot(v[1]),
        Op::AddRow(..) => v[0] + &v[1].row(0),
        Op::Add(..) => v[0] + v[1],
        Op::Sub(..) => v[0] - v[1],
        Op::Mul(..) => v[0] * v[1],
        Op::Scale(_, k) => v[0] * *k,
        Op::Relu(_) => v[0].mapv(|x| x.max(0.0)),
        Op::Tanh(_) => v[0].mapv(f64::tanh),
        Op::Sigmoid(_) => v[0].mapv(sigmoid),
        Op::Softplus(_) => v[0].mapv(softplus),
        Op::Sum(_) => Mat::from_elem((1, 1), v[0].sum()),
        Op::Mean(_) => Mat::from_elem((1, 1), v[0].sum() / v[0].len().max(1) as f64),
        Op::MaxRows(_) => {
            let a = v[0];
            let mut arg = vec![0usize; a.ncols()];
            let mut out = Mat::zeros((1, a.ncols()));
            for c in 0..a.ncols() {
                let mut best = a[[0, c]];
                for r in 1..a.nrows() {
                    if a[[r, c]] > best {
                        best = a[[r, c]];
                        arg[c] = r;
                    }
                }
                out[[0, c]] = best;
            }
            return (out, Some(Box::new(arg)));
        }
        Op::ConcatCols(_) => {
            let views: Vec<_> = v.iter().map(|m| m.view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("concat shapes checked")
        }
        Op::SliceCols(_, a, b) => v[0].slice(s![.., *a..*b]).to_owned(),
        Op::GatherRows(_, idx) => v[0].select(Axis(0), idx),
        Op::RepeatRows(_, r) => {
            let a = v[0];
            let mut out = Mat::zeros((a.nrows() * r, a.ncols()));
            for (i, row) in a.rows().into_iter().enumerate() {
                for k in 0..*r {
                    out.row_mut(i * r + k).assign(&row);
                }
            }
            out
        }
        Op::BroadcastRows(_, n) => {
            let a = v[0];
            a.broadcast((*n, a.ncols())).unwrap().to_owned()
        }
        Op::Reshape(_, r, c) => {
            let flat: Vec<f64> = v[0].iter().copied().collect();
            Mat::from_shape_vec((*r, *c), flat).unwrap()
        }
        Op::Fused(f, _) => return f.forward(v),
    };
    (value, None)
}

fn adjoint(op: &Op, v: &[&Mat], out: &Mat, cache: Option<&Cache>, g: &Mat) -> Vec<Option<Mat>> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(..) => vec![Some(g.dot(&v[1].t())), Some(v[0].t().dot(g))],
        Op::AddRow(..) => vec![Some(g.clone()), Some(g.sum_axis(Axis(0)).insert_axis(Axis(0)))],
        Op::Add(..) => vec![Some(g.clone()), Some(g.clone())],
        Op::Sub(..) => vec![Some(g.clone()), Some(-g)],
        Op::Mul(..) => vec![Some(g * v[1]), Some(g * v[0])],
        Op::Scale(_, k) => vec![Some(g * *k)],
        Op::Relu(_) => {
            let mut d = g.clone();
            Zip::from(&mut d).and(v[0]).for_each(|d, &x| {
                if x <= 0.0 {
                    *d = 0.0
                }
            });
            vec![Some(d)]
        }
        Op::Tanh(_) => {
            let mut d = g.clone();
            Zip::from(&mut d).and(out).for_each(|d, &y| *d *= 1.0 - y * y);
            vec![Some(d)]
        }
        Op::Sigmoid(_) => {
            let mut d = g.clone();
            Zip::from(&mut d).and(out).for_each(|d, &y| *d *= y * (1.0 - y));
            vec![Some(d)]
        }
        Op::Softplus(_) => {
            let mut d = g.clone();
            Zip::from(&mut d).and(v[0]).for_each(|d, &x| *d *= sigmoid(x));
            vec![Some(d)]
        }
        Op::Sum(_) => vec![Some(Mat::from_elem(v[0].dim(), g[[0, 0]]))],
        Op::Mean(_) => vec![Some(Mat::from_elem(
            v[0].dim(),
            g[[0, 0]] / v[0].len().max(1) as f64,
        ))],
        Op::MaxRows(_) => {
            let arg = cache
                .and_then(|c| c.downcast_ref::<Vec<usize>>())
                .expect("max_rows cache");
            let mut d = Mat::zeros(v[0].dim());
            for (c, &r) in arg.iter().enumerate() {
                d[[r, c]] = g[[0, c]];
            }
            vec![Some(d)]
        }
        Op::ConcatCols(_) => {
            let mut start = 0;
            v.iter()
                .map(|m| {
                    let part = g.slice(s![.., start..start + m.ncols()]).to_owned();
                    start += m.ncols();
                    Some(part)
                })
                .collect()
        }
        Op::SliceCols(_, a, b) => {
            let mut d = Mat::zeros(v[0].dim());
            d.slice_mut(s![.., *a..*b]).assign(g);
            vec![Some(d)]
        }
        Op::GatherRows(_, idx) => {
            let mut d = Mat::zeros(v[0].dim());
            for (i, &r) in idx.iter().enumerate() {
                let mut row = d.row_mut(r);
                row += &g.row(i);
            }
            vec![Some(d)]
        }
        Op::RepeatRows(_, r) => {
            let mut d = Mat::zeros(v[0].dim());
            for i in 0..v[0].nrows() {
                let mut row = d.row_mut(i);
                for k in 0..*r {
                    row += &g.row(i * r + k);
                }
            }
            vec![Some(d)]
        }
        Op::BroadcastRows(..) => vec![Some(g.sum_axis(Axis(0)).insert_axis(Axis(0)))],
        Op::Reshape(..) => {
            let flat: Vec<f64> = g.iter().copied().collect();
            vec![Some(Mat::from_shape_vec(v[0].dim(), flat).unwrap())]
        }
        Op::Fused(f, _) => f.backward(v, out, cache, g),
    }
}
