//! Tape-based reverse-mode differentiation over [`Array`] values.
//!
//! Every primitive evaluates eagerly and appends a node to the tape. Nodes
//! are created in evaluation order, so the tape is topologically sorted by
//! construction and the backward pass is a single reverse sweep.
//!
//! Data-dependent discrete choices (neighbor lists, sample indices, relu
//! masks, max-pool winners, signs) go through [`Tape::select`]. A tape in
//! recording mode keeps every choice; a replaying tape hands the recorded
//! choices back in order instead of recomputing them, which is what the
//! finite-difference harness needs to differentiate a piecewise function
//! on a single piece.

use std::any::Any;
use std::cell::RefCell;
use std::rc::Rc;

use super::array::{gemm, Array};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Discrete choices captured by a recording tape.
#[derive(Clone, Default)]
pub struct Selections {
    items: Vec<Rc<dyn Any>>,
}

impl Selections {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

enum Mode {
    Live,
    Record(Vec<Rc<dyn Any>>),
    Replay { items: Vec<Rc<dyn Any>>, cursor: usize },
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, transpose_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias { x: Var, bias: Var },
    ScaleRows { x: Var, s: Var },
    Affine { x: Var, scale: f64 },
    Relu { x: Var, mask: Rc<Vec<bool>> },
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Sqrt(Var),
    Square(Var),
    Abs { x: Var, sign: Rc<Vec<f64>> },
    Concat { parts: Vec<Var>, widths: Vec<usize> },
    Gather { x: Var, index: Rc<Vec<usize>> },
    ScatterAdd { x: Var, index: Rc<Vec<usize>> },
    Pick { x: Var, flat: Rc<Vec<usize>> },
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Reshape(Var),
    Transpose(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::ScaleRows { x, s } => vec![*x, *s],
            Op::Affine { x, .. }
            | Op::Relu { x, .. }
            | Op::Abs { x, .. }
            | Op::Gather { x, .. }
            | Op::ScatterAdd { x, .. }
            | Op::Pick { x, .. } => vec![*x],
            Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Exp(x)
            | Op::Sqrt(x)
            | Op::Square(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::RowSum(x)
            | Op::Reshape(x)
            | Op::Transpose(x) => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
        }
    }
}

struct Node {
    value: Rc<Array>,
    op: Op,
    needs_grad: bool,
}

/// Recording of primitive evaluations, differentiable in reverse mode.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    mode: RefCell<Mode>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that computes discrete choices on the fly and keeps none.
    pub fn new() -> Self {
        Self::with_mode(Mode::Live)
    }

    /// A tape that keeps every discrete choice for later replay.
    pub fn recording() -> Self {
        Self::with_mode(Mode::Record(Vec::new()))
    }

    /// A tape that replays previously recorded discrete choices.
    pub fn replaying(selections: &Selections) -> Self {
        Self::with_mode(Mode::Replay {
            items: selections.items.clone(),
            cursor: 0,
        })
    }

    fn with_mode(mode: Mode) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            mode: RefCell::new(mode),
        }
    }

    /// Choices recorded so far (empty unless the tape is recording).
    pub fn selections(&self) -> Selections {
        match &*self.mode.borrow() {
            Mode::Record(items) => Selections {
                items: items.clone(),
            },
            _ => Selections::default(),
        }
    }

    /// Route a discrete, data-dependent choice through the tape.
    pub fn select<T: Clone + 'static>(&self, compute: impl FnOnce() -> T) -> Result<T> {
        let mut mode = self.mode.borrow_mut();
        match &mut *mode {
            Mode::Live => Ok(compute()),
            Mode::Record(items) => {
                let value = compute();
                items.push(Rc::new(value.clone()));
                Ok(value)
            }
            Mode::Replay { items, cursor } => {
                let item = items.get(*cursor).ok_or_else(|| {
                    Error::SelectionReplay(format!("only {} selections were recorded", items.len()))
                })?;
                *cursor += 1;
                item.downcast_ref::<T>().cloned().ok_or_else(|| {
                    Error::SelectionReplay(format!(
                        "selection {} has a different type than recorded",
                        *cursor - 1
                    ))
                })
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn value(&self, v: Var) -> Rc<Array> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    fn push(&self, value: Array, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = match &op {
            Op::Leaf => false,
            other => other.inputs().iter().any(|i| nodes[i.0].needs_grad),
        };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Array) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(nodes.len() - 1)
    }

    /// An input that never receives a gradient.
    pub fn constant(&self, value: Array) -> Var {
        self.push(value, Op::Leaf)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(Rc<Array>, Rc<Array>)> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        Ok((va, vb))
    }

    fn matrix_dims(&self, op: &'static str, v: &Array) -> Result<(usize, usize)> {
        if v.rank() != 2 {
            return Err(Error::shape(op, format!("expected a 2-D array, got {:?}", v.shape())));
        }
        Ok((v.shape()[0], v.shape()[1]))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T`.
    pub fn matmul_transposed(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (ar, ac) = self.matrix_dims("matmul", &va)?;
        let (br, bc) = self.matrix_dims("matmul", &vb)?;
        let inner = if transpose_b { bc } else { br };
        if ac != inner {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}{}", va.shape(), vb.shape(), if transpose_b { "^T" } else { "" }),
            ));
        }
        let (c, m, n) = gemm(va.data(), ar, ac, false, vb.data(), br, bc, transpose_b);
        Ok(self.push(Array::new(vec![m, n], c)?, Op::MatMul { a, b, transpose_b }))
    }

    fn zip_values(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Array> {
        let (va, vb) = self.same_shape(op, a, b)?;
        Array::new(
            va.shape().to_vec(),
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_values("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_values("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_values("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_values("div", a, b, |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b)))
    }

    /// Adds a length-`d` bias to every row of an `n x d` array.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let d = vx.cols();
        if vb.len() != d {
            return Err(Error::shape("add_bias", format!("{:?} + bias {:?}", vx.shape(), vb.shape())));
        }
        let mut out = (*vx).clone();
        for row in out.data_mut().chunks_exact_mut(d.max(1)) {
            for (o, b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddBias { x, bias }))
    }

    /// Multiplies row `r` of an `n x d` array by `s[r]`, with `s` of shape `n x 1`.
    pub fn scale_rows(&self, x: Var, s: Var) -> Result<Var> {
        let (vx, vs) = (self.value(x), self.value(s));
        let n = vx.rows();
        if vs.len() != n || vx.rank() != 2 {
            return Err(Error::shape("scale_rows", format!("{:?} by {:?}", vx.shape(), vs.shape())));
        }
        let d = vx.cols();
        let mut out = (*vx).clone();
        if d > 0 {
            for (row, &f) in out.data_mut().chunks_exact_mut(d).zip(vs.data()) {
                for o in row {
                    *o *= f;
                }
            }
        }
        Ok(self.push(out, Op::ScaleRows { x, s }))
    }

    /// `scale * x + shift`.
    pub fn affine(&self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let v = self.value(x).map(|t| scale * t + shift);
        Ok(self.push(v, Op::Affine { x, scale }))
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let mask = self.select(|| vx.data().iter().map(|&t| t > 0.0).collect::<Vec<bool>>())?;
        if mask.len() != vx.len() {
            return Err(Error::SelectionReplay("relu mask length changed".into()));
        }
        let out = Array::new(
            vx.shape().to_vec(),
            vx.data().iter().zip(&mask).map(|(&t, &m)| if m { t } else { 0.0 }).collect(),
        )?;
        Ok(self.push(out, Op::Relu { x, mask: Rc::new(mask) }))
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|t| 1.0 / (1.0 + (-t).exp()));
        Ok(self.push(v, Op::Sigmoid(x)))
    }

    pub fn tanh(&self, x: Var) -> Result<Var> {
        let v = self.value(x).map(f64::tanh);
        Ok(self.push(v, Op::Tanh(x)))
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        let v = self.value(x).map(f64::exp);
        Ok(self.push(v, Op::Exp(x)))
    }

    pub fn sqrt(&self, x: Var) -> Result<Var> {
        let v = self.value(x).map(f64::sqrt);
        Ok(self.push(v, Op::Sqrt(x)))
    }

    pub fn square(&self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|t| t * t);
        Ok(self.push(v, Op::Square(x)))
    }

    pub fn abs(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let sign = self.select(|| vx.data().iter().map(|&t| sign_of(t)).collect::<Vec<f64>>())?;
        if sign.len() != vx.len() {
            return Err(Error::SelectionReplay("abs sign length changed".into()));
        }
        let out = Array::new(
            vx.shape().to_vec(),
            vx.data().iter().zip(&sign).map(|(&t, &s)| t * s).collect(),
        )?;
        Ok(self.push(out, Op::Abs { x, sign: Rc::new(sign) }))
    }

    /// Column-wise concatenation of 2-D arrays with equal row counts.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Rc<Array>> = parts.iter().map(|&p| self.value(p)).collect();
        let first = values
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let rows = first.rows();
        for v in &values {
            if v.rank() != 2 || v.rows() != rows {
                return Err(Error::shape(
                    "concat",
                    format!(
                        "row counts differ: {:?}",
                        values.iter().map(|v| v.shape().to_vec()).collect::<Vec<_>>()
                    ),
                ));
            }
        }
        let widths: Vec<usize> = values.iter().map(|v| v.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                out.extend_from_slice(v.row(r));
            }
        }
        Ok(self.push(
            Array::new(vec![rows, total], out)?,
            Op::Concat {
                parts: parts.to_vec(),
                widths,
            },
        ))
    }

    /// Rows of `x` at `index`, in index order.
    pub fn gather(&self, x: Var, index: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let n = vx.rows();
        if vx.rank() != 2 {
            return Err(Error::shape("gather", format!("expected 2-D input, got {:?}", vx.shape())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather", format!("index {bad} out of range for {n} rows")));
        }
        let d = vx.cols();
        let mut out = Vec::with_capacity(index.len() * d);
        for &i in index {
            out.extend_from_slice(vx.row(i));
        }
        Ok(self.push(
            Array::new(vec![index.len(), d], out)?,
            Op::Gather {
                x,
                index: Rc::new(index.to_vec()),
            },
        ))
    }

    /// Sums row `i` of `x` into output row `index[i]`; output has `rows` rows.
    pub fn scatter_add(&self, x: Var, index: &[usize], rows: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 2 || vx.rows() != index.len() {
            return Err(Error::shape(
                "scatter_add",
                format!("{:?} with {} indices", vx.shape(), index.len()),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("scatter_add", format!("index {bad} out of range for {rows} rows")));
        }
        let d = vx.cols();
        let mut out = vec![0.0; rows * d];
        for (r, &target) in index.iter().enumerate() {
            for (o, v) in out[target * d..(target + 1) * d].iter_mut().zip(vx.row(r)) {
                *o += v;
            }
        }
        Ok(self.push(
            Array::new(vec![rows, d], out)?,
            Op::ScatterAdd {
                x,
                index: Rc::new(index.to_vec()),
            },
        ))
    }

    /// Column-wise max over consecutive groups of `group` rows:
    /// `(m * group) x d -> m x d`. The winning rows are a recorded selection.
    pub fn max_reduce_groups(&self, x: Var, group: usize) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 2 || group == 0 || vx.rows() % group != 0 {
            return Err(Error::shape(
                "max_reduce",
                format!("{:?} in groups of {group}", vx.shape()),
            ));
        }
        let d = vx.cols();
        let m = vx.rows() / group;
        let flat = self.select(|| {
            let mut flat = Vec::with_capacity(m * d);
            for g in 0..m {
                for c in 0..d {
                    let mut best = g * group * d + c;
                    for r in 1..group {
                        let at = (g * group + r) * d + c;
                        if vx.data()[at] > vx.data()[best] {
                            best = at;
                        }
                    }
                    flat.push(best);
                }
            }
            flat
        })?;
        if flat.len() != m * d {
            return Err(Error::SelectionReplay("max-pool winners changed shape".into()));
        }
        let out: Vec<f64> = flat.iter().map(|&i| vx.data()[i]).collect();
        Ok(self.push(
            Array::new(vec![m, d], out)?,
            Op::Pick {
                x,
                flat: Rc::new(flat),
            },
        ))
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        Ok(self.push(Array::scalar(s), Op::Sum(x)))
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.is_empty() {
            return Err(Error::shape("mean", "empty input"));
        }
        let s = vx.data().iter().sum::<f64>() / vx.len() as f64;
        Ok(self.push(Array::scalar(s), Op::Mean(x)))
    }

    /// `n x d -> n x 1`.
    pub fn row_sum(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.rank() != 2 {
            return Err(Error::shape("row_sum", format!("expected 2-D input, got {:?}", vx.shape())));
        }
        let out: Vec<f64> = (0..vx.rows()).map(|r| vx.row(r).iter().sum()).collect();
        Ok(self.push(Array::column(out), Op::RowSum(x)))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = (*self.value(x)).clone().reshaped(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let (r, c) = self.matrix_dims("transpose", &vx)?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = vx.data()[i * c + j];
            }
        }
        Ok(self.push(Array::new(vec![c, r], out)?, Op::Transpose(x)))
    }

    /// Reverse-mode gradients of a scalar `output` with respect to `inputs`.
    /// Inputs the output does not depend on get zero gradients.
    pub fn gradient(&self, output: Var, inputs: &[Var]) -> Result<Vec<Array>> {
        let nodes = self.nodes.borrow();
        let out_value = &nodes[output.0].value;
        if !out_value.is_scalar() {
            return Err(Error::NonScalarOutput(out_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Array>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(Array::filled(out_value.shape(), 1.0));
        let mut wanted = vec![false; output.0 + 1];
        for v in inputs {
            if v.0 <= output.0 {
                wanted[v.0] = true;
            }
        }
        for id in (0..=output.0).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let g = match if wanted[id] { grads[id].clone() } else { grads[id].take() } {
                Some(g) => g,
                None => continue,
            };
            backward(&nodes, &node.op, &node.value, &g, &mut grads);
        }
        Ok(inputs
            .iter()
            .map(|v| {
                grads
                    .get(v.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Array::zeros(nodes[v.0].value.shape()))
            })
            .collect())
    }
}

fn sign_of(t: f64) -> f64 {
    if t > 0.0 {
        1.0
    } else if t < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Array>], v: Var, delta: Array) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(g) => g.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

fn with_shape(like: &Array, data: Vec<f64>) -> Array {
    Array::new(like.shape().to_vec(), data).expect("gradient matches value shape")
}

fn backward(nodes: &[Node], op: &Op, out: &Array, g: &Array, grads: &mut [Option<Array>]) {
    let val = |v: &Var| Rc::clone(&nodes[v.0].value);
    let needs = |v: &Var| nodes[v.0].needs_grad;
    match op {
        Op::Leaf => {}
        Op::MatMul { a, b, transpose_b } => {
            let (va, vb) = (val(a), val(b));
            let (ar, ac) = (va.shape()[0], va.shape()[1]);
            let (br, bc) = (vb.shape()[0], vb.shape()[1]);
            let (gr, gc) = (g.shape()[0], g.shape()[1]);
            if needs(a) {
                // dA = dC * op(B)^T
                let (d, m, n) = gemm(g.data(), gr, gc, false, vb.data(), br, bc, !transpose_b);
                accumulate(nodes, grads, *a, Array::new(vec![m, n], d).unwrap());
            }
            if needs(b) {
                let (d, m, n) = if *transpose_b {
                    // C = A B^T  =>  dB = dC^T A
                    gemm(g.data(), gr, gc, true, va.data(), ar, ac, false)
                } else {
                    gemm(va.data(), ar, ac, true, g.data(), gr, gc, false)
                };
                accumulate(nodes, grads, *b, Array::new(vec![m, n], d).unwrap());
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            if needs(b) {
                accumulate(nodes, grads, *b, g.map(|t| -t));
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(a), val(b));
            if needs(a) {
                let d = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                accumulate(nodes, grads, *a, with_shape(g, d));
            }
            if needs(b) {
                let d = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                accumulate(nodes, grads, *b, with_shape(g, d));
            }
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(a), val(b));
            if needs(a) {
                let d = g.data().iter().zip(vb.data()).map(|(x, y)| x / y).collect();
                accumulate(nodes, grads, *a, with_shape(g, d));
            }
            if needs(b) {
                let d = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .zip(vb.data())
                    .map(|((gv, x), y)| -gv * x / (y * y))
                    .collect();
                accumulate(nodes, grads, *b, with_shape(g, d));
            }
        }
        Op::AddBias { x, bias } => {
            accumulate(nodes, grads, *x, g.clone());
            if needs(bias) {
                let vb = val(bias);
                let d = vb.len();
                let mut acc = vec![0.0; d];
                if d > 0 {
                    for row in g.data().chunks_exact(d) {
                        for (a, v) in acc.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                }
                accumulate(nodes, grads, *bias, with_shape(&vb, acc));
            }
        }
        Op::ScaleRows { x, s } => {
            let (vx, vs) = (val(x), val(s));
            let d = vx.cols();
            if needs(x) {
                let mut gx = g.clone();
                if d > 0 {
                    for (row, &f) in gx.data_mut().chunks_exact_mut(d).zip(vs.data()) {
                        for o in row {
                            *o *= f;
                        }
                    }
                }
                accumulate(nodes, grads, *x, gx);
            }
            if needs(s) {
                let gs: Vec<f64> = (0..vx.rows())
                    .map(|r| vx.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum())
                    .collect();
                accumulate(nodes, grads, *s, with_shape(&vs, gs));
            }
        }
        Op::Affine { x, scale } => accumulate(nodes, grads, *x, g.map(|t| t * scale)),
        Op::Relu { x, mask } => {
            let d = g.data().iter().zip(mask.iter()).map(|(&t, &m)| if m { t } else { 0.0 }).collect();
            accumulate(nodes, grads, *x, with_shape(g, d));
        }
        Op::Sigmoid(x) => {
            let d = g.data().iter().zip(out.data()).map(|(t, y)| t * y * (1.0 - y)).collect();
            accumulate(nodes, grads, *x, with_shape(g, d));
        }
        Op::Tanh(x) => {
            let d = g.data().iter().zip(out.data()).map(|(t, y)| t * (1.0 - y * y)).collect();
            accumulate(nodes, grads, *x, with_shape(g, d));
        }
        Op::Exp(x) => {
            let d = g.data().iter().zip(out.data()).map(|(t, y)| t * y).collect();
            accumulate(nodes, grads, *x, with_shape(g, d));
        }
        Op::Sqrt(x) => {
            let d = g.data().iter().zip(out.data()).map(|(t, y)| t / (2.0 * y)).collect();
            accumulate(nodes, grads, *x, with_shape(g, d));
        }
        Op::Square(x) => {
            let vx = val(x);
            let d = g.data().iter().zip(vx.data()).map(|(t, v)| 2.0 * t * v).collect();
            accumulate(nodes, grads, *x, with_shape(g, d));
        }
        Op::Abs { x, sign } => {
            let d = g.data().iter().zip(sign.iter()).map(|(t, s)| t * s).collect();
            accumulate(nodes, grads, *x, with_shape(g, d));
        }
        Op::Concat { parts, widths } => {
            let rows = g.rows();
            let total: usize = widths.iter().sum();
            let mut offset = 0;
            for (p, &w) in parts.iter().zip(widths) {
                if needs(p) {
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    accumulate(nodes, grads, *p, Array::new(vec![rows, w], d).unwrap());
                }
                offset += w;
            }
        }
        Op::Gather { x, index } => {
            let vx = val(x);
            let d = vx.cols();
            let mut gx = vec![0.0; vx.len()];
            for (r, &i) in index.iter().enumerate() {
                for (o, v) in gx[i * d..(i + 1) * d].iter_mut().zip(g.row(r)) {
                    *o += v;
                }
            }
            accumulate(nodes, grads, *x, with_shape(&vx, gx));
        }
        Op::ScatterAdd { x, index } => {
            let vx = val(x);
            let d = vx.cols();
            let mut gx = Vec::with_capacity(vx.len());
            for &i in index.iter() {
                gx.extend_from_slice(&g.data()[i * d..(i + 1) * d]);
            }
            accumulate(nodes, grads, *x, with_shape(&vx, gx));
        }
        Op::Pick { x, flat } => {
            let vx = val(x);
            let mut gx = vec![0.0; vx.len()];
            for (o, &i) in flat.iter().enumerate() {
                gx[i] += g.data()[o];
            }
            accumulate(nodes, grads, *x, with_shape(&vx, gx));
        }
        Op::Sum(x) => {
            let vx = val(x);
            accumulate(nodes, grads, *x, Array::filled(vx.shape(), g.item()));
        }
        Op::Mean(x) => {
            let vx = val(x);
            accumulate(nodes, grads, *x, Array::filled(vx.shape(), g.item() / vx.len() as f64));
        }
        Op::RowSum(x) => {
            let vx = val(x);
            let d = vx.cols();
            let mut gx = Vec::with_capacity(vx.len());
            for r in 0..vx.rows() {
                gx.extend(std::iter::repeat(g.data()[r]).take(d));
            }
            accumulate(nodes, grads, *x, with_shape(&vx, gx));
        }
        Op::Reshape(x) => {
            let vx = val(x);
            accumulate(nodes, grads, *x, with_shape(&vx, g.data().to_vec()));
        }
        Op::Transpose(x) => {
            let vx = val(x);
            let (r, c) = (vx.shape()[0], vx.shape()[1]);
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    gx[i * c + j] = g.data()[j * r + i];
                }
            }
            accumulate(nodes, grads, *x, with_shape(&vx, gx));
        }
    }
}
