//! Dense reverse-mode differentiation on a tape.
//!
//! Every node holds a row-major matrix ([`Tensor`]); scalars are 1x1 and
//! vectors are columns unless stated otherwise. Nodes are appended in
//! construction order, so the tape is acyclic by construction and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! Binary elementwise ops broadcast their right operand when it is a 1x1
//! scalar, a 1xC row or an Rx1 column.
//!
//! Shape mismatches and domain errors (log of a non-positive number,
//! division by zero) do not panic: the offending node produces NaNs, a
//! [`Diagnostic`] is recorded, and `backward` reports it as an error.
//!
//! ```
//! use ctes_retrieval::autodiff::Tape;
//!
//! let tape = Tape::new();
//! let x = tape.scalar_param(3.0);
//! let y = x * x;
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.scalar(x), 6.0);
//! ```

use std::cell::{Ref, RefCell};
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use thiserror::Error;

/// Row-major dense matrix.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}x{}, {:?})", self.rows, self.cols, self.data)
    }
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length does not match shape");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self::new(rows, cols, vec![v; rows * cols])
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(1, 1, vec![v])
    }

    pub fn column(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(n, 1, data)
    }

    pub fn row(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(1, n, data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self::new(r, c, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(self.rows, self.cols, self.data.iter().map(|&x| f(x)).collect())
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.rows, "matmul inner dimensions differ");
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * m..(p + 1) * m];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(n, m, out)
    }

    /// `self * other^T`.
    pub fn matmul_nt(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.cols, "matmul_nt inner dimensions differ");
        let (n, k, m) = (self.rows, self.cols, other.rows);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let arow = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let brow = &other.data[j * k..(j + 1) * k];
                out[i * m + j] = arow.iter().zip(brow).map(|(a, b)| a * b).sum();
            }
        }
        Tensor::new(n, m, out)
    }

    /// `self^T * other`.
    pub fn matmul_tn(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.rows, other.rows, "matmul_tn outer dimensions differ");
        let (k, n, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for p in 0..k {
            let arow = &self.data[p * n..(p + 1) * n];
            let brow = &other.data[p * m..(p + 1) * m];
            for (i, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out[i * m..(i + 1) * m];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(n, m, out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Col,
    Scalar,
}

fn broadcast_kind(a: (usize, usize), b: (usize, usize)) -> Option<Broadcast> {
    if a == b {
        Some(Broadcast::Same)
    } else if b == (1, 1) {
        Some(Broadcast::Scalar)
    } else if b == (1, a.1) {
        Some(Broadcast::Row)
    } else if b == (a.0, 1) {
        Some(Broadcast::Col)
    } else {
        None
    }
}

#[inline]
fn bidx(kind: Broadcast, cols: usize, i: usize) -> usize {
    match kind {
        Broadcast::Same => i,
        Broadcast::Row => i % cols,
        Broadcast::Col => i / cols,
        Broadcast::Scalar => 0,
    }
}

/// Sums a full-shape gradient back onto the broadcast operand's shape.
fn reduce_to(kind: Broadcast, g: &Tensor, shape: (usize, usize)) -> Tensor {
    if kind == Broadcast::Same {
        return g.clone();
    }
    let mut out = Tensor::zeros(shape.0, shape.1);
    for (i, &v) in g.data.iter().enumerate() {
        out.data[bidx(kind, g.cols, i)] += v;
    }
    out
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(usize, usize, Broadcast),
    Sub(usize, usize, Broadcast),
    Mul(usize, usize, Broadcast),
    Div(usize, usize, Broadcast),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Relu(usize),
    Square(usize),
    Abs(usize),
    ClampMin(usize, f64),
    Sum(usize),
    RowSums(usize),
    Dot(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LogSumExp(usize),
    CumSumRows(usize),
    SliceRows(usize, usize),
    ConcatRows(usize, usize),
    Column(usize, usize),
    Pick(usize, Vec<usize>),
    Invalid,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Something that went wrong while recording.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub node: usize,
    pub op: &'static str,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "node {} ({}): {}", self.node, self.op, self.message)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("backward needs a scalar output, got {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },
    #[error("shape mismatch at {0}")]
    ShapeMismatch(Diagnostic),
    #[error("domain error at {0}")]
    Domain(Diagnostic),
}

/// Records operations for one reverse sweep. Single-threaded; build one
/// tape per independent computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    diagnostics: RefCell<Vec<(bool, Diagnostic)>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Value<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Value<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Value#{}{:?}", self.id, self.tape.nodes.borrow()[self.id].value)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Value<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Value {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn flag(&self, shape: bool, op: &'static str, message: String) {
        let node = self.len();
        self.diagnostics
            .borrow_mut()
            .push((shape, Diagnostic { node, op, message }));
    }

    /// A differentiable leaf.
    pub fn param(&self, t: Tensor) -> Value<'_> {
        self.push(t, Op::Leaf, true)
    }

    pub fn scalar_param(&self, v: f64) -> Value<'_> {
        self.param(Tensor::scalar(v))
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Value<'_> {
        self.push(t, Op::Const, false)
    }

    pub fn scalar_const(&self, v: f64) -> Value<'_> {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Value<'_>) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.id].value)
    }

    pub fn diagnostics(&self) -> Vec<Diagnostic> {
        self.diagnostics.borrow().iter().map(|(_, d)| d.clone()).collect()
    }

    /// First recorded problem, if any.
    pub fn check(&self) -> Result<(), AutodiffError> {
        match self.diagnostics.borrow().first() {
            None => Ok(()),
            Some((true, d)) => Err(AutodiffError::ShapeMismatch(d.clone())),
            Some((false, d)) => Err(AutodiffError::Domain(d.clone())),
        }
    }

    fn unary(&self, a: Value<'_>, op: Op, f: impl Fn(&Tensor) -> Tensor) -> Value<'_> {
        let (val, rg) = {
            let nodes = self.nodes.borrow();
            (f(&nodes[a.id].value), nodes[a.id].requires_grad)
        };
        self.push(val, op, rg)
    }

    fn invalid(&self, rows: usize, cols: usize, op: &'static str, message: String) -> Value<'_> {
        self.flag(true, op, message);
        self.push(Tensor::filled(rows, cols, f64::NAN), Op::Invalid, false)
    }

    fn binary_elementwise(
        &self,
        a: Value<'_>,
        b: Value<'_>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(usize, usize, Broadcast) -> Op,
    ) -> Value<'_> {
        let (val, rg, kind) = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.id].value, &nodes[b.id].value);
            let Some(kind) = broadcast_kind(x.shape(), y.shape()) else {
                let (r, c) = x.shape();
                let msg = format!("{:?} vs {:?}", x.shape(), y.shape());
                drop(nodes);
                return self.invalid(r, c, name, msg);
            };
            let data = x
                .data
                .iter()
                .enumerate()
                .map(|(i, &xv)| f(xv, y.data[bidx(kind, x.cols, i)]))
                .collect();
            (
                Tensor::new(x.rows, x.cols, data),
                nodes[a.id].requires_grad || nodes[b.id].requires_grad,
                kind,
            )
        };
        if name == "div" && val.data.iter().any(|v| !v.is_finite()) {
            self.flag(false, name, String::from("division by zero"));
        }
        self.push(val, make(a.id, b.id, kind), rg)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Value<'_>) -> Result<Gradients, AutodiffError> {
        self.check()?;
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id].value;
        if out.shape() != (1, 1) {
            return Err(AutodiffError::NonScalarOutput {
                rows: out.rows,
                cols: out.cols,
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.id + 1];
        grads[output.id] = Some(Tensor::scalar(1.0));
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let mut acc = |target: usize, contrib: Tensor| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => existing.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            };
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Const | Op::Invalid => {}
                Op::Add(a, b, k) => {
                    acc(*b, reduce_to(*k, &g, val(*b).shape()));
                    acc(*a, g);
                }
                Op::Sub(a, b, k) => {
                    acc(*b, reduce_to(*k, &g.map(|x| -x), val(*b).shape()));
                    acc(*a, g);
                }
                Op::Mul(a, b, k) => {
                    let (x, y) = (val(*a), val(*b));
                    let cols = x.cols;
                    if nodes[*a].requires_grad {
                        let data = g
                            .data
                            .iter()
                            .enumerate()
                            .map(|(i, gv)| gv * y.data[bidx(*k, cols, i)])
                            .collect();
                        acc(*a, Tensor::new(x.rows, x.cols, data));
                    }
                    if nodes[*b].requires_grad {
                        let data = g.data.iter().zip(&x.data).map(|(gv, xv)| gv * xv).collect();
                        let full = Tensor::new(x.rows, x.cols, data);
                        acc(*b, reduce_to(*k, &full, y.shape()));
                    }
                }
                Op::Div(a, b, k) => {
                    let (x, y) = (val(*a), val(*b));
                    let cols = x.cols;
                    if nodes[*a].requires_grad {
                        let data = g
                            .data
                            .iter()
                            .enumerate()
                            .map(|(i, gv)| gv / y.data[bidx(*k, cols, i)])
                            .collect();
                        acc(*a, Tensor::new(x.rows, x.cols, data));
                    }
                    if nodes[*b].requires_grad {
                        let data = g
                            .data
                            .iter()
                            .enumerate()
                            .map(|(i, gv)| {
                                let yv = y.data[bidx(*k, cols, i)];
                                -gv * x.data[i] / (yv * yv)
                            })
                            .collect();
                        let full = Tensor::new(x.rows, x.cols, data);
                        acc(*b, reduce_to(*k, &full, y.shape()));
                    }
                }
                Op::Neg(a) => acc(*a, g.map(|x| -x)),
                Op::Scale(a, k) => {
                    let k = *k;
                    acc(*a, g.map(|x| x * k));
                }
                Op::Offset(a) => acc(*a, g),
                Op::Exp(a) => acc(*a, zip(&g, &node.value, |gv, y| gv * y)),
                Op::Log(a) => acc(*a, zip(&g, val(*a), |gv, x| gv / x)),
                Op::Tanh(a) => acc(*a, zip(&g, &node.value, |gv, y| gv * (1.0 - y * y))),
                Op::Relu(a) => acc(*a, zip(&g, val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })),
                Op::Square(a) => acc(*a, zip(&g, val(*a), |gv, x| 2.0 * gv * x)),
                Op::Abs(a) => acc(*a, zip(&g, val(*a), |gv, x| gv * sign0(x))),
                Op::ClampMin(a, lo) => {
                    let lo = *lo;
                    acc(*a, zip(&g, val(*a), |gv, x| if x > lo { gv } else { 0.0 }));
                }
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Tensor::filled(r, c, g.item()));
                }
                Op::RowSums(a) => {
                    let (r, c) = val(*a).shape();
                    let mut out = Tensor::zeros(r, c);
                    for i in 0..r {
                        out.data[i * c..(i + 1) * c].fill(g.data[i]);
                    }
                    acc(*a, out);
                }
                Op::Dot(a, b) => {
                    let s = g.item();
                    if nodes[*a].requires_grad {
                        acc(*a, val(*b).map(|y| y * s));
                    }
                    if nodes[*b].requires_grad {
                        acc(*b, val(*a).map(|x| x * s));
                    }
                }
                Op::MatMul(a, b) => {
                    if nodes[*a].requires_grad {
                        acc(*a, g.matmul_nt(val(*b)));
                    }
                    if nodes[*b].requires_grad {
                        acc(*b, val(*a).matmul_tn(&g));
                    }
                }
                Op::Transpose(a) => acc(*a, g.transpose()),
                Op::Softmax(a) => {
                    let p = &node.value;
                    let c = p.cols;
                    let mut out = Tensor::zeros(p.rows, c);
                    for i in 0..p.rows {
                        let pr = &p.data[i * c..(i + 1) * c];
                        let gr = &g.data[i * c..(i + 1) * c];
                        let inner: f64 = pr.iter().zip(gr).map(|(p, g)| p * g).sum();
                        for j in 0..c {
                            out.data[i * c + j] = pr[j] * (gr[j] - inner);
                        }
                    }
                    acc(*a, out);
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let c = y.cols;
                    let mut out = Tensor::zeros(y.rows, c);
                    for i in 0..y.rows {
                        let gr = &g.data[i * c..(i + 1) * c];
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..c {
                            out.data[i * c + j] = gr[j] - y.data[i * c + j].exp() * gsum;
                        }
                    }
                    acc(*a, out);
                }
                Op::LogSumExp(a) => {
                    let x = val(*a);
                    let c = x.cols;
                    let mut out = Tensor::zeros(x.rows, c);
                    for i in 0..x.rows {
                        let lse = node.value.data[i];
                        for j in 0..c {
                            out.data[i * c + j] = g.data[i] * (x.data[i * c + j] - lse).exp();
                        }
                    }
                    acc(*a, out);
                }
                Op::CumSumRows(a) => {
                    // reverse cumulative sum
                    let (r, c) = g.shape();
                    let mut out = g.clone();
                    for i in (0..r.saturating_sub(1)).rev() {
                        for j in 0..c {
                            out.data[i * c + j] += out.data[(i + 1) * c + j];
                        }
                    }
                    acc(*a, out);
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = val(*a).shape();
                    let mut out = Tensor::zeros(r, c);
                    out.data[start * c..start * c + g.data.len()].copy_from_slice(&g.data);
                    acc(*a, out);
                }
                Op::ConcatRows(a, b) => {
                    let split = val(*a).data.len();
                    let (ra, c) = val(*a).shape();
                    let rb = val(*b).rows;
                    acc(*a, Tensor::new(ra, c, g.data[..split].to_vec()));
                    acc(*b, Tensor::new(rb, c, g.data[split..].to_vec()));
                }
                Op::Column(a, j) => {
                    let (r, c) = val(*a).shape();
                    let mut out = Tensor::zeros(r, c);
                    for i in 0..r {
                        out.data[i * c + j] = g.data[i];
                    }
                    acc(*a, out);
                }
                Op::Pick(a, idx) => {
                    let (r, c) = val(*a).shape();
                    let mut out = Tensor::zeros(r, c);
                    for (i, &j) in idx.iter().enumerate() {
                        out.data[i * c + j] = g.data[i];
                    }
                    acc(*a, out);
                }
            }
        }
        let shapes = nodes[..=output.id].iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn zip(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        g.rows,
        g.cols,
        g.data.iter().zip(&x.data).map(|(&a, &b)| f(a, b)).collect(),
    )
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Leaf gradients from one reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to a leaf; zeros when the leaf is not on any
    /// path to the output.
    pub fn wrt(&self, v: Value<'_>) -> Tensor {
        match self.grads.get(v.id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes.get(v.id).copied().unwrap_or_else(|| v.shape());
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn scalar(&self, v: Value<'_>) -> f64 {
        self.wrt(v).item()
    }
}

impl<'t> Value<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    pub fn to_tensor(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.data.clone()
    }

    pub fn exp(self) -> Value<'t> {
        self.tape.unary(self, Op::Exp(self.id), |x| x.map(f64::exp))
    }

    /// Natural log; non-positive inputs are recorded as a domain error.
    pub fn ln(self) -> Value<'t> {
        if self.tape.value(self).data.iter().any(|&x| x <= 0.0 || x.is_nan()) {
            self.tape
                .flag(false, "log", String::from("log of a non-positive value"));
        }
        self.tape.unary(self, Op::Log(self.id), |x| x.map(f64::ln))
    }

    pub fn tanh(self) -> Value<'t> {
        self.tape.unary(self, Op::Tanh(self.id), |x| x.map(f64::tanh))
    }

    pub fn relu(self) -> Value<'t> {
        self.tape.unary(self, Op::Relu(self.id), |x| x.map(|v| v.max(0.0)))
    }

    pub fn square(self) -> Value<'t> {
        self.tape.unary(self, Op::Square(self.id), |x| x.map(|v| v * v))
    }

    pub fn abs(self) -> Value<'t> {
        self.tape.unary(self, Op::Abs(self.id), |x| x.map(f64::abs))
    }

    /// `max(x, lo)` elementwise; clamped entries get zero gradient.
    pub fn clamp_min(self, lo: f64) -> Value<'t> {
        self.tape
            .unary(self, Op::ClampMin(self.id, lo), |x| x.map(|v| v.max(lo)))
    }

    pub fn scale(self, k: f64) -> Value<'t> {
        self.tape.unary(self, Op::Scale(self.id, k), |x| x.map(|v| v * k))
    }

    pub fn offset(self, k: f64) -> Value<'t> {
        self.tape.unary(self, Op::Offset(self.id), |x| x.map(|v| v + k))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(self) -> Value<'t> {
        self.tape
            .unary(self, Op::Sum(self.id), |x| Tensor::scalar(x.data.iter().sum()))
    }

    /// Per-row sums, as a column.
    pub fn row_sums(self) -> Value<'t> {
        self.tape.unary(self, Op::RowSums(self.id), |x| {
            Tensor::column((0..x.rows).map(|i| x.row_slice(i).iter().sum()).collect())
        })
    }

    /// Inner product of two same-shape values.
    pub fn dot(self, other: Value<'t>) -> Value<'t> {
        let t = self.tape;
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return t.invalid(1, 1, "dot", format!("{a:?} vs {b:?}"));
        }
        let (val, rg) = {
            let nodes = t.nodes.borrow();
            let (x, y) = (&nodes[self.id].value, &nodes[other.id].value);
            (
                Tensor::scalar(x.data.iter().zip(&y.data).map(|(a, b)| a * b).sum()),
                nodes[self.id].requires_grad || nodes[other.id].requires_grad,
            )
        };
        t.push(val, Op::Dot(self.id, other.id), rg)
    }

    pub fn matmul(self, other: Value<'t>) -> Value<'t> {
        let t = self.tape;
        let (a, b) = (self.shape(), other.shape());
        if a.1 != b.0 {
            return t.invalid(a.0, b.1, "matmul", format!("{a:?} x {b:?}"));
        }
        let (val, rg) = {
            let nodes = t.nodes.borrow();
            (
                nodes[self.id].value.matmul(&nodes[other.id].value),
                nodes[self.id].requires_grad || nodes[other.id].requires_grad,
            )
        };
        t.push(val, Op::MatMul(self.id, other.id), rg)
    }

    /// Matrix times column vector.
    pub fn matvec(self, x: Value<'t>) -> Value<'t> {
        let (_, c) = x.shape();
        if c != 1 {
            let r = self.shape().0;
            return self
                .tape
                .invalid(r, 1, "matvec", format!("expected a column, got {:?}", x.shape()));
        }
        self.matmul(x)
    }

    pub fn t(self) -> Value<'t> {
        self.tape
            .unary(self, Op::Transpose(self.id), Tensor::transpose)
    }

    /// Row-wise softmax. With `causal`, row `i` only sees columns `0..=i`
    /// and the rest get probability zero.
    pub fn softmax_rows(self, causal: bool) -> Value<'t> {
        self.tape.unary(self, Op::Softmax(self.id), |x| {
            let c = x.cols;
            let mut out = Tensor::zeros(x.rows, c);
            for i in 0..x.rows {
                let hi = if causal { (i + 1).min(c) } else { c };
                let row = &x.data[i * c..i * c + hi];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (j, &v) in row.iter().enumerate() {
                    let e = (v - m).exp();
                    out.data[i * c + j] = e;
                    z += e;
                }
                for v in &mut out.data[i * c..i * c + hi] {
                    *v /= z;
                }
            }
            out
        })
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(self) -> Value<'t> {
        self.tape.unary(self, Op::LogSoftmax(self.id), |x| {
            let c = x.cols;
            let mut out = x.clone();
            for i in 0..x.rows {
                let lse = logsumexp(x.row_slice(i));
                for v in &mut out.data[i * c..(i + 1) * c] {
                    *v -= lse;
                }
            }
            out
        })
    }

    /// Row-wise log-sum-exp, as a column.
    pub fn logsumexp_rows(self) -> Value<'t> {
        self.tape.unary(self, Op::LogSumExp(self.id), |x| {
            Tensor::column((0..x.rows).map(|i| logsumexp(x.row_slice(i))).collect())
        })
    }

    /// Softmax of a single row or column vector, same shape as the input.
    pub fn softmax(self) -> Value<'t> {
        match self.shape() {
            (1, _) => self.softmax_rows(false),
            _ => self.t().softmax_rows(false).t(),
        }
    }

    /// Log-sum-exp over all entries of a vector, as a scalar.
    pub fn logsumexp(self) -> Value<'t> {
        match self.shape() {
            (1, _) => self.logsumexp_rows(),
            _ => self.t().logsumexp_rows(),
        }
    }

    /// Running sum down the rows: row `i` of the output is the sum of input
    /// rows `0..=i`.
    pub fn cumsum_rows(self) -> Value<'t> {
        self.tape.unary(self, Op::CumSumRows(self.id), |x| {
            let mut out = x.clone();
            let c = x.cols;
            for i in 1..x.rows {
                for j in 0..c {
                    out.data[i * c + j] += out.data[(i - 1) * c + j];
                }
            }
            out
        })
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Value<'t> {
        let (r, c) = self.shape();
        if start + len > r {
            return self
                .tape
                .invalid(len, c, "slice_rows", format!("rows {start}..{} of {r}", start + len));
        }
        self.tape.unary(self, Op::SliceRows(self.id, start), |x| {
            Tensor::new(len, c, x.data[start * c..(start + len) * c].to_vec())
        })
    }

    pub fn concat_rows(self, other: Value<'t>) -> Value<'t> {
        let t = self.tape;
        let (a, b) = (self.shape(), other.shape());
        if a.1 != b.1 {
            return t.invalid(a.0 + b.0, a.1, "concat_rows", format!("{a:?} vs {b:?}"));
        }
        let (val, rg) = {
            let nodes = t.nodes.borrow();
            let (x, y) = (&nodes[self.id].value, &nodes[other.id].value);
            let mut data = x.data.clone();
            data.extend_from_slice(&y.data);
            (
                Tensor::new(a.0 + b.0, a.1, data),
                nodes[self.id].requires_grad || nodes[other.id].requires_grad,
            )
        };
        t.push(val, Op::ConcatRows(self.id, other.id), rg)
    }

    pub fn column(self, j: usize) -> Value<'t> {
        let (r, c) = self.shape();
        if j >= c {
            return self
                .tape
                .invalid(r, 1, "column", format!("column {j} of {c}"));
        }
        self.tape.unary(self, Op::Column(self.id, j), |x| {
            Tensor::column((0..r).map(|i| x.data[i * c + j]).collect())
        })
    }

    /// Picks entry `idx[i]` from row `i`, as a column.
    pub fn pick(self, idx: &[usize]) -> Value<'t> {
        let (r, c) = self.shape();
        if idx.len() != r || idx.iter().any(|&j| j >= c) {
            return self
                .tape
                .invalid(idx.len(), 1, "pick", format!("indices do not fit {r}x{c}"));
        }
        self.tape.unary(self, Op::Pick(self.id, idx.to_vec()), |x| {
            Tensor::column(idx.iter().enumerate().map(|(i, &j)| x.data[i * c + j]).collect())
        })
    }
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

macro_rules! binop {
    ($trait:ident, $method:ident, $name:literal, $f:expr, $op:ident) => {
        impl<'t> $trait for Value<'t> {
            type Output = Value<'t>;
            fn $method(self, rhs: Value<'t>) -> Value<'t> {
                self.tape.binary_elementwise(self, rhs, $name, $f, Op::$op)
            }
        }
    };
}

binop!(Add, add, "add", |a, b| a + b, Add);
binop!(Sub, sub, "sub", |a, b| a - b, Sub);
binop!(Mul, mul, "mul", |a, b| a * b, Mul);
binop!(Div, div, "div", |a, b| a / b, Div);

impl<'t> Add<f64> for Value<'t> {
    type Output = Value<'t>;
    fn add(self, k: f64) -> Value<'t> {
        self.offset(k)
    }
}

impl<'t> Sub<f64> for Value<'t> {
    type Output = Value<'t>;
    fn sub(self, k: f64) -> Value<'t> {
        self.offset(-k)
    }
}

impl<'t> Mul<f64> for Value<'t> {
    type Output = Value<'t>;
    fn mul(self, k: f64) -> Value<'t> {
        self.scale(k)
    }
}

impl<'t> Div<f64> for Value<'t> {
    type Output = Value<'t>;
    fn div(self, k: f64) -> Value<'t> {
        self.scale(1.0 / k)
    }
}

impl<'t> Neg for Value<'t> {
    type Output = Value<'t>;
    fn neg(self) -> Value<'t> {
        self.tape.unary(self, Op::Neg(self.id), |x| x.map(|v| -v))
    }
}
