//! Dense row-major matrices and a recording tape for reverse-mode
//! differentiation.
//!
//! Every value on the tape is a 2-D [`Tensor`]; scalars are `1×1`. Operations
//! append a node holding the forward value and enough context for the
//! backward rule. [`Tape::backward`] walks the nodes in reverse recording
//! order and accumulates gradients into every leaf that requires them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![value] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Elu,
    Tanh,
    Softplus,
    Gelu,
}

impl Activation {
    pub const ALL: [Activation; 6] = [
        Activation::Relu,
        Activation::LeakyRelu,
        Activation::Elu,
        Activation::Tanh,
        Activation::Softplus,
        Activation::Gelu,
    ];
}

const LEAKY_SLOPE: f64 = 0.01;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unary {
    Act(Activation),
    Log,
    Exp,
    Abs,
    Powf(f64),
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Act(Activation::Relu) => x.max(0.0),
            Unary::Act(Activation::LeakyRelu) => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Unary::Act(Activation::Elu) => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Unary::Act(Activation::Tanh) => x.tanh(),
            Unary::Act(Activation::Softplus) => {
                // log(1 + e^x) without overflow
                x.max(0.0) + (-x.abs()).exp().ln_1p()
            }
            Unary::Act(Activation::Gelu) => {
                0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
            }
            Unary::Log => x.ln(),
            Unary::Exp => x.exp(),
            Unary::Abs => x.abs(),
            Unary::Powf(p) => x.powf(p),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Act(Activation::Relu) => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Act(Activation::LeakyRelu) => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Unary::Act(Activation::Elu) => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Unary::Act(Activation::Tanh) => 1.0 - y * y,
            Unary::Act(Activation::Softplus) => 1.0 / (1.0 + (-x).exp()),
            Unary::Act(Activation::Gelu) => {
                let inner = GELU_C * (x + 0.044715 * x * x * x);
                let t = inner.tanh();
                let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            }
            Unary::Log => 1.0 / x,
            Unary::Exp => y,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Powf(p) => p * x.powf(p - 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Full,
    Row,
    Col,
    Scalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var, Broadcast),
    Affine(Var, f64),
    Unary(Unary, Var),
    RowGather(Var, Vec<usize>),
    ConcatCols(Var, Var),
    Segment { input: Var, ids: Vec<usize>, mode: Reduce, counts: Vec<usize>, argmax: Vec<usize> },
    Propagate { input: Var, src: Vec<usize>, dst: Vec<usize>, coef: Vec<f64> },
    ScaleRows(Var, Vec<f64>),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Pick(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

fn check_finite(op: &str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite value produced by {op}")))
    }
}

/// `a (m×k) · b (k×n)` into a fresh buffer.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
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

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &str, value: Tensor, requires_grad: bool, op: Op) -> Result<Var> {
        check_finite(name, &value)?;
        Ok(self.push(value, requires_grad, op))
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Leaf that never receives a gradient (inputs, masks).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf; zeros when the leaf never received one.
    pub fn grad(&self, v: Var) -> Tensor {
        let t = &self.nodes[v.0].value;
        match &self.leaf_grads[v.0] {
            Some(g) => Tensor { rows: t.rows, cols: t.cols, data: g.clone() },
            None => Tensor::zeros(t.rows, t.cols),
        }
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols != tb.rows {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = matmul_raw(&ta.data, &tb.data, ta.rows, ta.cols, tb.cols);
        let out = Tensor { rows: ta.rows, cols: tb.cols, data };
        let rg = self.rg(&[a, b]);
        self.push_checked("matmul", out, rg, Op::MatMul(a, b))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bc = if ta.shape() == tb.shape() {
            Broadcast::Full
        } else if tb.rows == 1 && tb.cols == 1 {
            Broadcast::Scalar
        } else if tb.rows == 1 && tb.cols == ta.cols {
            Broadcast::Row
        } else if tb.cols == 1 && tb.rows == ta.rows {
            Broadcast::Col
        } else {
            return Err(Error::Shape(format!(
                "{kind:?} {:?} with {:?}",
                ta.shape(),
                tb.shape()
            )));
        };
        let (rows, cols) = (ta.rows, ta.cols);
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let x = ta.data[r * cols + c];
                let y = match bc {
                    Broadcast::Full => tb.data[r * cols + c],
                    Broadcast::Row => tb.data[c],
                    Broadcast::Col => tb.data[r],
                    Broadcast::Scalar => tb.data[0],
                };
                data.push(match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                });
            }
        }
        let rg = self.rg(&[a, b]);
        self.push_checked("elementwise", Tensor { rows, cols, data }, rg, Op::Binary(kind, a, b, bc))
    }

    /// `a + b`; `b` may be full, a `1×n` row, an `m×1` column or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor { rows: t.rows, cols: t.cols, data: t.data.iter().map(|x| x * factor).collect() };
        let rg = self.rg(&[a]);
        self.push_checked("scale", out, rg, Op::Affine(a, factor))
    }

    fn unary(&mut self, u: Unary, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor { rows: t.rows, cols: t.cols, data: t.data.iter().map(|&x| u.apply(x)).collect() };
        let rg = self.rg(&[a]);
        self.push_checked("unary", out, rg, Op::Unary(u, a))
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Result<Var> {
        self.unary(Unary::Act(act), a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.activation(a, Activation::Relu)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Abs, a)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        self.unary(Unary::Powf(p), a)
    }

    /// Output row `i` is input row `indices[i]`.
    pub fn row_gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let mut data = Vec::with_capacity(indices.len() * t.cols);
        for &i in indices {
            if i >= t.rows {
                return Err(Error::Shape(format!("row index {i} out of {} rows", t.rows)));
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor { rows: indices.len(), cols: t.cols, data };
        let rg = self.rg(&[a]);
        self.push_checked("row_gather", out, rg, Op::RowGather(a, indices.to_vec()))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows != tb.rows {
            return Err(Error::Shape(format!("concat {:?} with {:?}", ta.shape(), tb.shape())));
        }
        let cols = ta.cols + tb.cols;
        let mut data = Vec::with_capacity(ta.rows * cols);
        for r in 0..ta.rows {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let out = Tensor { rows: ta.rows, cols, data };
        let rg = self.rg(&[a, b]);
        self.push_checked("concat_cols", out, rg, Op::ConcatCols(a, b))
    }

    /// Reduce rows sharing a segment id. Empty segments yield zeros for every
    /// mode; `max` routes its gradient to the lowest attaining row.
    pub fn segment_reduce(&mut self, a: Var, ids: &[usize], n_segments: usize, mode: Reduce) -> Result<Var> {
        let t = self.value(a);
        if ids.len() != t.rows {
            return Err(Error::Shape(format!("{} segment ids for {} rows", ids.len(), t.rows)));
        }
        let d = t.cols;
        let mut counts = vec![0usize; n_segments];
        for &s in ids {
            if s >= n_segments {
                return Err(Error::Shape(format!("segment id {s} >= {n_segments}")));
            }
            counts[s] += 1;
        }
        let mut data = vec![0.0; n_segments * d];
        let mut argmax = Vec::new();
        match mode {
            Reduce::Sum | Reduce::Mean => {
                for (r, &s) in ids.iter().enumerate() {
                    for c in 0..d {
                        data[s * d + c] += t.data[r * d + c];
                    }
                }
                if mode == Reduce::Mean {
                    for s in 0..n_segments {
                        if counts[s] > 0 {
                            let inv = 1.0 / counts[s] as f64;
                            data[s * d..(s + 1) * d].iter_mut().for_each(|v| *v *= inv);
                        }
                    }
                }
            }
            Reduce::Max => {
                argmax = vec![usize::MAX; n_segments * d];
                for (r, &s) in ids.iter().enumerate() {
                    for c in 0..d {
                        let v = t.data[r * d + c];
                        let k = s * d + c;
                        if argmax[k] == usize::MAX || v > data[k] {
                            data[k] = v;
                            argmax[k] = r;
                        }
                    }
                }
            }
        }
        let out = Tensor { rows: n_segments, cols: d, data };
        let rg = self.rg(&[a]);
        self.push_checked(
            "segment_reduce",
            out,
            rg,
            Op::Segment { input: a, ids: ids.to_vec(), mode, counts, argmax },
        )
    }

    /// Sparse propagation with constant coefficients:
    /// `out[dst[e]] += coef[e] * input[src[e]]`, `out` has `n_out` rows.
    pub fn propagate(&mut self, a: Var, src: &[usize], dst: &[usize], coef: &[f64], n_out: usize) -> Result<Var> {
        let t = self.value(a);
        if src.len() != dst.len() || src.len() != coef.len() {
            return Err(Error::Shape("propagate edge arrays differ in length".into()));
        }
        let d = t.cols;
        let mut data = vec![0.0; n_out * d];
        for e in 0..src.len() {
            let (s, u) = (src[e], dst[e]);
            if s >= t.rows || u >= n_out {
                return Err(Error::Shape(format!("edge {s}->{u} out of range")));
            }
            let w = coef[e];
            for c in 0..d {
                data[u * d + c] += w * t.data[s * d + c];
            }
        }
        let out = Tensor { rows: n_out, cols: d, data };
        let rg = self.rg(&[a]);
        self.push_checked(
            "propagate",
            out,
            rg,
            Op::Propagate { input: a, src: src.to_vec(), dst: dst.to_vec(), coef: coef.to_vec() },
        )
    }

    /// Multiply row `i` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: &[f64]) -> Result<Var> {
        let t = self.value(a);
        if factors.len() != t.rows {
            return Err(Error::Shape(format!("{} row factors for {} rows", factors.len(), t.rows)));
        }
        let mut data = t.data.clone();
        for (r, f) in factors.iter().enumerate() {
            data[r * t.cols..(r + 1) * t.cols].iter_mut().for_each(|v| *v *= f);
        }
        let out = Tensor { rows: t.rows, cols: t.cols, data };
        let rg = self.rg(&[a]);
        self.push_checked("scale_rows", out, rg, Op::ScaleRows(a, factors.to_vec()))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut data = t.data.clone();
        for r in 0..t.rows {
            let row = &mut data[r * t.cols..(r + 1) * t.cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let out = Tensor { rows: t.rows, cols: t.cols, data };
        let rg = self.rg(&[a]);
        self.push_checked("softmax_rows", out, rg, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut data = t.data.clone();
        for r in 0..t.rows {
            let row = &mut data[r * t.cols..(r + 1) * t.cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor { rows: t.rows, cols: t.cols, data };
        let rg = self.rg(&[a]);
        self.push_checked("log_softmax_rows", out, rg, Op::LogSoftmaxRows(a))
    }

    /// Column `cols[r]` of each row `r`, as an `m×1` tensor.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if cols.len() != t.rows {
            return Err(Error::Shape(format!("{} picks for {} rows", cols.len(), t.rows)));
        }
        let mut data = Vec::with_capacity(t.rows);
        for (r, &c) in cols.iter().enumerate() {
            if c >= t.cols {
                return Err(Error::Shape(format!("pick column {c} of {}", t.cols)));
            }
            data.push(t.at(r, c));
        }
        let out = Tensor { rows: t.rows, cols: 1, data };
        let rg = self.rg(&[a]);
        self.push_checked("pick", out, rg, Op::Pick(a, cols.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(&[a]);
        self.push_checked("sum", Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.data.is_empty() {
            return Err(Error::Shape("mean of empty tensor".into()));
        }
        let s = t.data.iter().sum::<f64>() / t.data.len() as f64;
        let rg = self.rg(&[a]);
        self.push_checked("mean", Tensor::scalar(s), rg, Op::Mean(a))
    }

    /// Column means over the row axis, as a `1×n` tensor.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rows == 0 {
            return Err(Error::Shape("mean_rows of zero rows".into()));
        }
        let mut data = vec![0.0; t.cols];
        for r in 0..t.rows {
            for (o, v) in data.iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / t.rows as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        let out = Tensor { rows: 1, cols: t.cols, data };
        let rg = self.rg(&[a]);
        self.push_checked("mean_rows", out, rg, Op::MeanRows(a))
    }

    /// Populate gradients of every trainable leaf with respect to the scalar
    /// `loss`. Gradients add onto whatever an earlier call left behind.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.rows != 1 || lt.cols != 1 {
            return Err(Error::Shape(format!("backward from non-scalar {:?}", lt.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    match &mut self.leaf_grads[i] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(g),
                    }
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k, n) = (ta.rows, ta.cols, tb.cols);
                    if self.nodes[a.0].requires_grad {
                        // dA = dC · Bᵀ
                        let mut da = vec![0.0; m * k];
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let brow = &tb.data[p * n..(p + 1) * n];
                                da[r * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            }
                        }
                        accumulate(&mut grads, *a, da);
                    }
                    if self.nodes[b.0].requires_grad {
                        // dB = Aᵀ · dC
                        let mut db = vec![0.0; k * n];
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let av = ta.data[r * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                let drow = &mut db[p * n..(p + 1) * n];
                                for (d, x) in drow.iter_mut().zip(grow) {
                                    *d += av * x;
                                }
                            }
                        }
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Binary(kind, a, b, bc) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let cols = ta.cols;
                    let bidx = |r: usize, c: usize| match bc {
                        Broadcast::Full => r * cols + c,
                        Broadcast::Row => c,
                        Broadcast::Col => r,
                        Broadcast::Scalar => 0,
                    };
                    if self.nodes[a.0].requires_grad {
                        let da: Vec<f64> = match kind {
                            Binary::Add | Binary::Sub => g.clone(),
                            Binary::Mul => (0..g.len()).map(|k| g[k] * tb.data[bidx(k / cols, k % cols)]).collect(),
                        };
                        accumulate(&mut grads, *a, da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let mut db = vec![0.0; tb.data.len()];
                        for (k, gk) in g.iter().enumerate() {
                            let j = bidx(k / cols, k % cols);
                            db[j] += match kind {
                                Binary::Add => *gk,
                                Binary::Sub => -gk,
                                Binary::Mul => gk * ta.data[k],
                            };
                        }
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Affine(a, f) => {
                    let da = g.iter().map(|x| x * f).collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::Unary(u, a) => {
                    let x = &self.nodes[a.0].value.data;
                    let y = &node.value.data;
                    let da = (0..g.len()).map(|k| g[k] * u.derivative(x[k], y[k])).collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::RowGather(a, idx) => {
                    let ta = &self.nodes[a.0].value;
                    let d = ta.cols;
                    let mut da = vec![0.0; ta.data.len()];
                    for (r, &src) in idx.iter().enumerate() {
                        for c in 0..d {
                            da[src * d + c] += g[r * d + c];
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::ConcatCols(a, b) => {
                    let (ca, cb) = (self.nodes[a.0].value.cols, self.nodes[b.0].value.cols);
                    let rows = node.value.rows;
                    let w = ca + cb;
                    if self.nodes[a.0].requires_grad {
                        let mut da = Vec::with_capacity(rows * ca);
                        for r in 0..rows {
                            da.extend_from_slice(&g[r * w..r * w + ca]);
                        }
                        accumulate(&mut grads, *a, da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let mut db = Vec::with_capacity(rows * cb);
                        for r in 0..rows {
                            db.extend_from_slice(&g[r * w + ca..(r + 1) * w]);
                        }
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Segment { input, ids, mode, counts, argmax } => {
                    let ta = &self.nodes[input.0].value;
                    let d = ta.cols;
                    let mut da = vec![0.0; ta.data.len()];
                    match mode {
                        Reduce::Sum | Reduce::Mean => {
                            for (r, &s) in ids.iter().enumerate() {
                                let f = if *mode == Reduce::Mean { 1.0 / counts[s] as f64 } else { 1.0 };
                                for c in 0..d {
                                    da[r * d + c] += f * g[s * d + c];
                                }
                            }
                        }
                        Reduce::Max => {
                            for (k, &r) in argmax.iter().enumerate() {
                                if r != usize::MAX {
                                    da[r * d + k % d] += g[k];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *input, da);
                }
                Op::Propagate { input, src, dst, coef } => {
                    let ta = &self.nodes[input.0].value;
                    let d = ta.cols;
                    let mut da = vec![0.0; ta.data.len()];
                    for e in 0..src.len() {
                        let (s, u, w) = (src[e], dst[e], coef[e]);
                        for c in 0..d {
                            da[s * d + c] += w * g[u * d + c];
                        }
                    }
                    accumulate(&mut grads, *input, da);
                }
                Op::ScaleRows(a, f) => {
                    let d = node.value.cols;
                    let da = (0..g.len()).map(|k| g[k] * f[k / d]).collect();
                    accumulate(&mut grads, *a, da);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let d = y.cols;
                    let mut da = vec![0.0; g.len()];
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for c in 0..d {
                            da[r * d + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let d = y.cols;
                    let mut da = vec![0.0; g.len()];
                    for r in 0..y.rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let gs: f64 = gr.iter().sum();
                        for c in 0..d {
                            da[r * d + c] = gr[c] - y.at(r, c).exp() * gs;
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Pick(a, cols) => {
                    let ta = &self.nodes[a.0].value;
                    let mut da = vec![0.0; ta.data.len()];
                    for (r, &c) in cols.iter().enumerate() {
                        da[r * ta.cols + c] += g[r];
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.data.len();
                    accumulate(&mut grads, *a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.nodes[a.0].value.data.len();
                    accumulate(&mut grads, *a, vec![g[0] / n as f64; n]);
                }
                Op::MeanRows(a) => {
                    let ta = &self.nodes[a.0].value;
                    let inv = 1.0 / ta.rows as f64;
                    let da = (0..ta.data.len()).map(|k| g[k % ta.cols] * inv).collect();
                    accumulate(&mut grads, *a, da);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(delta),
    }
}
