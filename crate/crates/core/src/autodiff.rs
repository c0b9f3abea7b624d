//! Reverse-mode automatic differentiation over small dense `f64` matrices.
//!
//! Every operation is evaluated eagerly and appended to a [`Tape`]; calling
//! [`Tape::backward`] on a scalar node walks the tape in reverse and
//! accumulates gradients. Parameters enter the tape through
//! [`Tape::param`], which binds a leaf to a [`ParamId`] so gradients can be
//! collected per parameter afterwards.
//!
//! [`Var::stop_gradient`] cuts gradient flow. In *frozen* mode (see
//! [`Tape::with_frozen`]) the n-th stop-gradient call returns a previously
//! recorded value instead of the live one, which lets finite-difference
//! checks hold the stopped pathways fixed exactly like the analytic pass.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data does not match shape {rows}x{cols}");
        Self { rows, cols, data }
    }

    /// A `1 x n` row vector.
    pub fn row(data: Vec<f64>) -> Self {
        Self { rows: 1, cols: data.len(), data }
    }

    pub fn scalar(x: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![x] }
    }

    /// Stack equal-length rows into a matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch {:?} x {:?}", self.shape(), other.shape());
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor { rows: m, cols: n, data: out }
    }

    /// `self^T * other` without materializing the transpose.
    fn t_matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.rows, other.rows);
        let (k, m, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let b_row = &other.data[p * n..(p + 1) * n];
            for i in 0..m {
                let a = self.data[p * m + i];
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out[i * n..(i + 1) * n];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor { rows: m, cols: n, data: out }
    }

    /// `self * other^T` without materializing the transpose.
    fn matmul_t(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.cols);
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        }
        Tensor { rows: m, cols: n, data: out }
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape(), "gradient shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// How a row is protected against a vanishing L2 norm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NormGuard {
    /// `x / (|x| + eps)`
    Additive(f64),
    /// `x / max(|x|, eps)`
    Floor(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    SubRow(usize, usize),
    MulScalar(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    LnFloor(usize, f64),
    Square(usize),
    Transpose(usize),
    Reshape(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    GatherCols(usize, Vec<Option<usize>>),
    GatherRows(usize, Vec<usize>),
    SumAll(usize),
    MeanRows(usize),
    NormalizeRows(usize, NormGuard),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    DivMaxAbs(usize),
    MinAll(usize),
    SmoothL1(usize, Tensor),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// An append-only computation record.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, usize>>,
    stopped: RefCell<Vec<Tensor>>,
    frozen: Option<Vec<Tensor>>,
    frozen_cursor: Cell<usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    node_grads: Vec<Option<Tensor>>,
    param_nodes: HashMap<ParamId, usize>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.node_grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient for a parameter, or `None` if it did not take part.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.param_nodes.get(&id).and_then(|&n| self.node_grads[n].as_ref())
    }

    /// Accumulate parameter gradients into `acc`, scaled by `weight`.
    pub fn accumulate_into(&self, acc: &mut ParamGrads, weight: f64) {
        for (&pid, &node) in &self.param_nodes {
            if let Some(g) = &self.node_grads[node] {
                let slot = &mut acc.grads[pid.index()];
                for (a, b) in slot.data.iter_mut().zip(&g.data) {
                    *a += weight * b;
                }
            }
        }
    }
}

/// Dense per-parameter gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamGrads {
    pub grads: Vec<Tensor>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { grads: store.iter().map(|(_, p)| Tensor::zeros(p.value.rows, p.value.cols)).collect() }
    }

    pub fn add(&mut self, other: &ParamGrads) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.index()]
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(256)),
            params: RefCell::new(HashMap::new()),
            stopped: RefCell::new(Vec::new()),
            frozen: None,
            frozen_cursor: Cell::new(0),
        }
    }

    /// A tape whose stop-gradient nodes replay `frozen` in call order.
    pub fn with_frozen(frozen: Vec<Tensor>) -> Self {
        Self { frozen: Some(frozen), ..Self::new() }
    }

    /// Values recorded at every stop-gradient call so far, in call order.
    pub fn stopped_values(&self) -> Vec<Tensor> {
        self.stopped.borrow().clone()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn val(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn row(&self, data: Vec<f64>) -> Var<'_> {
        self.constant(Tensor::row(data))
    }

    pub fn scalar(&self, x: f64) -> Var<'_> {
        self.constant(Tensor::scalar(x))
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let v = self.push(store.value(id).clone(), Op::Leaf);
        self.params.borrow_mut().insert(id, v.id);
        v
    }

    /// Concatenate along columns; all parts share the row count.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        let value = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].id].value.rows;
            let cols: usize = parts.iter().map(|p| nodes[p.id].value.cols).sum();
            let mut out = Tensor::zeros(rows, cols);
            for r in 0..rows {
                let mut c0 = 0;
                for p in parts {
                    let t = &nodes[p.id].value;
                    assert_eq!(t.rows, rows, "concat_cols row mismatch");
                    out.data[r * cols + c0..r * cols + c0 + t.cols].copy_from_slice(t.row_slice(r));
                    c0 += t.cols;
                }
            }
            out
        };
        self.push(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
    }

    /// Concatenate along rows; all parts share the column count.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        let value = {
            let nodes = self.nodes.borrow();
            let cols = nodes[parts[0].id].value.cols;
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let t = &nodes[p.id].value;
                assert_eq!(t.cols, cols, "concat_rows column mismatch");
                data.extend_from_slice(&t.data);
                rows += t.rows;
            }
            Tensor::from_vec(rows, cols, data)
        };
        self.push(value, Op::ConcatRows(parts.iter().map(|p| p.id).collect()))
    }

    /// Reverse sweep from the scalar `root`.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.shape(), (1, 1), "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.id] = Some(Tensor::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
            match &mut grads[id] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=root.id).rev() {
            let Some(g) = grads[i].clone() else { continue };
            let node = &nodes[i];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    acc(&mut grads, *a, g.matmul_t(bv));
                    acc(&mut grads, *b, av.t_matmul(&g));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    acc(&mut grads, *a, g.zip(bv, |g, b| g * b));
                    acc(&mut grads, *b, g.zip(av, |g, a| g * a));
                }
                Op::AddRow(a, r) | Op::SubRow(a, r) => {
                    let sign = if matches!(node.op, Op::AddRow(..)) { 1.0 } else { -1.0 };
                    let mut gr = Tensor::zeros(1, g.cols);
                    for row in 0..g.rows {
                        for (o, x) in gr.data.iter_mut().zip(g.row_slice(row)) {
                            *o += sign * x;
                        }
                    }
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *r, gr);
                }
                Op::MulScalar(a, s) => {
                    let av = &nodes[*a].value;
                    let sv = nodes[*s].value.data[0];
                    let gs: f64 = g.data.iter().zip(&av.data).map(|(g, a)| g * a).sum();
                    acc(&mut grads, *a, g.map(|x| x * sv));
                    acc(&mut grads, *s, Tensor::scalar(gs));
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.map(|x| x * c)),
                Op::Offset(a) => acc(&mut grads, *a, g),
                Op::Sigmoid(a) => acc(&mut grads, *a, g.zip(y, |g, y| g * y * (1.0 - y))),
                Op::Tanh(a) => acc(&mut grads, *a, g.zip(y, |g, y| g * (1.0 - y * y))),
                Op::Relu(a) => {
                    let xv = &nodes[*a].value;
                    acc(&mut grads, *a, g.zip(xv, |g, x| if x > 0.0 { g } else { 0.0 }));
                }
                Op::Exp(a) => acc(&mut grads, *a, g.zip(y, |g, y| g * y)),
                Op::LnFloor(a, eps) => {
                    let xv = &nodes[*a].value;
                    let eps = *eps;
                    acc(&mut grads, *a, g.zip(xv, |g, x| if x > eps { g / x } else { 0.0 }));
                }
                Op::Square(a) => {
                    let xv = &nodes[*a].value;
                    acc(&mut grads, *a, g.zip(xv, |g, x| 2.0 * g * x));
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::Reshape(a) => {
                    let (r, c) = nodes[*a].value.shape();
                    acc(&mut grads, *a, Tensor::from_vec(r, c, g.data));
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for &p in parts {
                        let pc = nodes[p].value.cols;
                        let mut gp = Tensor::zeros(g.rows, pc);
                        for r in 0..g.rows {
                            gp.data[r * pc..(r + 1) * pc].copy_from_slice(&g.row_slice(r)[c0..c0 + pc]);
                        }
                        acc(&mut grads, p, gp);
                        c0 += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = nodes[p].value.len();
                        let (r, c) = nodes[p].value.shape();
                        acc(&mut grads, p, Tensor::from_vec(r, c, g.data[off..off + n].to_vec()));
                        off += n;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = nodes[*a].value.shape();
                    let mut ga = Tensor::zeros(r, c);
                    for row in 0..r {
                        ga.data[row * c + start..row * c + start + g.cols].copy_from_slice(g.row_slice(row));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::GatherCols(a, idx) => {
                    let (r, c) = nodes[*a].value.shape();
                    let mut ga = Tensor::zeros(r, c);
                    for row in 0..r {
                        for (j, ix) in idx.iter().enumerate() {
                            if let Some(ix) = ix {
                                ga.data[row * c + ix] += g.get(row, j);
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let (r, c) = nodes[*a].value.shape();
                    let mut ga = Tensor::zeros(r, c);
                    for (j, &ix) in idx.iter().enumerate() {
                        for (o, x) in ga.data[ix * c..(ix + 1) * c].iter_mut().zip(g.row_slice(j)) {
                            *o += x;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let (r, c) = nodes[*a].value.shape();
                    acc(&mut grads, *a, Tensor::from_vec(r, c, vec![g.data[0]; r * c]));
                }
                Op::MeanRows(a) => {
                    let (r, c) = nodes[*a].value.shape();
                    let mut ga = Tensor::zeros(r, c);
                    for row in 0..r {
                        for col in 0..c {
                            ga.data[row * c + col] = g.data[col] / r as f64;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::NormalizeRows(a, guard) => {
                    let xv = &nodes[*a].value;
                    let mut ga = Tensor::zeros(xv.rows, xv.cols);
                    for row in 0..xv.rows {
                        let x = xv.row_slice(row);
                        let gr = g.row_slice(row);
                        let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let xg: f64 = x.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let out = &mut ga.data[row * xv.cols..(row + 1) * xv.cols];
                        match *guard {
                            NormGuard::Additive(eps) => {
                                let d = n + eps;
                                let k = if n > 0.0 { xg / (d * d * n) } else { 0.0 };
                                for ((o, &xi), &gi) in out.iter_mut().zip(x).zip(gr) {
                                    *o = gi / d - xi * k;
                                }
                            }
                            NormGuard::Floor(eps) => {
                                if n > eps {
                                    let k = xg / (n * n * n);
                                    for ((o, &xi), &gi) in out.iter_mut().zip(x).zip(gr) {
                                        *o = gi / n - xi * k;
                                    }
                                } else {
                                    for (o, &gi) in out.iter_mut().zip(gr) {
                                        *o = gi / eps;
                                    }
                                }
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let mut ga = Tensor::zeros(y.rows, y.cols);
                    for row in 0..y.rows {
                        let yr = y.row_slice(row);
                        let gr = g.row_slice(row);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (c, (&yi, &gi)) in yr.iter().zip(gr).enumerate() {
                            ga.data[row * y.cols + c] = yi * (gi - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let mut ga = Tensor::zeros(y.rows, y.cols);
                    for row in 0..y.rows {
                        let yr = y.row_slice(row);
                        let gr = g.row_slice(row);
                        let gsum: f64 = gr.iter().sum();
                        for (c, (&yi, &gi)) in yr.iter().zip(gr).enumerate() {
                            ga.data[row * y.cols + c] = gi - yi.exp() * gsum;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::DivMaxAbs(a) => {
                    let xv = &nodes[*a].value;
                    let (k, m) = argmax_abs(&xv.data);
                    if m <= 1.0 {
                        acc(&mut grads, *a, g);
                    } else {
                        let sign = xv.data[k].signum();
                        let gy: f64 = g.data.iter().zip(&xv.data).map(|(g, x)| g * x).sum();
                        let mut ga = g.map(|gi| gi / m);
                        ga.data[k] -= sign * gy / (m * m);
                        acc(&mut grads, *a, ga);
                    }
                }
                Op::MinAll(a) => {
                    let xv = &nodes[*a].value;
                    let k = argmin(&xv.data);
                    let mut ga = Tensor::zeros(xv.rows, xv.cols);
                    ga.data[k] = g.data[0];
                    acc(&mut grads, *a, ga);
                }
                Op::SmoothL1(a, target) => {
                    let xv = &nodes[*a].value;
                    let gd = xv.zip(target, |p, t| {
                        let d = p - t;
                        if d.abs() < 1.0 {
                            d
                        } else {
                            d.signum()
                        }
                    });
                    acc(&mut grads, *a, gd.map(|x| x * g.data[0]));
                }
            }
        }
        Gradients { node_grads: grads, param_nodes: self.params.borrow().clone() }
    }
}

/// First index of the largest absolute value, and that value.
pub(crate) fn argmax_abs(xs: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in xs.iter().enumerate() {
        if x.abs() > best.1 {
            best = (i, x.abs());
        }
    }
    best
}

/// First index of the smallest value.
pub(crate) fn argmin(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x < xs[best] {
            best = i;
        }
    }
    best
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.val(self.id).clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.val(self.id))
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.tape.val(self.id).data.clone()
    }

    pub fn scalar(&self) -> f64 {
        let v = self.tape.val(self.id);
        assert_eq!(v.len(), 1, "not a scalar");
        v.data[0]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.val(self.id).shape()
    }

    fn unary(self, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'t> {
        let value = f(&self.tape.val(self.id));
        self.tape.push(value, op)
    }

    fn binary(self, other: Var<'t>, op: Op, f: impl FnOnce(&Tensor, &Tensor) -> Tensor) -> Var<'t> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value, &nodes[other.id].value)
        };
        self.tape.push(value, op)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::MatMul(self.id, other.id), |a, b| a.matmul(b))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Add(self.id, other.id), |a, b| a.zip(b, |x, y| x + y))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| a.zip(b, |x, y| x - y))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| a.zip(b, |x, y| x * y))
    }

    /// Add a `1 x n` row to every row.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        self.binary(row, Op::AddRow(self.id, row.id), |a, r| broadcast_row(a, r, 1.0))
    }

    /// Subtract a `1 x n` row from every row.
    pub fn sub_row(self, row: Var<'t>) -> Var<'t> {
        self.binary(row, Op::SubRow(self.id, row.id), |a, r| broadcast_row(a, r, -1.0))
    }

    /// Multiply every entry by a `1 x 1` variable.
    pub fn mul_scalar(self, s: Var<'t>) -> Var<'t> {
        self.binary(s, Op::MulScalar(self.id, s.id), |a, s| {
            assert_eq!(s.len(), 1, "mul_scalar expects a 1x1 factor");
            let k = s.data[0];
            a.map(|x| x * k)
        })
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |a| a.map(|x| x * c))
    }

    pub fn offset(self, c: f64) -> Var<'t> {
        self.unary(Op::Offset(self.id), |a| a.map(|x| x + c))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), |a| a.map(sigmoid))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), |a| a.map(f64::tanh))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |a| a.map(|x| x.max(0.0)))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), |a| a.map(f64::exp))
    }

    /// `ln(max(x, eps))`; zero gradient where the floor is active.
    pub fn ln_floor(self, eps: f64) -> Var<'t> {
        self.unary(Op::LnFloor(self.id, eps), |a| a.map(|x| x.max(eps).ln()))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.id), |a| a.map(|x| x * x))
    }

    pub fn transpose(self) -> Var<'t> {
        self.unary(Op::Transpose(self.id), Tensor::transpose)
    }

    pub fn reshape(self, rows: usize, cols: usize) -> Var<'t> {
        self.unary(Op::Reshape(self.id), |a| Tensor::from_vec(rows, cols, a.data.clone()))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Var<'t> {
        self.unary(Op::SliceCols(self.id, start), |a| {
            assert!(start + len <= a.cols, "slice out of range");
            let mut out = Tensor::zeros(a.rows, len);
            for r in 0..a.rows {
                out.data[r * len..(r + 1) * len].copy_from_slice(&a.row_slice(r)[start..start + len]);
            }
            out
        })
    }

    /// Select columns; `None` entries produce zero columns.
    pub fn gather_cols(self, idx: Vec<Option<usize>>) -> Var<'t> {
        let value = {
            let a = self.tape.val(self.id);
            let mut out = Tensor::zeros(a.rows, idx.len());
            for r in 0..a.rows {
                for (j, ix) in idx.iter().enumerate() {
                    if let Some(ix) = ix {
                        out.data[r * idx.len() + j] = a.get(r, *ix);
                    }
                }
            }
            out
        };
        self.tape.push(value, Op::GatherCols(self.id, idx))
    }

    pub fn gather_rows(self, idx: Vec<usize>) -> Var<'t> {
        let value = {
            let a = self.tape.val(self.id);
            let mut data = Vec::with_capacity(idx.len() * a.cols);
            for &ix in &idx {
                data.extend_from_slice(a.row_slice(ix));
            }
            Tensor::from_vec(idx.len(), a.cols, data)
        };
        self.tape.push(value, Op::GatherRows(self.id, idx))
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(Op::SumAll(self.id), |a| Tensor::scalar(a.data.iter().sum()))
    }

    pub fn mean_rows(self) -> Var<'t> {
        self.unary(Op::MeanRows(self.id), |a| {
            let mut out = Tensor::zeros(1, a.cols);
            for r in 0..a.rows {
                for (o, x) in out.data.iter_mut().zip(a.row_slice(r)) {
                    *o += x;
                }
            }
            out.map(|x| x / a.rows as f64)
        })
    }

    pub fn normalize_rows(self, guard: NormGuard) -> Var<'t> {
        self.unary(Op::NormalizeRows(self.id, guard), |a| {
            let mut out = a.clone();
            for r in 0..a.rows {
                let n = a.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                let d = match guard {
                    NormGuard::Additive(eps) => n + eps,
                    NormGuard::Floor(eps) => n.max(eps),
                };
                for x in &mut out.data[r * a.cols..(r + 1) * a.cols] {
                    *x /= d;
                }
            }
            out
        })
    }

    pub fn softmax_rows(self) -> Var<'t> {
        self.unary(Op::SoftmaxRows(self.id), |a| {
            let mut out = a.clone();
            for r in 0..a.rows {
                let row = &mut out.data[r * a.cols..(r + 1) * a.cols];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - m).exp();
                    z += *x;
                }
                for x in row.iter_mut() {
                    *x /= z;
                }
            }
            out
        })
    }

    pub fn log_softmax_rows(self) -> Var<'t> {
        self.unary(Op::LogSoftmaxRows(self.id), |a| {
            let mut out = a.clone();
            for r in 0..a.rows {
                let row = &mut out.data[r * a.cols..(r + 1) * a.cols];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                for x in row.iter_mut() {
                    *x -= lse;
                }
            }
            out
        })
    }

    /// Divide by the largest absolute entry when that exceeds 1.
    pub fn div_max_abs(self) -> Var<'t> {
        self.unary(Op::DivMaxAbs(self.id), |a| {
            let (_, m) = argmax_abs(&a.data);
            if m > 1.0 {
                a.map(|x| x / m)
            } else {
                a.clone()
            }
        })
    }

    /// Smallest entry as a `1 x 1` node; ties resolve to the first.
    pub fn min(self) -> Var<'t> {
        self.unary(Op::MinAll(self.id), |a| Tensor::scalar(a.data[argmin(&a.data)]))
    }

    /// Summed smooth-L1 distance to a constant target.
    pub fn smooth_l1(self, target: Tensor) -> Var<'t> {
        let value = {
            let a = self.tape.val(self.id);
            assert_eq!(a.shape(), target.shape(), "smooth_l1 shape mismatch");
            Tensor::scalar(a.data.iter().zip(&target.data).map(|(p, t)| smooth_l1_term(p - t)).sum())
        };
        self.tape.push(value, Op::SmoothL1(self.id, target))
    }

    /// Cut gradient flow. In frozen mode the recorded replacement is returned.
    pub fn stop_gradient(self) -> Var<'t> {
        let tape = self.tape;
        let live = self.value();
        let value = match &tape.frozen {
            Some(frozen) => {
                let k = tape.frozen_cursor.get();
                tape.frozen_cursor.set(k + 1);
                let v = frozen.get(k).cloned().expect("frozen stop-gradient values exhausted");
                assert_eq!(v.shape(), live.shape(), "frozen value shape mismatch");
                v
            }
            None => live,
        };
        tape.stopped.borrow_mut().push(value.clone());
        tape.push(value, Op::Leaf)
    }
}

fn broadcast_row(a: &Tensor, r: &Tensor, sign: f64) -> Tensor {
    assert_eq!((1, a.cols), r.shape(), "row broadcast shape mismatch");
    let mut out = a.clone();
    for row in 0..a.rows {
        for (o, x) in out.data[row * a.cols..(row + 1) * a.cols].iter_mut().zip(&r.data) {
            *o += sign * x;
        }
    }
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn smooth_l1_term(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}
