//! Reverse-mode differentiation over a dynamically built operation list.
//!
//! A [`Graph`] is rebuilt for every utterance. Nodes are appended in
//! evaluation order, so the node list is already topologically sorted and
//! [`Graph::backward`] is a single reverse sweep.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, logsumexp, matmul_dims, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Row(Var, usize),
    SelectRows(Var, Vec<usize>),
    Stack(Vec<Var>),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Sum(Var),
    Pick(Var, usize),
    LogSoftmax(Var),
    Softmax(Var),
    LogSumExp(Var),
    Reshape(Var),
    LstmPointwise(Var, Var),
    Conv2d { x: Var, w: Var, b: Var },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    ChannelsToFrames(Var),
    CtcInit { lp: Var, ext: Arc<[usize]> },
    CtcStep { alpha: Var, lp: Var, ext: Arc<[usize]> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Can `ext[s]` be reached from `ext[s - 2]` by skipping the blank between them?
fn ctc_skip_allowed(ext: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input (no gradient is propagated into it).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Named trainable leaf.
    pub fn param(&mut self, name: &str, t: Tensor) -> Var {
        let v = self.push(t, Op::Leaf, true);
        self.params.push((name.to_string(), v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n, shape) = matmul_dims(self.shape(a), self.shape(b))?;
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, m, k, n }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, data).expect("same shape"), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds vector `b` to every row of `a` (the only broadcast supported).
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(a).cols();
        if self.shape(b) != [n] || self.value(a).rank() == 0 {
            return Err(Error::dim(format!(
                "bias {:?} does not match rows of {:?}",
                self.shape(b),
                self.shape(a)
            )));
        }
        let bias = self.value(b).data();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, &bv) in row.iter_mut().zip(bias) {
                *x += bv;
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddBias(a, b), rg))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data).expect("same shape"), op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || i >= t.rows() {
            return Err(Error::dim(format!("row {i} of {:?}", t.shape())));
        }
        let v = Tensor::vector(t.row(i).to_vec());
        let rg = self.rg(a);
        Ok(self.push(v, Op::Row(a, i), rg))
    }

    pub fn select_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || idx.iter().any(|&i| i >= t.rows()) {
            return Err(Error::dim(format!("row selection out of range for {:?}", t.shape())));
        }
        let cols = t.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in &idx {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(idx.len(), cols, data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SelectRows(a, idx), rg))
    }

    /// Stacks equally long vectors into a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows.first().ok_or_else(|| Error::arg("stack of zero rows"))?;
        let n = self.value(*first).len();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            let t = self.value(r);
            if t.rank() != 1 || t.len() != n {
                return Err(Error::dim(format!("stack row {:?}, expected [{n}]", t.shape())));
            }
            data.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(rows.len(), n, data)?;
        let rg = rows.iter().any(|&r| self.rg(r));
        Ok(self.push(out, Op::Stack(rows.to_vec()), rg))
    }

    /// Concatenates scalars and vectors into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() > 1 {
                return Err(Error::dim(format!("concat of rank-{} tensor", t.rank())));
            }
            data.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), rg))
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 1 || start + len > t.len() {
            return Err(Error::dim(format!("slice {start}+{len} of {:?}", t.shape())));
        }
        let v = Tensor::vector(t.data()[start..start + len].to_vec());
        let rg = self.rg(a);
        Ok(self.push(v, Op::Slice(a, start), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Single element (by flat index) as a scalar.
    pub fn pick(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = self.value(a);
        let x = *t
            .data()
            .get(i)
            .ok_or_else(|| Error::dim(format!("index {i} out of range for {:?}", t.shape())))?;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(x), Op::Pick(a, i), rg))
    }

    /// Row-wise log-softmax over the last dimension.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.cols();
        let mut data = Vec::with_capacity(t.len());
        for row in t.data().chunks(n) {
            let lse = logsumexp(row);
            data.extend(row.iter().map(|x| x - lse));
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data).expect("same shape"), Op::LogSoftmax(a), rg)
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::arg("softmax of an empty tensor"));
        }
        let n = t.cols();
        let mut data = Vec::with_capacity(t.len());
        for row in t.data().chunks(n) {
            data.extend(super::tensor::softmax(row)?);
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, data)?, Op::Softmax(a), rg))
    }

    pub fn logsumexp(&mut self, a: Var) -> Var {
        let s = logsumexp(self.value(a).data());
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::LogSumExp(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// LSTM gate nonlinearities and state update.
    ///
    /// `z` holds the pre-activations `[i; f; g; o]` (width `4H`), `c` the
    /// previous cell. The output is `[h; c']` (width `2H`).
    pub fn lstm_pointwise(&mut self, z: Var, c: Var) -> Result<Var> {
        let h = self.value(c).len();
        if self.shape(z) != [4 * h] || self.value(c).rank() != 1 {
            return Err(Error::dim(format!(
                "lstm gates {:?} do not match cell {:?}",
                self.shape(z),
                self.shape(c)
            )));
        }
        let zv = self.value(z).data();
        let cv = self.value(c).data();
        let mut out = vec![0.0; 2 * h];
        for j in 0..h {
            let i = sigmoid(zv[j]);
            let f = sigmoid(zv[h + j]);
            let g = zv[2 * h + j].tanh();
            let o = sigmoid(zv[3 * h + j]);
            let cn = f * cv[j] + i * g;
            out[j] = o * cn.tanh();
            out[h + j] = cn;
        }
        let rg = self.rg(z) || self.rg(c);
        Ok(self.push(Tensor::vector(out), Op::LstmPointwise(z, c), rg))
    }

    /// 3×3 convolution with zero padding 1 and stride 1.
    ///
    /// `x` is `[Cin × T × F]`, `w` is `[Cout × Cin × 3 × 3]`, `b` is `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != 3 || ws[3] != 3 {
            return Err(Error::dim(format!("conv2d input {:?} with kernel {:?}", xs, ws)));
        }
        if self.shape(b) != [ws[0]] {
            return Err(Error::dim(format!("conv2d bias {:?} for kernel {:?}", self.shape(b), ws)));
        }
        let (ci, t, f) = (xs[0], xs[1], xs[2]);
        let co = ws[0];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; co * t * f];
        for o in 0..co {
            let plane = &mut out[o * t * f..(o + 1) * t * f];
            plane.iter_mut().for_each(|v| *v = bv[o]);
            for i in 0..ci {
                for dt in 0..3 {
                    for df in 0..3 {
                        let wk = wv[((o * ci + i) * 3 + dt) * 3 + df];
                        for tt in 0..t {
                            let st = tt + dt;
                            if st < 1 || st > t {
                                continue;
                            }
                            let src = &xv[(i * t + st - 1) * f..(i * t + st) * f];
                            let dst = &mut plane[tt * f..(tt + 1) * f];
                            for ff in 0..f {
                                let sf = ff + df;
                                if sf >= 1 && sf <= f {
                                    dst[ff] += wk * src[sf - 1];
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(vec![co, t, f], out)?, Op::Conv2d { x, w, b }, rg))
    }

    /// 2×2 max pooling over time and frequency; odd trailing rows/columns
    /// form their own (smaller) window, so sizes become `ceil(n / 2)`.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::dim(format!("max_pool2 input {:?}", xs)));
        }
        let (c, t, f) = (xs[0], xs[1], xs[2]);
        let (t2, f2) = (t.div_ceil(2), f.div_ceil(2));
        let xv = self.value(x).data();
        let mut out = vec![0.0; c * t2 * f2];
        let mut argmax = vec![0; c * t2 * f2];
        for ch in 0..c {
            for i in 0..t2 {
                for j in 0..f2 {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for tt in 2 * i..(2 * i + 2).min(t) {
                        for ff in 2 * j..(2 * j + 2).min(f) {
                            let idx = (ch * t + tt) * f + ff;
                            if xv[idx] > best {
                                best = xv[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (ch * t2 + i) * f2 + j;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![c, t2, f2], out)?, Op::MaxPool2 { x, argmax }, rg))
    }

    /// `[C × T × F]` → `[T × (C·F)]`, channel-major within a frame.
    pub fn channels_to_frames(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::dim(format!("channels_to_frames input {:?}", xs)));
        }
        let (c, t, f) = (xs[0], xs[1], xs[2]);
        let xv = self.value(x).data();
        let mut out = vec![0.0; t * c * f];
        for ch in 0..c {
            for tt in 0..t {
                out[tt * c * f + ch * f..tt * c * f + (ch + 1) * f]
                    .copy_from_slice(&xv[(ch * t + tt) * f..(ch * t + tt + 1) * f]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![t, c * f], out)?, Op::ChannelsToFrames(x), rg))
    }

    /// First column of the CTC forward trellis. `ext` is the blank-augmented
    /// label sequence (blank id at even positions), `lp` one frame of log-probs.
    pub fn ctc_init(&mut self, lp: Var, ext: Arc<[usize]>) -> Var {
        let row = self.value(lp).data();
        let mut alpha = vec![f64::NEG_INFINITY; ext.len()];
        alpha[0] = row[ext[0]];
        if ext.len() > 1 {
            alpha[1] = row[ext[1]];
        }
        let rg = self.rg(lp);
        self.push(Tensor::vector(alpha), Op::CtcInit { lp, ext }, rg)
    }

    /// One frame of the CTC forward recursion in log space.
    pub fn ctc_step(&mut self, alpha: Var, lp: Var, ext: Arc<[usize]>) -> Var {
        let prev = self.value(alpha).data();
        let row = self.value(lp).data();
        let blank = ext[0];
        let mut out = vec![f64::NEG_INFINITY; ext.len()];
        for s in 0..ext.len() {
            let mut terms = [prev[s], f64::NEG_INFINITY, f64::NEG_INFINITY];
            if s >= 1 {
                terms[1] = prev[s - 1];
            }
            if ctc_skip_allowed(&ext, s, blank) {
                terms[2] = prev[s - 2];
            }
            out[s] = logsumexp(&terms) + row[ext[s]];
        }
        let rg = self.rg(alpha) || self.rg(lp);
        self.push(Tensor::vector(out), Op::CtcStep { alpha, lp, ext }, rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.shape(loss), 1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                if self.rg(*a) {
                    let bv = self.value(*b).data();
                    self.acc(grads, *a, |d| gemm_nt_acc(gd, bv, d, *m, *k, *n));
                }
                if self.rg(*b) {
                    let av = self.value(*a).data();
                    self.acc(grads, *b, |d| gemm_tn_acc(av, gd, d, *m, *k, *n));
                }
            }
            Op::Add(a, b) => {
                self.acc_add(grads, *a, gd, 1.0);
                self.acc_add(grads, *b, gd, 1.0);
            }
            Op::Sub(a, b) => {
                self.acc_add(grads, *a, gd, 1.0);
                self.acc_add(grads, *b, gd, -1.0);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(gd).zip(bv) {
                        *d += g * y;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(gd).zip(av) {
                        *d += g * x;
                    }
                });
            }
            Op::AddBias(a, b) => {
                self.acc_add(grads, *a, gd, 1.0);
                let n = self.value(*b).len();
                self.acc(grads, *b, |d| {
                    for row in gd.chunks(n) {
                        for (d, &g) in d.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                });
            }
            Op::Scale(a, s) => self.acc_add(grads, *a, gd, *s),
            Op::Sigmoid(a) => self.acc(grads, *a, |d| {
                for ((d, &g), &y) in d.iter_mut().zip(gd).zip(out.data()) {
                    *d += g * y * (1.0 - y);
                }
            }),
            Op::Tanh(a) => self.acc(grads, *a, |d| {
                for ((d, &g), &y) in d.iter_mut().zip(gd).zip(out.data()) {
                    *d += g * (1.0 - y * y);
                }
            }),
            Op::Relu(a) => self.acc(grads, *a, |d| {
                for ((d, &g), &y) in d.iter_mut().zip(gd).zip(out.data()) {
                    if y > 0.0 {
                        *d += g;
                    }
                }
            }),
            Op::Row(a, i) => {
                let n = out.len();
                self.acc(grads, *a, |d| {
                    for (d, &g) in d[i * n..(i + 1) * n].iter_mut().zip(gd) {
                        *d += g;
                    }
                });
            }
            Op::SelectRows(a, idx) => {
                let n = out.cols();
                self.acc(grads, *a, |d| {
                    for (r, &i) in idx.iter().enumerate() {
                        for (d, &g) in d[i * n..(i + 1) * n].iter_mut().zip(&gd[r * n..]) {
                            *d += g;
                        }
                    }
                });
            }
            Op::Stack(rows) => {
                let n = out.cols();
                for (r, &v) in rows.iter().enumerate() {
                    self.acc_add(grads, v, &gd[r * n..(r + 1) * n], 1.0);
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc_add(grads, p, &gd[off..off + len], 1.0);
                    off += len;
                }
            }
            Op::Slice(a, start) => {
                let len = out.len();
                self.acc(grads, *a, |d| {
                    for (d, &g) in d[*start..start + len].iter_mut().zip(gd) {
                        *d += g;
                    }
                });
            }
            Op::Sum(a) => self.acc(grads, *a, |d| d.iter_mut().for_each(|d| *d += gd[0])),
            Op::Pick(a, i) => self.acc(grads, *a, |d| d[*i] += gd[0]),
            Op::LogSoftmax(a) => {
                let n = out.cols();
                self.acc(grads, *a, |d| {
                    for ((d, g), y) in d.chunks_mut(n).zip(gd.chunks(n)).zip(out.data().chunks(n)) {
                        let gs: f64 = g.iter().sum();
                        for j in 0..n {
                            d[j] += g[j] - y[j].exp() * gs;
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let n = out.cols();
                self.acc(grads, *a, |d| {
                    for ((d, g), y) in d.chunks_mut(n).zip(gd.chunks(n)).zip(out.data().chunks(n)) {
                        let gy: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
                        for j in 0..n {
                            d[j] += y[j] * (g[j] - gy);
                        }
                    }
                });
            }
            Op::LogSumExp(a) => {
                let lse = out.item();
                if lse.is_finite() {
                    let xv = self.value(*a).data();
                    self.acc(grads, *a, |d| {
                        for (d, &x) in d.iter_mut().zip(xv) {
                            *d += gd[0] * (x - lse).exp();
                        }
                    });
                }
            }
            Op::Reshape(a) => self.acc_add(grads, *a, gd, 1.0),
            Op::LstmPointwise(z, c) => {
                let h = out.len() / 2;
                let zv = self.value(*z).data();
                let cv = self.value(*c).data();
                let mut dz = vec![0.0; 4 * h];
                let mut dc = vec![0.0; h];
                for j in 0..h {
                    let i = sigmoid(zv[j]);
                    let f = sigmoid(zv[h + j]);
                    let gg = zv[2 * h + j].tanh();
                    let o = sigmoid(zv[3 * h + j]);
                    let tc = out.data()[h + j].tanh();
                    let gh = gd[j];
                    let dcn = gd[h + j] + gh * o * (1.0 - tc * tc);
                    dz[j] = dcn * gg * i * (1.0 - i);
                    dz[h + j] = dcn * cv[j] * f * (1.0 - f);
                    dz[2 * h + j] = dcn * i * (1.0 - gg * gg);
                    dz[3 * h + j] = gh * tc * o * (1.0 - o);
                    dc[j] = dcn * f;
                }
                self.acc_add(grads, *z, &dz, 1.0);
                self.acc_add(grads, *c, &dc, 1.0);
            }
            Op::Conv2d { x, w, b } => {
                let xs = self.shape(*x);
                let (ci, t, f) = (xs[0], xs[1], xs[2]);
                let co = self.shape(*w)[0];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if self.rg(*b) {
                    self.acc(grads, *b, |d| {
                        for o in 0..co {
                            d[o] += gd[o * t * f..(o + 1) * t * f].iter().sum::<f64>();
                        }
                    });
                }
                let conv_back = |dx: Option<&mut [f64]>, dw: Option<&mut [f64]>| {
                    let (mut dx, mut dw) = (dx, dw);
                    for o in 0..co {
                        for i in 0..ci {
                            for dt in 0..3 {
                                for df in 0..3 {
                                    let widx = ((o * ci + i) * 3 + dt) * 3 + df;
                                    let wk = wv[widx];
                                    let mut wacc = 0.0;
                                    for tt in 0..t {
                                        let st = tt + dt;
                                        if st < 1 || st > t {
                                            continue;
                                        }
                                        let src = (i * t + st - 1) * f;
                                        let gsrc = (o * t + tt) * f;
                                        for ff in 0..f {
                                            let sf = ff + df;
                                            if sf >= 1 && sf <= f {
                                                let gval = gd[gsrc + ff];
                                                wacc += gval * xv[src + sf - 1];
                                                if let Some(dx) = dx.as_deref_mut() {
                                                    dx[src + sf - 1] += gval * wk;
                                                }
                                            }
                                        }
                                    }
                                    if let Some(dw) = dw.as_deref_mut() {
                                        dw[widx] += wacc;
                                    }
                                }
                            }
                        }
                    }
                };
                let mut dx = self.rg(*x).then(|| vec![0.0; xv.len()]);
                let mut dw = self.rg(*w).then(|| vec![0.0; wv.len()]);
                conv_back(dx.as_deref_mut(), dw.as_deref_mut());
                if let Some(dx) = dx {
                    self.acc_add(grads, *x, &dx, 1.0);
                }
                if let Some(dw) = dw {
                    self.acc_add(grads, *w, &dw, 1.0);
                }
            }
            Op::MaxPool2 { x, argmax } => self.acc(grads, *x, |d| {
                for (&src, &g) in argmax.iter().zip(gd) {
                    d[src] += g;
                }
            }),
            Op::ChannelsToFrames(x) => {
                let xs = self.shape(*x);
                let (c, t, f) = (xs[0], xs[1], xs[2]);
                self.acc(grads, *x, |d| {
                    for ch in 0..c {
                        for tt in 0..t {
                            for ff in 0..f {
                                d[(ch * t + tt) * f + ff] += gd[tt * c * f + ch * f + ff];
                            }
                        }
                    }
                });
            }
            Op::CtcInit { lp, ext } => self.acc(grads, *lp, |d| {
                d[ext[0]] += gd[0];
                if ext.len() > 1 {
                    d[ext[1]] += gd[1];
                }
            }),
            Op::CtcStep { alpha, lp, ext } => {
                let prev = self.value(*alpha).data();
                let blank = ext[0];
                let mut dprev = vec![0.0; prev.len()];
                let mut dlp = vec![0.0; self.value(*lp).len()];
                for s in 0..ext.len() {
                    if !out.data()[s].is_finite() || gd[s] == 0.0 {
                        continue;
                    }
                    dlp[ext[s]] += gd[s];
                    let mut terms = [(s, prev[s]), (s, f64::NEG_INFINITY), (s, f64::NEG_INFINITY)];
                    if s >= 1 {
                        terms[1] = (s - 1, prev[s - 1]);
                    }
                    if ctc_skip_allowed(ext, s, blank) {
                        terms[2] = (s - 2, prev[s - 2]);
                    }
                    let lse = logsumexp(&[terms[0].1, terms[1].1, terms[2].1]);
                    for (j, v) in terms {
                        if v.is_finite() {
                            dprev[j] += gd[s] * (v - lse).exp();
                        }
                    }
                }
                self.acc_add(grads, *alpha, &dprev, 1.0);
                self.acc_add(grads, *lp, &dlp, 1.0);
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.shape(v)));
        f(slot.data_mut());
    }

    fn acc_add(&self, grads: &mut [Option<Tensor>], v: Var, g: &[f64], s: f64) {
        self.acc(grads, v, |d| {
            for (d, &g) in d.iter_mut().zip(g) {
                *d += s * g;
            }
        });
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of every named parameter; unreachable ones are all-zero.
    pub fn params(&self, g: &Graph) -> BTreeMap<String, Tensor> {
        g.params
            .iter()
            .map(|(name, v)| {
                let t = self
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.shape(*v)));
                (name.clone(), t)
            })
            .collect()
    }
}
