//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every primitive records its inputs on a [`Tape`] and owns an analytic
//! vector-Jacobian product. Nodes are appended in evaluation order, so a
//! single reverse sweep over the node list accumulates gradients.

use super::tensor::{matmul_nt_acc, matmul_raw, matmul_tn_acc, transpose_raw, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Powf(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm(Var),
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    RowL2Norm(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    // per-op cache needed by the backward pass (layer-norm reciprocal std)
    aux: Vec<f64>,
}

/// Computation record for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn last_dim(t: &Tensor) -> (usize, usize) {
    let n = *t.shape().last().expect("tensor has at least one dimension");
    (t.numel() / n, n)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_aux(value, op, requires_grad, Vec::new())
    }

    fn push_aux(&mut self, value: Tensor, op: Op, requires_grad: bool, aux: Vec<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            aux,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds a leaf. Gradients are only accumulated for leaves created with
    /// `requires_grad = true` and for nodes depending on them.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v)
            .map(|g| Tensor::from_parts(self.shape(v).to_vec(), g.to_vec()))
    }

    // ---- elementwise binary -------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_parts(va.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let va = self.value(a);
        Tensor::from_parts(
            va.shape().to_vec(),
            va.data().iter().map(|&x| f(x)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// `x[m,n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2("add_row")?;
        if self.value(b).numel() != n {
            return Err(Error::dim("add_row", self.shape(x), self.shape(b)));
        }
        let bv = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for r in 0..m {
            for (o, bb) in data[r * n..(r + 1) * n].iter_mut().zip(bv) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::AddRow(x, b), rg))
    }

    /// `x[m,n] ⊙ g[n]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2("mul_row")?;
        if self.value(g).numel() != n {
            return Err(Error::dim("mul_row", self.shape(x), self.shape(g)));
        }
        let gv = self.value(g).data();
        let mut data = self.value(x).data().to_vec();
        for r in 0..m {
            for (o, gg) in data[r * n..(r + 1) * n].iter_mut().zip(gv) {
                *o *= gg;
            }
        }
        let rg = self.rg(x) || self.rg(g);
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::MulRow(x, g), rg))
    }

    /// `x[m,n] ⊙ c[m,1]` broadcast over columns.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2("mul_col")?;
        if self.value(c).numel() != m {
            return Err(Error::dim("mul_col", self.shape(x), self.shape(c)));
        }
        let cv = self.value(c).data();
        let mut data = self.value(x).data().to_vec();
        for r in 0..m {
            for o in data[r * n..(r + 1) * n].iter_mut() {
                *o *= cv[r];
            }
        }
        let rg = self.rg(x) || self.rg(c);
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::MulCol(x, c), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2("transpose")?;
        let data = transpose_raw(self.value(a).data(), m, n);
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![n, m], data), Op::Transpose(a), rg))
    }

    // ---- elementwise unary --------------------------------------------

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.map(a, |x| x * s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.map(a, |x| x + s);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, f64::exp);
        if !v.is_finite() {
            return Err(Error::numeric("exp", "overflow or non-finite input"));
        }
        let rg = self.rg(a);
        Ok(self.push(v, Op::Exp(a), rg))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self
            .value(a)
            .data()
            .iter()
            .find(|x| !(x.is_finite() && **x > 0.0))
        {
            return Err(Error::numeric("log", format!("input {x} outside (0, inf)")));
        }
        let v = self.map(a, f64::ln);
        let rg = self.rg(a);
        Ok(self.push(v, Op::Log(a), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::tanh);
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| {
            0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
        });
        let rg = self.rg(a);
        self.push(v, Op::Gelu(a), rg)
    }

    /// Elementwise `x^p`. Negative bases are rejected unless `p` is integral.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        if p.fract() != 0.0 && self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(Error::numeric(
                "powf",
                format!("negative base with exponent {p}"),
            ));
        }
        let v = self.map(a, |x| x.powf(p));
        if !v.is_finite() {
            return Err(Error::numeric("powf", "non-finite result"));
        }
        let rg = self.rg(a);
        Ok(self.push(v, Op::Powf(a, p), rg))
    }

    // ---- normalisations over the last axis ----------------------------

    fn check_finite(&self, op: &'static str, a: Var) -> Result<()> {
        if !self.value(a).is_finite() {
            return Err(Error::numeric(op, "non-finite input"));
        }
        Ok(())
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check_finite("softmax", a)?;
        let src = self.value(a);
        let (rows, n) = last_dim(src);
        let mut data = src.data().to_vec();
        for r in 0..rows {
            softmax_in_place(&mut data[r * n..(r + 1) * n]);
        }
        let out = Tensor::from_parts(src.shape().to_vec(), data);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.check_finite("log_softmax", a)?;
        let src = self.value(a);
        let (rows, n) = last_dim(src);
        let mut data = src.data().to_vec();
        for r in 0..rows {
            let row = &mut data[r * n..(r + 1) * n];
            let lse = log_sum_exp(row);
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let out = Tensor::from_parts(src.shape().to_vec(), data);
        let rg = self.rg(a);
        Ok(self.push(out, Op::LogSoftmax(a), rg))
    }

    /// Zero-mean, unit-variance normalisation over the last axis (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.check_finite("layer_norm", a)?;
        let src = self.value(a);
        let (rows, n) = last_dim(src);
        let mut data = src.data().to_vec();
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut data[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * rs;
            }
            rstd.push(rs);
        }
        let out = Tensor::from_parts(src.shape().to_vec(), data);
        let rg = self.rg(a);
        Ok(self.push_aux(out, Op::LayerNorm(a), rg, rstd))
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), rg)
    }

    /// Sum over the last axis of a 2-D tensor, giving `[m, 1]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2("sum_rows")?;
        let d = self.value(a).data();
        let data = (0..m).map(|r| d[r * n..(r + 1) * n].iter().sum()).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![m, 1], data), Op::SumLast(a), rg))
    }

    /// Euclidean norm of every row of a 2-D tensor, giving `[m, 1]`.
    pub fn row_l2_norm(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2("row_l2_norm")?;
        let d = self.value(a).data();
        let data = (0..m)
            .map(|r| {
                d[r * n..(r + 1) * n]
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![m, 1], data), Op::RowL2Norm(a), rg))
    }

    // ---- structural ----------------------------------------------------

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2("slice_rows")?;
        if len == 0 || start + len > m {
            return Err(Error::dim("slice_rows", &[m, n], &[start, len]));
        }
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(vec![len, n], data),
            Op::SliceRows(a, start),
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2("slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::dim("slice_cols", &[m, n], &[start, len]));
        }
        let d = self.value(a).data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&d[r * n + start..r * n + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(vec![m, len], data),
            Op::SliceCols(a, start),
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows needs at least one input"))?;
        let (_, n) = self.value(first).dims2("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (m, n2) = self.value(p).dims2("concat_rows")?;
            if n2 != n {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += m;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(vec![rows, n], data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols needs at least one input"))?;
        let (m, _) = self.value(first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (m2, n) = self.value(p).dims2("concat_cols")?;
            if m2 != m {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(n);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(vec![m, total], data),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a single-element `root`, filling [`Tape::grad`]
    /// for every node that requires a gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        if !self.rg(root) {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            propagate(&self.nodes, &mut self.grads, id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }
}

fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let n = node.value.numel();
    Some(
        grads[v.0]
            .get_or_insert_with(|| vec![0.0; n])
            .as_mut_slice(),
    )
}

fn acc_scaled(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], s: f64) {
    if let Some(d) = slot(nodes, grads, v) {
        for (x, y) in d.iter_mut().zip(g) {
            *x += s * y;
        }
    }
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, g: &[f64]) {
    let node = &nodes[id];
    let val = |v: Var| nodes[v.0].value.data();
    let dims = |v: Var| {
        let s = nodes[v.0].value.shape();
        (s[0], s[1])
    };
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc_scaled(nodes, grads, *a, g, 1.0);
            acc_scaled(nodes, grads, *b, g, 1.0);
        }
        Op::Sub(a, b) => {
            acc_scaled(nodes, grads, *a, g, 1.0);
            acc_scaled(nodes, grads, *b, g, -1.0);
        }
        Op::Mul(a, b) => {
            if let Some(d) = slot(nodes, grads, *a) {
                for ((x, gv), bv) in d.iter_mut().zip(g).zip(val(*b)) {
                    *x += gv * bv;
                }
            }
            if let Some(d) = slot(nodes, grads, *b) {
                for ((x, gv), av) in d.iter_mut().zip(g).zip(val(*a)) {
                    *x += gv * av;
                }
            }
        }
        Op::AddRow(x, b) => {
            let n = nodes[b.0].value.numel();
            acc_scaled(nodes, grads, *x, g, 1.0);
            if let Some(d) = slot(nodes, grads, *b) {
                for row in g.chunks(n) {
                    for (x, gv) in d.iter_mut().zip(row) {
                        *x += gv;
                    }
                }
            }
        }
        Op::MulRow(x, w) => {
            let n = nodes[w.0].value.numel();
            let vw = val(*w);
            if let Some(d) = slot(nodes, grads, *x) {
                for (i, x) in d.iter_mut().enumerate() {
                    *x += g[i] * vw[i % n];
                }
            }
            let vx = val(*x);
            if let Some(d) = slot(nodes, grads, *w) {
                for (i, gv) in g.iter().enumerate() {
                    d[i % n] += gv * vx[i];
                }
            }
        }
        Op::MulCol(x, c) => {
            let (_, n) = dims(*x);
            let vc = val(*c);
            if let Some(d) = slot(nodes, grads, *x) {
                for (i, x) in d.iter_mut().enumerate() {
                    *x += g[i] * vc[i / n];
                }
            }
            let vx = val(*x);
            if let Some(d) = slot(nodes, grads, *c) {
                for (i, gv) in g.iter().enumerate() {
                    d[i / n] += gv * vx[i];
                }
            }
        }
        Op::MatMul(a, b) => {
            let (m, k) = dims(*a);
            let (_, n) = dims(*b);
            if let Some(d) = slot(nodes, grads, *a) {
                matmul_nt_acc(d, g, val(*b), m, n, k);
            }
            if let Some(d) = slot(nodes, grads, *b) {
                matmul_tn_acc(d, val(*a), g, m, k, n);
            }
        }
        Op::Transpose(a) => {
            let (m, n) = dims(*a);
            let gt = transpose_raw(g, n, m);
            acc_scaled(nodes, grads, *a, &gt, 1.0);
        }
        Op::Scale(a, s) => acc_scaled(nodes, grads, *a, g, *s),
        Op::AddScalar(a) | Op::Reshape(a) => acc_scaled(nodes, grads, *a, g, 1.0),
        Op::Exp(a) => {
            let y = node.value.data();
            if let Some(d) = slot(nodes, grads, *a) {
                for i in 0..d.len() {
                    d[i] += g[i] * y[i];
                }
            }
        }
        Op::Log(a) => {
            let x = val(*a);
            if let Some(d) = slot(nodes, grads, *a) {
                for i in 0..d.len() {
                    d[i] += g[i] / x[i];
                }
            }
        }
        Op::Sigmoid(a) => {
            let y = node.value.data();
            if let Some(d) = slot(nodes, grads, *a) {
                for i in 0..d.len() {
                    d[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
        }
        Op::Tanh(a) => {
            let y = node.value.data();
            if let Some(d) = slot(nodes, grads, *a) {
                for i in 0..d.len() {
                    d[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }
        }
        Op::Gelu(a) => {
            let x = val(*a);
            if let Some(d) = slot(nodes, grads, *a) {
                for i in 0..d.len() {
                    let xi = x[i];
                    let t = (GELU_C * (xi + GELU_A * xi * xi * xi)).tanh();
                    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * xi * xi);
                    d[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * xi * dt);
                }
            }
        }
        Op::Powf(a, p) => {
            let p = *p;
            let x = val(*a);
            if let Some(d) = slot(nodes, grads, *a) {
                for i in 0..d.len() {
                    let deriv = if p == 0.0 {
                        0.0
                    } else if x[i] == 0.0 {
                        // one-sided value at the origin; unbounded for p < 1
                        if p == 1.0 {
                            1.0
                        } else {
                            0.0
                        }
                    } else {
                        p * x[i].powf(p - 1.0)
                    };
                    d[i] += g[i] * deriv;
                }
            }
        }
        Op::Softmax(a) => {
            let y = node.value.data();
            let (_, n) = last_dim(&node.value);
            if let Some(d) = slot(nodes, grads, *a) {
                for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for i in 0..n {
                        dr[i] += yr[i] * (gr[i] - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(a) => {
            let y = node.value.data();
            let (_, n) = last_dim(&node.value);
            if let Some(d) = slot(nodes, grads, *a) {
                for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let gs: f64 = gr.iter().sum();
                    for i in 0..n {
                        dr[i] += gr[i] - yr[i].exp() * gs;
                    }
                }
            }
        }
        Op::LayerNorm(a) => {
            let y = node.value.data();
            let (_, n) = last_dim(&node.value);
            let rstd = &node.aux;
            if let Some(d) = slot(nodes, grads, *a) {
                for (r, ((dr, gr), yr)) in d
                    .chunks_mut(n)
                    .zip(g.chunks(n))
                    .zip(y.chunks(n))
                    .enumerate()
                {
                    let mg = gr.iter().sum::<f64>() / n as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for i in 0..n {
                        dr[i] += rstd[r] * (gr[i] - mg - yr[i] * mgy);
                    }
                }
            }
        }
        Op::SumAll(a) => {
            let g0 = g[0];
            if let Some(d) = slot(nodes, grads, *a) {
                d.iter_mut().for_each(|x| *x += g0);
            }
        }
        Op::MeanAll(a) => {
            let g0 = g[0] / nodes[a.0].value.numel() as f64;
            if let Some(d) = slot(nodes, grads, *a) {
                d.iter_mut().for_each(|x| *x += g0);
            }
        }
        Op::SumLast(a) => {
            let (_, n) = dims(*a);
            if let Some(d) = slot(nodes, grads, *a) {
                for (i, x) in d.iter_mut().enumerate() {
                    *x += g[i / n];
                }
            }
        }
        Op::RowL2Norm(a) => {
            let (_, n) = dims(*a);
            let x = val(*a);
            let norms = node.value.data();
            if let Some(d) = slot(nodes, grads, *a) {
                for i in 0..d.len() {
                    let nr = norms[i / n];
                    if nr > 0.0 {
                        d[i] += g[i / n] * x[i] / nr;
                    }
                }
            }
        }
        Op::SliceRows(a, start) => {
            let (_, n) = dims(*a);
            if let Some(d) = slot(nodes, grads, *a) {
                for (x, gv) in d[start * n..start * n + g.len()].iter_mut().zip(g) {
                    *x += gv;
                }
            }
        }
        Op::SliceCols(a, start) => {
            let (_, n) = dims(*a);
            let len = node.value.shape()[1];
            if let Some(d) = slot(nodes, grads, *a) {
                for (r, gr) in g.chunks(len).enumerate() {
                    for (x, gv) in d[r * n + start..r * n + start + len].iter_mut().zip(gr) {
                        *x += gv;
                    }
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for p in parts {
                let len = nodes[p.0].value.numel();
                acc_scaled(nodes, grads, *p, &g[off..off + len], 1.0);
                off += len;
            }
        }
        Op::ConcatCols(parts) => {
            let (m, total) = (node.value.shape()[0], node.value.shape()[1]);
            let mut off = 0;
            for p in parts {
                let (_, w) = dims(*p);
                if let Some(d) = slot(nodes, grads, *p) {
                    for r in 0..m {
                        for c in 0..w {
                            d[r * w + c] += g[r * total + off + c];
                        }
                    }
                }
                off += w;
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted `ln Σ exp(x)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(r: usize, c: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(r, c, d.to_vec()).unwrap()
    }

    #[test]
    fn matmul_with_ones_gives_row_sums() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]));
        let ones = tape.constant(t2(3, 1, &[1.0; 3]));
        let c = tape.matmul(a, ones).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 1.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![0.0; 3]));
        let y = tape.softmax(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).data(), &[0.5]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(
            tape.add(a, c),
            Err(Error::Dimension { op: "add", .. })
        ));
    }

    #[test]
    fn log_and_softmax_reject_bad_inputs() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::row(vec![1.0, 0.0]));
        assert!(matches!(tape.log(a), Err(Error::NumericDomain { .. })));
        let b = tape.constant(Tensor::row(vec![1.0, f64::NAN]));
        assert!(matches!(tape.softmax(b), Err(Error::NumericDomain { .. })));
        assert!(matches!(
            tape.log_softmax(b),
            Err(Error::NumericDomain { .. })
        ));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn gradient_accumulates_over_fanout() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row(vec![3.0]));
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let s = tape.sum(z);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[7.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::row(vec![5.0, 6.0]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[5.0, 6.0]);
        assert!(tape.grad(c).is_none());
    }
}
