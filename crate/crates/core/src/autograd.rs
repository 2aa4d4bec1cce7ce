//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in insertion order, which is already a
//! topological order. [`Graph::backward`] walks the tape once in reverse and
//! accumulates vector-Jacobian products into per-node gradient buffers.
//!
//! All operations work on 2-D tensors (`[rows × cols]`); vectors are `[1 × d]`
//! and scalars `[1]`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Real, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<R> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    Scale(Var, R),
    Gelu(Var),
    Tanh(Var),
    Abs(Var),
    Sqrt(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<R>,
        inv_std: Vec<R>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    MaxPoolRows {
        x: Var,
        argmax: Vec<usize>,
    },
    Sum(Var),
    Reshape(Var),
    Dropout {
        x: Var,
        mask: Vec<R>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<R>,
        norm: R,
    },
    L1 {
        pred: Var,
        target: Tensor<R>,
        rows: Vec<bool>,
        norm: R,
    },
}

struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    requires_grad: bool,
}

/// The computation tape. Single writer; build one per forward pass.
pub struct Graph<R> {
    nodes: Vec<Node<R>>,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &Tensor<impl Real>, b: &Tensor<impl Real>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu<R: Real>(x: R) -> R {
    let c = R::from_f64c(GELU_C);
    let k = R::from_f64c(0.044_715);
    let half = R::from_f64c(0.5);
    half * x * (R::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<R: Real>(x: R) -> R {
    let c = R::from_f64c(GELU_C);
    let k = R::from_f64c(0.044_715);
    let half = R::from_f64c(0.5);
    let three = R::from_f64c(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (R::one() + t) + half * x * (R::one() - t * t) * c * (R::one() + three * k * x * x)
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![R::zero(); m * n];
        gemm_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::shape("transpose", t.shape(), &[]));
        }
        let out = t.transpose2();
        let rg = self.rg(x);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(R, R) -> R,
        op: Op<R>,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `x[rows × n] + bias[n]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, cols) = tx.dims2();
        if tb.numel() != cols {
            return Err(Error::shape("add_bias", tx.shape(), tb.shape()));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (v, &b) in row.iter_mut().zip(tb.data()) {
                *v = *v + b;
            }
        }
        let out = Tensor::from_vec(tx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let c = R::from_f64c(factor);
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(R) -> R, op: Op<R>) -> Var {
        let out = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x))
    }

    /// Row-wise softmax. `mask[i*cols + j] == true` keeps position `j` of row `i`;
    /// dropped positions get exactly zero probability.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.dims2();
        if let Some(m) = mask {
            if m.len() != rows * cols {
                return Err(Error::shape("softmax_rows", tx.shape(), &[m.len()]));
            }
        }
        let mut out = vec![R::zero(); rows * cols];
        for r in 0..rows {
            let row = tx.row(r);
            let keep = |j: usize| mask.is_none_or(|m| m[r * cols + j]);
            let mut max = R::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if keep(j) && v > max {
                    max = v;
                }
            }
            if max == R::neg_infinity() {
                return Err(Error::DegenerateAttention { row: r });
            }
            let mut total = R::zero();
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    let e = (v - max).exp();
                    out[r * cols + j] = e;
                    total = total + e;
                }
            }
            for o in &mut out[r * cols..(r + 1) * cols] {
                *o = *o / total;
            }
        }
        let out = Tensor::from_vec(tx.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Normalizes each row over its last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let (rows, d) = tx.dims2();
        if tg.numel() != d || tb.numel() != d {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let eps = R::from_f64c(eps);
        let dn = R::from_usize(d).unwrap();
        let mut xhat = vec![R::zero(); rows * d];
        let mut inv_std = vec![R::zero(); rows];
        let mut out = vec![R::zero(); rows * d];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().copied().sum::<R>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / dn;
            let denom = (var + eps).sqrt();
            // constant rows with eps = 0 map to zeros instead of NaN
            let inv = if denom > R::zero() { R::one() / denom } else { R::zero() };
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::from_vec(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Row lookup into an embedding table `[n × d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (n, d) = tt.dims2();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(Error::InvalidArgument(format!(
                    "gather_rows: index {id} out of range for table with {n} rows"
                )));
            }
            out.extend_from_slice(tt.row(id));
        }
        let out = Tensor::from_vec(vec![ids.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.dims2();
        if start + len > cols {
            return Err(Error::shape("slice_cols", tx.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&tx.row(r)[start..start + len]);
        }
        let out = Tensor::from_vec(vec![rows, len], out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).dims2().0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            if r != rows {
                return Err(Error::shape("concat_cols", &[rows], self.value(p).shape()));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::from_vec(vec![rows, total], out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.dims2();
        if start + len > rows {
            return Err(Error::shape("slice_rows", tx.shape(), &[start, len]));
        }
        let out = tx.data()[start * cols..(start + len) * cols].to_vec();
        let out = Tensor::from_vec(vec![len, cols], out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).dims2().1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            if c != cols {
                return Err(Error::shape("concat_rows", &[cols], self.value(p).shape()));
            }
            out.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let out = Tensor::from_vec(vec![rows, cols], out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Column-wise max over the rows where `row_mask` is true; returns `[1 × d]`.
    pub fn max_pool_rows(&mut self, x: Var, row_mask: Option<&[bool]>) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.dims2();
        if let Some(m) = row_mask {
            if m.len() != rows {
                return Err(Error::shape("max_pool_rows", tx.shape(), &[m.len()]));
            }
        }
        let keep = |r: usize| row_mask.is_none_or(|m| m[r]);
        if !(0..rows).any(keep) {
            return Err(Error::InvalidArgument(
                "max_pool_rows: every row is masked".into(),
            ));
        }
        let mut argmax = vec![usize::MAX; cols];
        let mut out = vec![R::neg_infinity(); cols];
        for r in (0..rows).filter(|&r| keep(r)) {
            for (j, &v) in tx.row(r).iter().enumerate() {
                if argmax[j] == usize::MAX || v > out[j] {
                    out[j] = v;
                    argmax[j] = r;
                }
            }
        }
        let out = Tensor::from_vec(vec![1, cols], out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaxPoolRows { x, argmax }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Inverted dropout; identity when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = R::from_f64c(1.0 / (1.0 - rate));
        let mask: Vec<R> = (0..self.value(x).numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    R::zero()
                } else {
                    keep
                }
            })
            .collect();
        let tx = self.value(x);
        let data = tx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::from_vec(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Dropout { x, mask }, rg)
    }

    /// Summed softmax cross-entropy over rows with a target, divided by `norm`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        norm: f64,
    ) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, classes) = tl.dims2();
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy", tl.shape(), &[targets.len()]));
        }
        let mut probs = vec![R::zero(); rows * classes];
        let mut total = R::zero();
        for (r, target) in targets.iter().enumerate() {
            let Some(t) = *target else { continue };
            if t >= classes {
                return Err(Error::LabelOutOfRange { label: t, classes });
            }
            let row = tl.row(r);
            let max = row.iter().copied().fold(R::neg_infinity(), R::max);
            let z: R = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            for (j, &v) in row.iter().enumerate() {
                probs[r * classes + j] = (v - log_z).exp();
            }
            total = total + log_z - row[t];
        }
        let norm = R::from_f64c(norm);
        let out = Tensor::scalar(total / norm);
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                norm,
            },
            rg,
        ))
    }

    /// Summed absolute error over the selected rows, divided by `norm`.
    pub fn l1_rows(
        &mut self,
        pred: Var,
        target: &Tensor<R>,
        rows: &[bool],
        norm: f64,
    ) -> Result<Var> {
        let tp = self.value(pred);
        let (n, cols) = tp.dims2();
        if target.dims2() != (n, cols) || rows.len() != n {
            return Err(Error::shape("l1_rows", tp.shape(), target.shape()));
        }
        let mut total = R::zero();
        for (r, _) in rows.iter().enumerate().filter(|(_, &keep)| keep) {
            for (&p, &t) in tp.row(r).iter().zip(target.row(r)) {
                total = total + (p - t).abs();
            }
        }
        let norm = R::from_f64c(norm);
        let out = Tensor::scalar(total / norm);
        let rg = self.rg(pred);
        Ok(self.push(
            out,
            Op::L1 {
                pred,
                target: target.clone(),
                rows: rows.to_vec(),
                norm,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>> {
        let shape = self.value(loss).shape();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(shape.to_vec()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Tensor<R>, grads: &mut [Option<Tensor<R>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.rg(*a) {
                    let ga = self.grad_buf(grads, *a);
                    gemm_nt_acc(gd, tb.data(), ga, m, n, k);
                }
                if self.rg(*b) {
                    let gb = self.grad_buf(grads, *b);
                    gemm_tn_acc(ta.data(), gd, gb, m, k, n);
                }
            }
            Op::Transpose(x) => {
                if self.rg(*x) {
                    let gt = g.transpose2();
                    accumulate(self.grad_buf(grads, *x), gt.data());
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(self.grad_buf(grads, *a), gd);
                }
                if self.rg(*b) {
                    accumulate(self.grad_buf(grads, *b), gd);
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    accumulate(self.grad_buf(grads, *a), gd);
                }
                if self.rg(*b) {
                    let buf = self.grad_buf(grads, *b);
                    for (o, &v) in buf.iter_mut().zip(gd) {
                        *o = *o - v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let buf = self.grad_buf(grads, *a);
                    for ((o, &gv), &bv) in buf.iter_mut().zip(gd).zip(tb) {
                        *o = *o + gv * bv;
                    }
                }
                if self.rg(*b) {
                    let buf = self.grad_buf(grads, *b);
                    for ((o, &gv), &av) in buf.iter_mut().zip(gd).zip(ta) {
                        *o = *o + gv * av;
                    }
                }
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let buf = self.grad_buf(grads, *a);
                    for ((o, &gv), &bv) in buf.iter_mut().zip(gd).zip(tb) {
                        *o = *o + gv / bv;
                    }
                }
                if self.rg(*b) {
                    let buf = self.grad_buf(grads, *b);
                    for (((o, &gv), &av), &bv) in buf.iter_mut().zip(gd).zip(ta).zip(tb) {
                        *o = *o - gv * av / (bv * bv);
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if self.rg(*x) {
                    accumulate(self.grad_buf(grads, *x), gd);
                }
                if self.rg(*bias) {
                    let cols = self.value(*bias).numel();
                    let buf = self.grad_buf(grads, *bias);
                    for row in gd.chunks(cols) {
                        accumulate(buf, row);
                    }
                }
            }
            Op::Scale(x, c) => {
                if self.rg(*x) {
                    let buf = self.grad_buf(grads, *x);
                    for (o, &gv) in buf.iter_mut().zip(gd) {
                        *o = *o + gv * *c;
                    }
                }
            }
            Op::Gelu(x) => self.elementwise_back(grads, *x, y.data(), gd, |xv, _| gelu_grad(xv)),
            Op::Tanh(x) => self.elementwise_back(grads, *x, y.data(), gd, |_, yv| R::one() - yv * yv),
            Op::Abs(x) => self.elementwise_back(grads, *x, y.data(), gd, |xv, _| {
                if xv > R::zero() {
                    R::one()
                } else if xv < R::zero() {
                    -R::one()
                } else {
                    R::zero()
                }
            }),
            Op::Sqrt(x) => {
                let two = R::from_f64c(2.0);
                self.elementwise_back(grads, *x, y.data(), gd, |_, yv| R::one() / (two * yv))
            }
            Op::Softmax(x) => {
                if self.rg(*x) {
                    let (rows, cols) = y.dims2();
                    let buf = self.grad_buf(grads, *x);
                    for r in 0..rows {
                        let yr = y.row(r);
                        let gr = &gd[r * cols..(r + 1) * cols];
                        let dot: R = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            buf[r * cols + j] = buf[r * cols + j] + yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.value(*gamma).numel();
                let rows = inv_std.len();
                if self.rg(*gamma) {
                    let buf = self.grad_buf(grads, *gamma);
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] = buf[j] + gd[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if self.rg(*beta) {
                    let buf = self.grad_buf(grads, *beta);
                    for row in gd.chunks(d) {
                        accumulate(buf, row);
                    }
                }
                if self.rg(*x) {
                    let g_gamma = self.value(*gamma).data().to_vec();
                    let dn = R::from_usize(d).unwrap();
                    let buf = self.grad_buf(grads, *x);
                    let mut dxhat = vec![R::zero(); d];
                    for r in 0..rows {
                        let mut s1 = R::zero();
                        let mut s2 = R::zero();
                        for j in 0..d {
                            dxhat[j] = gd[r * d + j] * g_gamma[j];
                            s1 = s1 + dxhat[j];
                            s2 = s2 + dxhat[j] * xhat[r * d + j];
                        }
                        let k = inv_std[r] / dn;
                        for j in 0..d {
                            let v = k * (dn * dxhat[j] - s1 - xhat[r * d + j] * s2);
                            buf[r * d + j] = buf[r * d + j] + v;
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if self.rg(*table) {
                    let d = self.value(*table).dims2().1;
                    let buf = self.grad_buf(grads, *table);
                    for (i, &id) in ids.iter().enumerate() {
                        accumulate(&mut buf[id * d..(id + 1) * d], &gd[i * d..(i + 1) * d]);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if self.rg(*x) {
                    let (rows, len) = y.dims2();
                    let cols = self.value(*x).dims2().1;
                    let buf = self.grad_buf(grads, *x);
                    for r in 0..rows {
                        accumulate(
                            &mut buf[r * cols + start..r * cols + start + len],
                            &gd[r * len..(r + 1) * len],
                        );
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = y.dims2();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).dims2().1;
                    if self.rg(p) {
                        let buf = self.grad_buf(grads, p);
                        for r in 0..rows {
                            accumulate(
                                &mut buf[r * c..(r + 1) * c],
                                &gd[r * total + offset..r * total + offset + c],
                            );
                        }
                    }
                    offset += c;
                }
            }
            Op::SliceRows { x, start } => {
                if self.rg(*x) {
                    let cols = y.dims2().1;
                    let buf = self.grad_buf(grads, *x);
                    accumulate(&mut buf[start * cols..start * cols + gd.len()], gd);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.rg(p) {
                        accumulate(self.grad_buf(grads, p), &gd[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::MaxPoolRows { x, argmax } => {
                if self.rg(*x) {
                    let cols = argmax.len();
                    let buf = self.grad_buf(grads, *x);
                    for (j, &r) in argmax.iter().enumerate() {
                        buf[r * cols + j] = buf[r * cols + j] + gd[j];
                    }
                }
            }
            Op::Sum(x) => {
                if self.rg(*x) {
                    let g0 = gd[0];
                    for o in self.grad_buf(grads, *x).iter_mut() {
                        *o = *o + g0;
                    }
                }
            }
            Op::Reshape(x) => {
                if self.rg(*x) {
                    accumulate(self.grad_buf(grads, *x), gd);
                }
            }
            Op::Dropout { x, mask } => {
                if self.rg(*x) {
                    let buf = self.grad_buf(grads, *x);
                    for ((o, &gv), &m) in buf.iter_mut().zip(gd).zip(mask) {
                        *o = *o + gv * m;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                norm,
            } => {
                if self.rg(*logits) {
                    let classes = self.value(*logits).dims2().1;
                    let scale = gd[0] / *norm;
                    let buf = self.grad_buf(grads, *logits);
                    for (r, target) in targets.iter().enumerate() {
                        let Some(t) = *target else { continue };
                        for j in 0..classes {
                            let mut v = probs[r * classes + j];
                            if j == t {
                                v = v - R::one();
                            }
                            buf[r * classes + j] = buf[r * classes + j] + v * scale;
                        }
                    }
                }
            }
            Op::L1 {
                pred,
                target,
                rows,
                norm,
            } => {
                if self.rg(*pred) {
                    let tp = self.value(*pred);
                    let cols = tp.dims2().1;
                    let scale = gd[0] / *norm;
                    let pd = tp.data();
                    let td = target.data();
                    let buf = self.grad_buf(grads, *pred);
                    for (r, _) in rows.iter().enumerate().filter(|(_, &k)| k) {
                        for j in r * cols..(r + 1) * cols {
                            let diff = pd[j] - td[j];
                            let s = if diff > R::zero() {
                                R::one()
                            } else if diff < R::zero() {
                                -R::one()
                            } else {
                                R::zero()
                            };
                            buf[j] = buf[j] + s * scale;
                        }
                    }
                }
            }
        }
    }

    fn elementwise_back(
        &self,
        grads: &mut [Option<Tensor<R>>],
        x: Var,
        y: &[R],
        gd: &[R],
        local: impl Fn(R, R) -> R,
    ) {
        if !self.rg(x) {
            return;
        }
        let xd = self.value(x).data();
        let buf = self.grad_buf(grads, x);
        for (i, o) in buf.iter_mut().enumerate() {
            *o = *o + gd[i] * local(xd[i], y[i]);
        }
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Tensor<R>>], v: Var) -> &'a mut [R] {
        grads[v.0]
            .get_or_insert_with(|| Tensor::zeros(self.value(v).shape().to_vec()))
            .data_mut()
    }
}

fn accumulate<R: Real>(dst: &mut [R], src: &[R]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<R> {
    grads: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Gradients<R> {
    /// Gradient of the loss w.r.t. `v`, or `None` if no path reaches it.
    pub fn get(&self, v: Var) -> Option<&Tensor<R>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<R>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_identity_and_small_case() {
        let mut g = Graph::new();
        let eye = g.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let a = g.constant(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let out = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(out), g.value(a));

        let x = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let y = g.constant(t(&[2, 1], &[5., 6.]));
        let z = g.matmul(x, y).unwrap();
        assert_eq!(g.value(z).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::<f64>::zeros(vec![2, 3]));
        let b = g.constant(Tensor::<f64>::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3, 3], &[0., 0., 0., 1., 2., 3., 1000., 0., 0.]));
        let y = g.softmax_rows(x, None).unwrap();
        let v = g.value(y);
        for j in 0..3 {
            approx::assert_abs_diff_eq!(v.at(0, j), 1.0 / 3.0, epsilon = 1e-15);
        }
        approx::assert_abs_diff_eq!(v.at(1, 0), 0.09003, epsilon = 1e-5);
        approx::assert_abs_diff_eq!(v.at(1, 1), 0.24473, epsilon = 1e-5);
        approx::assert_abs_diff_eq!(v.at(1, 2), 0.66524, epsilon = 1e-5);
        assert_eq!(v.at(2, 0), 1.0);
        assert_eq!(v.at(2, 1), 0.0);
        assert!(v.is_finite());
    }

    #[test]
    fn softmax_mask_zeroes_and_rejects_empty_rows() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[5., 1., 2., 0., 0., 0.]));
        let mask = [false, true, true, true, true, true];
        let y = g.softmax_rows(x, Some(&mask)).unwrap();
        assert_eq!(g.value(y).at(0, 0), 0.0);
        approx::assert_abs_diff_eq!(g.value(y).row(0).iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let bad = [true, true, true, false, false, false];
        assert!(matches!(
            g.softmax_rows(x, Some(&bad)),
            Err(Error::DegenerateAttention { row: 1 })
        ));
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[1., 2., 3., 4., 4., 4.]));
        let gamma = g.constant(Tensor::ones(vec![3]));
        let beta = g.constant(Tensor::zeros(vec![3]));
        let y = g.layer_norm(x, gamma, beta, 0.0).unwrap();
        let v = g.value(y);
        approx::assert_abs_diff_eq!(v.at(0, 0), -1.224_744_871, epsilon = 1e-8);
        approx::assert_abs_diff_eq!(v.at(0, 1), 0.0, epsilon = 1e-12);
        approx::assert_abs_diff_eq!(v.at(0, 2), 1.224_744_871, epsilon = 1e-8);
        assert_eq!(v.row(1), &[0.0, 0.0, 0.0]);

        let y2 = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert_eq!(g.value(y2).row(1), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_rows_have_beta_mean() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 4], &[0.3, -2.0, 7.5, 1.25]));
        let gamma = g.constant(t(&[4], &[1., 1., 1., 1.]));
        let beta = g.constant(t(&[4], &[0.5, 0.5, 0.5, 0.5]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        let mean = g.value(y).sum() / 4.0;
        approx::assert_abs_diff_eq!(mean, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn backward_simple_losses() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 2], &[1., -2., 3., 0.5]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);

        let mut g = Graph::new();
        let x = g.param(t(&[1, 3], &[1., -2., 3.]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.param(Tensor::<f64>::zeros(vec![2, 2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 2], &[1., 2.]));
        let c = g.constant(t(&[1, 2], &[3., 4.]));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn max_pool_ignores_masked_rows() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3, 2], &[1., 5., 1e9, 1e9, 2., 0.]));
        let y = g.max_pool_rows(x, Some(&[true, false, true])).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 5.0]);
        assert!(g.max_pool_rows(x, Some(&[false, false, false])).is_err());
    }
}
