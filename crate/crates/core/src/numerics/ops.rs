//! Differentiable primitives: forward evaluation and the matching reverse
//! rules, kept side by side.

use super::graph::{accumulate, Node};
use super::{Graph, Layout, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Batched multi-head attention layout.
///
/// Queries are `batch * q_len` rows and keys/values `batch * k_len` rows;
/// the query/key width and the value width are each split evenly into
/// `heads` contiguous column blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSpec {
    pub batch: usize,
    pub heads: usize,
    pub q_len: usize,
    pub k_len: usize,
    /// `batch * k_len` flags; `true` excludes that key for every query of
    /// the same batch element.
    pub key_mask: Option<Vec<bool>>,
}

impl AttentionSpec {
    pub fn single(q_len: usize, k_len: usize, key_mask: Option<Vec<bool>>) -> Self {
        Self {
            batch: 1,
            heads: 1,
            q_len,
            k_len,
            key_mask,
        }
    }
}

pub(crate) enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    Scale { a: Var, c: T },
    Gelu { a: Var },
    Log { a: Var },
    Exp { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<T>, rstd: Vec<T> },
    Softmax { a: Var, outer: usize, n: usize, inner: usize },
    Attention { q: Var, k: Var, v: Var, spec: AttentionSpec, probs: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    GatherRows { a: Var, idx: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { a: Var, b: Var },
    L2NormRows { a: Var, norms: Vec<T> },
    Sum { a: Var },
    Mean { a: Var },
    Reshape { a: Var },
}

impl<T> Op<T> {
    pub(crate) fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                vec![*a, *b]
            }
            Op::ConcatCols { a, b } => vec![*a, *b],
            Op::AddRow { a, row } => vec![*a, *row],
            Op::Transpose { a }
            | Op::Scale { a, .. }
            | Op::Gelu { a }
            | Op::Log { a }
            | Op::Exp { a }
            | Op::Softmax { a, .. }
            | Op::GatherRows { a, .. }
            | Op::L2NormRows { a, .. }
            | Op::Sum { a }
            | Op::Mean { a }
            | Op::Reshape { a } => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::ConcatRows { parts } => parts.clone(),
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through a single `exp`, several times cheaper than libm's.
#[inline]
fn tanh<T: Real>(u: T) -> T {
    let two = T::one() + T::one();
    T::one() - two / ((two * u).exp() + T::one())
}

fn c<T: Real>(x: f64) -> T {
    T::from_f64_lossy(x)
}

fn matrix_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [m, n] => Ok((*m, *n)),
        _ => Err(Error::shape(op, format!("expected a matrix, got shape {shape:?}"))),
    }
}

impl<T: Real> Graph<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, op: Op<T>, name: &'static str, f: impl Fn(T) -> T) -> Result<Var> {
        let src = self.value(a);
        let data = src.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::from_parts(data, src.shape().to_vec());
        self.push(out, op, name)
    }

    /// Matrix product of `a` (`m×k`) and `b` (`k×n`).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.shape(a))?;
        let (k2, n) = matrix_dims("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        self.push(Tensor::from_parts(out, vec![m, n]), Op::MatMul { a, b }, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = matrix_dims("transpose", self.shape(a))?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Tensor::from_parts(out, vec![n, m]), Op::Transpose { a }, "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::from_parts(data, x.shape().to_vec());
        self.push(out, Op::Add { a, b }, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p - q).collect();
        let out = Tensor::from_parts(data, x.shape().to_vec());
        self.push(out, Op::Sub { a, b }, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::from_parts(data, x.shape().to_vec());
        self.push(out, Op::Mul { a, b }, "mul")
    }

    /// Adds a length-`D` vector to every row of `a` (last axis `D`).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let d = self.value(a).cols();
        if self.value(row).numel() != d {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", self.shape(a), self.shape(row)),
            ));
        }
        let r = self.value(row).data();
        let x = self.value(a);
        let mut data = x.data().to_vec();
        for chunk in data.chunks_exact_mut(d) {
            for (o, &b) in chunk.iter_mut().zip(r) {
                *o = *o + b;
            }
        }
        let out = Tensor::from_parts(data, x.shape().to_vec());
        self.push(out, Op::AddRow { a, row }, "add_row")
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        self.unary(a, Op::Scale { a, c: factor }, "scale", |x| x * factor)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (k, s) = (c::<T>(GELU_C), c::<T>(GELU_A));
        let half = c::<T>(0.5);
        self.unary(a, Op::Gelu { a }, "gelu", |x| {
            half * x * (T::one() + tanh(k * (x + s * x * x * x)))
        })
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log { a }, "log", |x| x.ln())
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp { a }, "exp", |x| x.exp())
    }

    /// Per-row standardization over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {:?}, gain {:?}, bias {:?}",
                    xv.shape(),
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        if eps <= T::zero() {
            return Err(Error::invalid("layer_norm: eps must be positive"));
        }
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.rows();
        let dn = c::<T>(d as f64);
        let mut out = vec![T::zero(); xv.numel()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for (r, o) in xv.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mean = r.iter().copied().sum::<T>() / dn;
            let var = r.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..d {
                o[j] = (r[j] - mean) * rstd * gv[j] + bv[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let out = Tensor::from_parts(out, xv.shape().to_vec());
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
            "layer_norm",
        )
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let n = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| o * n * inner + i * inner + j;
                let mut m = T::neg_infinity();
                for i in 0..n {
                    m = m.max(src[at(i)]);
                }
                let mut z = T::zero();
                for i in 0..n {
                    let e = (src[at(i)] - m).exp();
                    out[at(i)] = e;
                    z = z + e;
                }
                for i in 0..n {
                    out[at(i)] = out[at(i)] / z;
                }
            }
        }
        let out = Tensor::from_parts(out, shape);
        self.push(out, Op::Softmax { a, outer, n, inner }, "softmax")
    }

    /// Scaled dot-product attention `softmax(Q Kᵀ / √d_k) V` per batch
    /// element and head; masked keys get zero probability.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (qr, qw) = matrix_dims("attention", self.shape(q))?;
        let (kr, kw) = matrix_dims("attention", self.shape(k))?;
        let (vr, vw) = matrix_dims("attention", self.shape(v))?;
        let AttentionSpec {
            batch,
            heads,
            q_len,
            k_len,
            ..
        } = spec;
        if heads == 0 || qw != kw || qw % heads != 0 || vw % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("q width {qw}, k width {kw}, v width {vw}, heads {heads}"),
            ));
        }
        if qr != batch * q_len || kr != batch * k_len || vr != kr {
            return Err(Error::shape(
                "attention",
                format!(
                    "rows q {qr}, k {kr}, v {vr} for batch {batch}, q_len {q_len}, k_len {k_len}"
                ),
            ));
        }
        if let Some(m) = &spec.key_mask {
            if m.len() != kr {
                return Err(Error::shape(
                    "attention",
                    format!("mask length {} for {kr} keys", m.len()),
                ));
            }
            for b in 0..batch {
                if m[b * k_len..(b + 1) * k_len].iter().all(|&x| x) {
                    return Err(Error::invalid(format!(
                        "attention: every key of batch element {b} is masked"
                    )));
                }
            }
        }
        let dk = qw / heads;
        let dv = vw / heads;
        let scale = T::one() / c::<T>(dk as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); batch * heads * q_len * k_len];
        let mut out = vec![T::zero(); qr * vw];
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * q_len * k_len..][..q_len * k_len];
                T::gemm_raw(
                    q_len,
                    dk,
                    k_len,
                    scale,
                    qd,
                    Layout::new(b * q_len * qw + h * dk, qw, 1),
                    kd,
                    Layout::new(b * k_len * kw + h * dk, 1, kw),
                    p,
                    Layout::new(0, k_len, 1),
                    false,
                );
                let mask = spec.key_mask.as_ref().map(|m| &m[b * k_len..(b + 1) * k_len]);
                for row in p.chunks_exact_mut(k_len) {
                    softmax_masked(row, mask);
                }
                T::gemm_raw(
                    q_len,
                    k_len,
                    dv,
                    T::one(),
                    p,
                    Layout::new(0, k_len, 1),
                    vd,
                    Layout::new(b * k_len * vw + h * dv, vw, 1),
                    &mut out,
                    Layout::new(b * q_len * vw + h * dv, vw, 1),
                    false,
                );
            }
        }
        let out = Tensor::from_parts(out, vec![qr, vw]);
        self.push(out, Op::Attention { q, k, v, spec, probs }, "attention")
    }

    /// Mean cross-entropy of row-wise softmax(`logits`) against class ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, classes) = matrix_dims("cross_entropy", self.shape(logits))?;
        if targets.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{n} rows but {} targets", targets.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::invalid(format!(
                "cross_entropy: target {t} out of range for {classes} classes"
            )));
        }
        let lg = self.value(logits).data();
        let mut probs = lg.to_vec();
        let mut total = T::zero();
        for ((row, p), &t) in lg.chunks_exact(classes).zip(probs.chunks_exact_mut(classes)).zip(targets) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
            total = total + lse - row[t];
            softmax_masked(p, None);
        }
        let loss = total / c::<T>(n as f64);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            "cross_entropy",
        )
    }

    /// Rows of `a` (viewed as `rows × last-axis`) at `idx`, in order.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let (rows, d) = (src.rows(), src.cols());
        if idx.is_empty() {
            return Err(Error::invalid("gather_rows: empty index list"));
        }
        if let Some(&i) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!(
                "gather_rows: row {i} out of range for {rows} rows"
            )));
        }
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&src.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::from_parts(out, vec![idx.len(), d]);
        self.push(out, Op::GatherRows { a, idx: idx.to_vec() }, "gather_rows")
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat_rows: no inputs"));
        };
        let d = self.value(first).cols();
        let mut out = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.cols() != d {
                return Err(Error::shape(
                    "concat_rows",
                    format!("{:?} vs {:?}", self.shape(first), v.shape()),
                ));
            }
            out.extend_from_slice(v.data());
        }
        let rows = out.len() / d;
        let out = Tensor::from_parts(out, vec![rows, d]);
        self.push(
            out,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            "concat_rows",
        )
    }

    /// Joins two matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = matrix_dims("concat_cols", self.shape(a))?;
        let (rb, cb) = matrix_dims("concat_cols", self.shape(b))?;
        if ra != rb {
            return Err(Error::shape(
                "concat_cols",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&x[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&y[r * cb..(r + 1) * cb]);
        }
        let out = Tensor::from_parts(out, vec![ra, ca + cb]);
        self.push(out, Op::ConcatCols { a, b }, "concat_cols")
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let d = src.cols();
        let mut out = src.data().to_vec();
        let mut norms = Vec::with_capacity(src.rows());
        for (i, row) in out.chunks_exact_mut(d).enumerate() {
            let n = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            if n <= T::zero() {
                return Err(Error::invalid(format!(
                    "l2_normalize_rows: row {i} has zero norm"
                )));
            }
            row.iter_mut().for_each(|x| *x = *x / n);
            norms.push(n);
        }
        let out = Tensor::from_parts(out, src.shape().to_vec());
        self.push(out, Op::L2NormRows { a, norms }, "l2_normalize_rows")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum { a }, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.data().iter().copied().sum::<T>() / c::<T>(v.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean { a }, "mean")
    }

    /// Inner product of two equally shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        self.push(t, Op::Reshape { a }, "reshape")
    }

    /// `x W + b` for `x` of shape `rows × in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }
}

fn softmax_masked<T: Real>(row: &mut [T], mask: Option<&[bool]>) {
    let live = |j: usize| mask.is_none_or(|m| !m[j]);
    let mut m = T::neg_infinity();
    for (j, &x) in row.iter().enumerate() {
        if live(j) {
            m = m.max(x);
        }
    }
    let mut z = T::zero();
    for (j, x) in row.iter_mut().enumerate() {
        if live(j) {
            *x = (*x - m).exp();
            z = z + *x;
        } else {
            *x = T::zero();
        }
    }
    for x in row.iter_mut() {
        *x = *x / z;
    }
}

/// Pushes the gradient `g` of node `i` into its parents' gradient slots.
pub(crate) fn backprop<T: Real>(nodes: &[Node<T>], i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[i];
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[1];
            let bd = val(*b).data();
            let ad = val(*a).data();
            if let Some(ga) = accumulate(grads, nodes, *a) {
                T::gemm(m, n, k, g, false, bd, true, ga, true);
            }
            if let Some(gb) = accumulate(grads, nodes, *b) {
                T::gemm(k, m, n, ad, true, g, false, gb, true);
            }
        }
        Op::Transpose { a } => {
            let (m, n) = (val(*a).shape()[0], val(*a).shape()[1]);
            if let Some(ga) = accumulate(grads, nodes, *a) {
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = ga[i * n + j] + g[j * m + i];
                    }
                }
            }
        }
        Op::Add { a, b } => {
            for p in [*a, *b] {
                if let Some(gp) = accumulate(grads, nodes, p) {
                    add_into(gp, g);
                }
            }
        }
        Op::Sub { a, b } => {
            if let Some(ga) = accumulate(grads, nodes, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = accumulate(grads, nodes, *b) {
                gb.iter_mut().zip(g).for_each(|(o, &x)| *o = *o - x);
            }
        }
        Op::Mul { a, b } => {
            let (ad, bd) = (val(*a).data(), val(*b).data());
            if let Some(ga) = accumulate(grads, nodes, *a) {
                for ((o, &x), &y) in ga.iter_mut().zip(g).zip(bd) {
                    *o = *o + x * y;
                }
            }
            if let Some(gb) = accumulate(grads, nodes, *b) {
                for ((o, &x), &y) in gb.iter_mut().zip(g).zip(ad) {
                    *o = *o + x * y;
                }
            }
        }
        Op::AddRow { a, row } => {
            if let Some(ga) = accumulate(grads, nodes, *a) {
                add_into(ga, g);
            }
            let d = val(*row).numel();
            if let Some(gr) = accumulate(grads, nodes, *row) {
                for chunk in g.chunks_exact(d) {
                    add_into(gr, chunk);
                }
            }
        }
        Op::Scale { a, c } => {
            if let Some(ga) = accumulate(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(o, &x)| *o = *o + x * *c);
            }
        }
        Op::Gelu { a } => {
            let (k, s) = (c::<T>(GELU_C), c::<T>(GELU_A));
            let (half, three) = (c::<T>(0.5), c::<T>(3.0));
            let ad = val(*a).data();
            if let Some(ga) = accumulate(grads, nodes, *a) {
                for ((o, &x), &gy) in ga.iter_mut().zip(ad).zip(g) {
                    let t = tanh(k * (x + s * x * x * x));
                    let d = half * (T::one() + t)
                        + half * x * (T::one() - t * t) * k * (T::one() + three * s * x * x);
                    *o = *o + gy * d;
                }
            }
        }
        Op::Log { a } => {
            let ad = val(*a).data();
            if let Some(ga) = accumulate(grads, nodes, *a) {
                for ((o, &x), &gy) in ga.iter_mut().zip(ad).zip(g) {
                    *o = *o + gy / x;
                }
            }
        }
        Op::Exp { a } => {
            let yd = node.value.data();
            if let Some(ga) = accumulate(grads, nodes, *a) {
                for ((o, &y), &gy) in ga.iter_mut().zip(yd).zip(g) {
                    *o = *o + gy * y;
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            mean,
            rstd,
        } => {
            let xd = val(*x).data();
            let d = val(*gain).numel();
            let gv = val(*gain).data();
            let dn = c::<T>(d as f64);
            if let Some(gg) = accumulate(grads, nodes, *gain) {
                for (r, (xr, gr)) in xd.chunks_exact(d).zip(g.chunks_exact(d)).enumerate() {
                    for j in 0..d {
                        gg[j] = gg[j] + gr[j] * (xr[j] - mean[r]) * rstd[r];
                    }
                }
            }
            if let Some(gb) = accumulate(grads, nodes, *bias) {
                for gr in g.chunks_exact(d) {
                    add_into(gb, gr);
                }
            }
            if let Some(gx) = accumulate(grads, nodes, *x) {
                let mut dxhat = vec![T::zero(); d];
                for (r, ((xr, gr), ox)) in xd
                    .chunks_exact(d)
                    .zip(g.chunks_exact(d))
                    .zip(gx.chunks_exact_mut(d))
                    .enumerate()
                {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..d {
                        dxhat[j] = gr[j] * gv[j];
                        s1 = s1 + dxhat[j];
                        s2 = s2 + dxhat[j] * (xr[j] - mu) * rs;
                    }
                    s1 = s1 / dn;
                    s2 = s2 / dn;
                    for j in 0..d {
                        let xhat = (xr[j] - mu) * rs;
                        ox[j] = ox[j] + rs * (dxhat[j] - s1 - xhat * s2);
                    }
                }
            }
        }
        Op::Softmax { a, outer, n, inner } => {
            let y = node.value.data();
            let (outer, n, inner) = (*outer, *n, *inner);
            if let Some(ga) = accumulate(grads, nodes, *a) {
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| o * n * inner + i * inner + j;
                        let dotp = (0..n).map(|i| g[at(i)] * y[at(i)]).sum::<T>();
                        for i in 0..n {
                            ga[at(i)] = ga[at(i)] + y[at(i)] * (g[at(i)] - dotp);
                        }
                    }
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            spec,
            probs,
        } => attention_backward(nodes, grads, g, *q, *k, *v, spec, probs),
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let classes = val(*logits).shape()[1];
            let scale = g[0] / c::<T>(targets.len() as f64);
            if let Some(gl) = accumulate(grads, nodes, *logits) {
                for (r, &t) in targets.iter().enumerate() {
                    let row = &probs[r * classes..(r + 1) * classes];
                    let out = &mut gl[r * classes..(r + 1) * classes];
                    for j in 0..classes {
                        let y = if j == t { T::one() } else { T::zero() };
                        out[j] = out[j] + scale * (row[j] - y);
                    }
                }
            }
        }
        Op::GatherRows { a, idx } => {
            let d = val(*a).cols();
            if let Some(ga) = accumulate(grads, nodes, *a) {
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut ga[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
        }
        Op::ConcatRows { parts } => {
            let mut off = 0;
            for &p in parts {
                let n = val(p).numel();
                if let Some(gp) = accumulate(grads, nodes, p) {
                    add_into(gp, &g[off..off + n]);
                }
                off += n;
            }
        }
        Op::ConcatCols { a, b } => {
            let (ca, cb) = (val(*a).shape()[1], val(*b).shape()[1]);
            let w = ca + cb;
            if let Some(ga) = accumulate(grads, nodes, *a) {
                for (o, gr) in ga.chunks_exact_mut(ca).zip(g.chunks_exact(w)) {
                    add_into(o, &gr[..ca]);
                }
            }
            if let Some(gb) = accumulate(grads, nodes, *b) {
                for (o, gr) in gb.chunks_exact_mut(cb).zip(g.chunks_exact(w)) {
                    add_into(o, &gr[ca..]);
                }
            }
        }
        Op::L2NormRows { a, norms } => {
            let y = node.value.data();
            let d = val(*a).cols();
            if let Some(ga) = accumulate(grads, nodes, *a) {
                for (r, ((o, yr), gr)) in ga
                    .chunks_exact_mut(d)
                    .zip(y.chunks_exact(d))
                    .zip(g.chunks_exact(d))
                    .enumerate()
                {
                    let yg = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum::<T>();
                    for j in 0..d {
                        o[j] = o[j] + (gr[j] - yr[j] * yg) / norms[r];
                    }
                }
            }
        }
        Op::Sum { a } => {
            if let Some(ga) = accumulate(grads, nodes, *a) {
                ga.iter_mut().for_each(|o| *o = *o + g[0]);
            }
        }
        Op::Mean { a } => {
            let n = c::<T>(val(*a).numel() as f64);
            if let Some(ga) = accumulate(grads, nodes, *a) {
                ga.iter_mut().for_each(|o| *o = *o + g[0] / n);
            }
        }
        Op::Reshape { a } => {
            if let Some(ga) = accumulate(grads, nodes, *a) {
                add_into(ga, g);
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(o, &x)| *o = *o + x);
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    g: &[T],
    q: Var,
    k: Var,
    v: Var,
    spec: &AttentionSpec,
    probs: &[T],
) {
    let AttentionSpec {
        batch,
        heads,
        q_len,
        k_len,
        ..
    } = *spec;
    let qw = nodes[q.0].value.cols();
    let vw = nodes[v.0].value.cols();
    let (dk, dv) = (qw / heads, vw / heads);
    let scale = T::one() / c::<T>(dk as f64).sqrt();
    let (qd, kd, vd) = (
        nodes[q.0].value.data(),
        nodes[k.0].value.data(),
        nodes[v.0].value.data(),
    );

    // dS for every (batch, head) block, computed once and reused for dQ/dK.
    let mut ds = vec![T::zero(); probs.len()];
    let mut dp = vec![T::zero(); q_len * k_len];
    for b in 0..batch {
        for h in 0..heads {
            let blk = (b * heads + h) * q_len * k_len;
            let p = &probs[blk..blk + q_len * k_len];
            // dP = dO Vᵀ
            T::gemm_raw(
                q_len,
                dv,
                k_len,
                T::one(),
                g,
                Layout::new(b * q_len * vw + h * dv, vw, 1),
                vd,
                Layout::new(b * k_len * vw + h * dv, 1, vw),
                &mut dp,
                Layout::new(0, k_len, 1),
                false,
            );
            let out = &mut ds[blk..blk + q_len * k_len];
            for ((o, pr), dr) in out
                .chunks_exact_mut(k_len)
                .zip(p.chunks_exact(k_len))
                .zip(dp.chunks_exact(k_len))
            {
                let s = pr.iter().zip(dr).map(|(&x, &y)| x * y).sum::<T>();
                for j in 0..k_len {
                    o[j] = pr[j] * (dr[j] - s) * scale;
                }
            }
        }
    }
    if let Some(gv) = accumulate(grads, nodes, v) {
        for b in 0..batch {
            for h in 0..heads {
                let blk = (b * heads + h) * q_len * k_len;
                // dV = Pᵀ dO
                T::gemm_raw(
                    k_len,
                    q_len,
                    dv,
                    T::one(),
                    probs,
                    Layout::new(blk, 1, k_len),
                    g,
                    Layout::new(b * q_len * vw + h * dv, vw, 1),
                    gv,
                    Layout::new(b * k_len * vw + h * dv, vw, 1),
                    true,
                );
            }
        }
    }
    if let Some(gq) = accumulate(grads, nodes, q) {
        for b in 0..batch {
            for h in 0..heads {
                let blk = (b * heads + h) * q_len * k_len;
                // dQ = dS K
                T::gemm_raw(
                    q_len,
                    k_len,
                    dk,
                    T::one(),
                    &ds,
                    Layout::new(blk, k_len, 1),
                    kd,
                    Layout::new(b * k_len * qw + h * dk, qw, 1),
                    gq,
                    Layout::new(b * q_len * qw + h * dk, qw, 1),
                    true,
                );
            }
        }
    }
    if let Some(gk) = accumulate(grads, nodes, k) {
        for b in 0..batch {
            for h in 0..heads {
                let blk = (b * heads + h) * q_len * k_len;
                // dK = dSᵀ Q
                T::gemm_raw(
                    k_len,
                    q_len,
                    dk,
                    T::one(),
                    &ds,
                    Layout::new(blk, 1, k_len),
                    qd,
                    Layout::new(b * q_len * qw + h * dk, qw, 1),
                    gk,
                    Layout::new(b * k_len * qw + h * dk, qw, 1),
                    true,
                );
            }
        }
    }
}
