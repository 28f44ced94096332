use std::collections::HashMap;

use super::kernels::{axpy, dot, matmul_acc, matmul_nt, matmul_tn_acc};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rhs is a row vector repeated over the rows of lhs
    Row,
    /// rhs is a scalar
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Relu,
    Silu,
    Gelu,
    Sigmoid,
    Abs,
    Exp,
    Ln,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, T),
    Unary(Var, Unary),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Softmax(Var, usize),
    LogSoftmaxRows(Var),
    RmsNorm { x: Var, gamma: Var, eps: T },
    Gather { table: Var, ids: Vec<usize> },
    SelectRows { x: Var, rows: Vec<usize> },
    ConcatRows(Vec<Var>),
    MaskFill { x: Var, mask: Vec<bool> },
    L2NormalizeRows(Var),
    PickPerRow { x: Var, cols: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, heads: usize, causal: bool, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of executed operations.
///
/// Records are appended in forward execution order, so inputs always precede
/// the records that consume them. [`Tape::backward`] walks the records once in
/// reverse and sums gradient contributions over fan-out in that order, which
/// makes the result deterministic. The tape stays usable after `backward`;
/// calling it again recomputes every gradient from scratch.
#[derive(Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<usize, Var>,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn broadcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    let b_numel: usize = b.iter().product();
    if b_numel == 1 && b.len() <= 1 {
        return Ok(Broadcast::Scalar);
    }
    if a.len() == 2 && b.len() == 1 && a[1] == b[0] {
        return Ok(Broadcast::Row);
    }
    Err(shape_err(op, a, b))
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn unary_fwd<T: Real>(u: Unary, x: T) -> T {
    match u {
        Unary::Relu => {
            if x > T::zero() {
                x
            } else {
                T::zero()
            }
        }
        Unary::Silu => x * sigmoid(x),
        Unary::Gelu => {
            let c = T::lit(GELU_C);
            let inner = c * (x + T::lit(0.044715) * x * x * x);
            T::lit(0.5) * x * (T::one() + inner.tanh())
        }
        Unary::Sigmoid => sigmoid(x),
        Unary::Abs => x.abs(),
        Unary::Exp => x.exp(),
        Unary::Ln => x.ln(),
    }
}

fn unary_grad<T: Real>(u: Unary, x: T, y: T) -> T {
    match u {
        Unary::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Unary::Silu => {
            let s = sigmoid(x);
            s * (T::one() + x * (T::one() - s))
        }
        Unary::Gelu => {
            let c = T::lit(GELU_C);
            let a = T::lit(0.044715);
            let inner = c * (x + a * x * x * x);
            let t = inner.tanh();
            let dinner = c * (T::one() + T::lit(3.0) * a * x * x);
            T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * dinner
        }
        Unary::Sigmoid => y * (T::one() - y),
        Unary::Abs => {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }
        Unary::Exp => y,
        Unary::Ln => T::one() / x,
    }
}

/// Iterate softmax groups: (offset, stride) for each group of `len` elements.
fn softmax_groups(shape: &[usize], axis: usize) -> (Vec<(usize, usize)>, usize) {
    match (shape.len(), axis) {
        (2, 0) => ((0..shape[1]).map(|j| (j, shape[1])).collect(), shape[0]),
        (2, _) => ((0..shape[0]).map(|i| (i * shape[1], 1)).collect(), shape[1]),
        _ => (vec![(0, 1)], shape.iter().product()),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Put a model parameter on the tape. Repeated calls with the same
    /// storage return the same leaf, so a weight used by many sequences in a
    /// batch accumulates a single gradient.
    pub fn param(&mut self, value: &Tensor<T>, requires_grad: bool) -> Var {
        let id = value.storage_id();
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(value.clone(), requires_grad);
        self.params.insert(id, v);
        v
    }

    /// The leaf previously created for this parameter storage, if any.
    pub fn param_var(&self, value: &Tensor<T>) -> Option<Var> {
        self.params.get(&value.storage_id()).copied()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `x · wᵀ` for `x: [m,k]`, `w: [n,k]`; the layout of stored weights.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(shape_err("linear", sx, sw));
        }
        let (m, k, n) = (sx[0], sx[1], sw[0]);
        let out = matmul_nt(self.value(x).data(), self.value(w).data(), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMulNT(x, w), &[x, w]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err("transpose", &s, &[]));
        }
        let (m, n) = (s[0], s[1]);
        let d = self.value(x).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        Ok(self.push(t, Op::Transpose(x), &[x]))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, Broadcast)> {
        let kind = broadcast_kind(name, self.shape(a), self.shape(b))?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let out: Vec<T> = match kind {
            Broadcast::Same => av.data().iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Scalar => av.data().iter().map(|&x| f(x, bv[0])).collect(),
            Broadcast::Row => {
                let n = bv.len();
                av.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, bv[i % n]))
                    .collect()
            }
        };
        Ok((Tensor::new(av.shape().to_vec(), out)?, kind))
    }

    /// Elementwise sum; `b` may also be a scalar or a row vector over a matrix.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, k) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b, k), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, k) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b, k), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, k) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b, k), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a * c).collect())
            .expect("same shape");
        self.push(t, Op::Scale(x, c), &[x])
    }

    fn unary(&mut self, x: Var, u: Unary) -> Var {
        let v = self.value(x);
        let t = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&a| unary_fwd(u, a)).collect(),
        )
        .expect("same shape");
        self.push(t, Op::Unary(x, u), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }
    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }
    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }
    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Ln)
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum();
        let m = s / T::lit(v.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Column means of a matrix: `[m,n] -> [n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.shape().len() != 2 || v.rows() == 0 {
            return Err(shape_err("mean_rows", v.shape(), &[]));
        }
        let (m, n) = (v.rows(), v.cols());
        let mut out = vec![T::zero(); n];
        for i in 0..m {
            for (o, &a) in out.iter_mut().zip(v.row(i)) {
                *o += a;
            }
        }
        let inv = T::one() / T::lit(m as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(x), &[x]))
    }

    // ---- normalisation ----------------------------------------------------

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let rank = v.shape().len().max(1);
        if axis >= rank {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for shape {:?}",
                v.shape()
            )));
        }
        let (groups, len) = softmax_groups(v.shape(), axis);
        let d = v.data();
        let mut out = vec![T::zero(); d.len()];
        for (off, stride) in groups {
            let idx = |i: usize| off + i * stride;
            let mx = (0..len).map(|i| d[idx(i)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for i in 0..len {
                let e = (d[idx(i)] - mx).exp();
                out[idx(i)] = e;
                z += e;
            }
            for i in 0..len {
                out[idx(i)] = out[idx(i)] / z;
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax(x, axis), &[x]))
    }

    /// Row-wise log-softmax of a matrix (or of a vector as a single row).
    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (m, n) = (v.rows(), v.cols());
        let d = v.data();
        let mut out = vec![T::zero(); d.len()];
        for i in 0..m {
            let row = &d[i * n..(i + 1) * n];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&a| (a - mx).exp()).sum();
            let lz = mx + z.ln();
            for j in 0..n {
                out[i * n + j] = row[j] - lz;
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        self.push(t, Op::LogSoftmaxRows(x), &[x])
    }

    /// `y = gamma ⊙ x / sqrt(mean(x²) + eps)` per row.
    pub fn rms_norm(&mut self, x: Var, gamma: Var, eps: T) -> Result<Var> {
        let (sx, sg) = (self.shape(x), self.shape(gamma));
        if sg.len() != 1 || sx.last() != sg.first() {
            return Err(shape_err("rms_norm", sx, sg));
        }
        let v = self.value(x);
        let g = self.value(gamma).data();
        let (m, n) = (v.rows(), v.cols());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = v.row(i);
            let ms = dot(row, row) / T::lit(n as f64);
            let inv = T::one() / (ms + eps).sqrt();
            for j in 0..n {
                out[i * n + j] = g[j] * (row[j] * inv);
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(t, Op::RmsNorm { x, gamma, eps }, &[x, gamma]))
    }

    /// Divide each row by its Euclidean norm; zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (m, n) = (v.rows(), v.cols());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = v.row(i);
            let nrm = dot(row, row).sqrt();
            if nrm > T::zero() || nrm.is_nan() {
                for j in 0..n {
                    out[i * n + j] = row[j] / nrm;
                }
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        self.push(t, Op::L2NormalizeRows(x), &[x])
    }

    // ---- indexing -------------------------------------------------------

    /// Rows `ids` of `table`, as a `[ids.len(), cols]` matrix.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(shape_err("gather_rows", tv.shape(), &[ids.len()]));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= tv.rows()) {
            return Err(Error::contract(format!(
                "row index {bad} out of range for table with {} rows",
                tv.rows()
            )));
        }
        let t = tv.select_rows(ids);
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Like [`Tape::gather_rows`] but differentiated as a selection of `x`.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if let Some(&bad) = rows.iter().find(|&&i| i >= v.rows()) {
            return Err(Error::contract(format!(
                "row {bad} out of range for {:?}",
                v.shape()
            )));
        }
        let mut t = v.select_rows(rows);
        if v.shape().len() == 1 {
            t = t.reshape(vec![v.cols()])?;
        }
        Ok(self.push(
            t,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Stack rows (or vectors as rows) into one matrix.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let n = self.value(*first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let v = self.value(x);
            if v.cols() != n || v.shape().len() == 0 {
                return Err(shape_err("concat_rows", self.shape(*first), v.shape()));
            }
            out.extend_from_slice(v.data());
            rows += v.rows();
        }
        let t = Tensor::new(vec![rows, n], out)?;
        Ok(self.push(t, Op::ConcatRows(xs.to_vec()), xs))
    }

    /// Replace entries where `mask` is true with `-inf`.
    pub fn mask_fill(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let v = self.value(x);
        if mask.len() != v.numel() {
            return Err(shape_err("mask_fill", v.shape(), &[mask.len()]));
        }
        let out = v
            .data()
            .iter()
            .zip(mask)
            .map(|(&a, &m)| if m { T::neg_infinity() } else { a })
            .collect();
        let t = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::MaskFill {
                x,
                mask: mask.to_vec(),
            },
            &[x],
        ))
    }

    /// `out[i] = x[i, cols[i]]`.
    pub fn pick_per_row(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if v.shape().len() != 2 || cols.len() != v.rows() || cols.iter().any(|&c| c >= v.cols()) {
            return Err(shape_err("pick_per_row", v.shape(), &[cols.len()]));
        }
        let out = cols.iter().enumerate().map(|(i, &c)| v.row(i)[c]).collect();
        Ok(self.push(
            Tensor::vector(out),
            Op::PickPerRow {
                x,
                cols: cols.to_vec(),
            },
            &[x],
        ))
    }

    // ---- attention ------------------------------------------------------

    /// Multi-head scaled dot-product attention over `[t, d]` inputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        if sq.len() != 2 || self.shape(k) != sq.as_slice() || self.shape(v) != sq.as_slice() {
            return Err(shape_err("attention", &sq, self.shape(k)));
        }
        let (t, d) = (sq[0], sq[1]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::contract(format!(
                "width {d} not divisible into {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![T::zero(); heads * t * t];
        let mut out = vec![T::zero(); t * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let qi = &qd[i * d + off..i * d + off + dh];
                let p = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
                let upto = if causal { i + 1 } else { t };
                let mut mx = T::neg_infinity();
                for j in 0..upto {
                    let s = dot(qi, &kd[j * d + off..j * d + off + dh]) * scale;
                    p[j] = s;
                    mx = mx.max(s);
                }
                let mut z = T::zero();
                for pj in p.iter_mut().take(upto) {
                    *pj = (*pj - mx).exp();
                    z += *pj;
                }
                for pj in p.iter_mut().take(upto) {
                    *pj = *pj / z;
                }
                let o = &mut out[i * d + off..i * d + off + dh];
                for j in 0..upto {
                    axpy(p[j], &vd[j * d + off..j * d + off + dh], o);
                }
            }
        }
        let val = Tensor::new(vec![t, d], out)?;
        Ok(self.push(
            val,
            Op::Attention {
                q,
                k,
                v,
                heads,
                causal,
                probs,
            },
            &[q, k, v],
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            backprop(&self.nodes, i, &g, &mut self.grads);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient of the last `backward` loss w.r.t. `v`. `None` when `v` does
    /// not require gradients; zeros when it does but lies off the loss path.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let shape = node.value.shape().to_vec();
        Some(match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(shape),
        })
    }

    /// Gradient for a parameter registered through [`Tape::param`].
    pub fn param_grad(&self, value: &Tensor<T>) -> Option<Tensor<T>> {
        self.param_var(value).and_then(|v| self.grad(v))
    }
}

fn acc<'g, T: Real>(grads: &'g mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> Option<&'g mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    let slot = &mut grads[v.0];
    if slot.is_none() {
        *slot = Some(vec![T::zero(); node.value.numel()]);
    }
    slot.as_mut()
}

fn add_into<T: Real>(dst: &mut [T], src: impl Iterator<Item = T>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Reduce a broadcast gradient back onto the rhs operand.
fn reduce_rhs<T: Real>(kind: Broadcast, g: &[T], dst: &mut [T], mut f: impl FnMut(usize) -> T) {
    match kind {
        Broadcast::Same => {
            for (i, d) in dst.iter_mut().enumerate() {
                *d += g[i] * f(i);
            }
        }
        Broadcast::Scalar => {
            let mut s = T::zero();
            for (i, &gi) in g.iter().enumerate() {
                s += gi * f(i);
            }
            dst[0] += s;
        }
        Broadcast::Row => {
            let n = dst.len();
            for (i, &gi) in g.iter().enumerate() {
                dst[i % n] += gi * f(i);
            }
        }
    }
}

fn rhs_index(kind: Broadcast, i: usize, n: usize) -> usize {
    match kind {
        Broadcast::Same => i,
        Broadcast::Scalar => 0,
        Broadcast::Row => i % n,
    }
}

fn backprop<T: Real>(nodes: &[Node<T>], i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[i];
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if let Some(ga) = acc(grads, nodes, *a) {
                // dA = dC · Bᵀ
                let d = matmul_nt(g, bv.data(), m, n, k);
                add_into(ga, d.into_iter());
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                // dB = Aᵀ · dC
                matmul_tn_acc(av.data(), g, gb, m, k, n);
            }
        }
        Op::MatMulNT(x, w) => {
            let (xv, wv) = (val(*x), val(*w));
            let (m, k, n) = (xv.rows(), xv.cols(), wv.rows());
            if let Some(gx) = acc(grads, nodes, *x) {
                matmul_acc(g, wv.data(), gx, m, n, k);
            }
            if let Some(gw) = acc(grads, nodes, *w) {
                matmul_tn_acc(g, xv.data(), gw, m, n, k);
            }
        }
        Op::Transpose(x) => {
            let (m, n) = (val(*x).rows(), val(*x).cols());
            if let Some(gx) = acc(grads, nodes, *x) {
                for r in 0..m {
                    for c in 0..n {
                        gx[r * n + c] += g[c * m + r];
                    }
                }
            }
        }
        Op::Add(a, b, kind) | Op::Sub(a, b, kind) => {
            let neg = matches!(node.op, Op::Sub(..));
            if let Some(ga) = acc(grads, nodes, *a) {
                add_into(ga, g.iter().copied());
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                let sign = if neg { -T::one() } else { T::one() };
                reduce_rhs(*kind, g, gb, |_| sign);
            }
        }
        Op::Mul(a, b, kind) => {
            let (ad, bd) = (val(*a).data(), val(*b).data());
            let n = bd.len();
            if let Some(ga) = acc(grads, nodes, *a) {
                for (j, gi) in g.iter().enumerate() {
                    ga[j] += *gi * bd[rhs_index(*kind, j, n)];
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                reduce_rhs(*kind, g, gb, |j| ad[j]);
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                add_into(gx, g.iter().map(|&gi| gi * *c));
            }
        }
        Op::Unary(x, u) => {
            let xd = val(*x).data();
            let yd = node.value.data();
            if let Some(gx) = acc(grads, nodes, *x) {
                for j in 0..gx.len() {
                    gx[j] += g[j] * unary_grad(*u, xd[j], yd[j]);
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(x) => {
            let n = T::lit(val(*x).numel() as f64);
            if let Some(gx) = acc(grads, nodes, *x) {
                let s = g[0] / n;
                gx.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::MeanRows(x) => {
            let (m, n) = (val(*x).rows(), val(*x).cols());
            let inv = T::one() / T::lit(m as f64);
            if let Some(gx) = acc(grads, nodes, *x) {
                for r in 0..m {
                    for c in 0..n {
                        gx[r * n + c] += g[c] * inv;
                    }
                }
            }
        }
        Op::Softmax(x, axis) => {
            let y = node.value.data();
            let (groups, len) = softmax_groups(node.value.shape(), *axis);
            if let Some(gx) = acc(grads, nodes, *x) {
                for (off, stride) in groups {
                    let idx = |t: usize| off + t * stride;
                    let s: T = (0..len).map(|t| g[idx(t)] * y[idx(t)]).sum();
                    for t in 0..len {
                        gx[idx(t)] += y[idx(t)] * (g[idx(t)] - s);
                    }
                }
            }
        }
        Op::LogSoftmaxRows(x) => {
            let y = node.value.data();
            let (m, n) = (node.value.rows(), node.value.cols());
            if let Some(gx) = acc(grads, nodes, *x) {
                for r in 0..m {
                    let gs: T = g[r * n..(r + 1) * n].iter().copied().sum();
                    for c in 0..n {
                        let p = y[r * n + c].exp();
                        gx[r * n + c] += g[r * n + c] - p * gs;
                    }
                }
            }
        }
        Op::RmsNorm { x, gamma, eps } => {
            let xv = val(*x);
            let gam = val(*gamma).data();
            let (m, n) = (xv.rows(), xv.cols());
            let nf = T::lit(n as f64);
            let mut dgamma = vec![T::zero(); n];
            let mut dx = vec![T::zero(); m * n];
            for r in 0..m {
                let row = xv.row(r);
                let gr = &g[r * n..(r + 1) * n];
                let ms = dot(row, row) / nf;
                let rms = (ms + *eps).sqrt();
                let inv = T::one() / rms;
                let mut s = T::zero();
                for c in 0..n {
                    s += gr[c] * gam[c] * row[c];
                    dgamma[c] += gr[c] * row[c] * inv;
                }
                let k = s / (nf * rms * rms * rms);
                for c in 0..n {
                    dx[r * n + c] = gam[c] * gr[c] * inv - row[c] * k;
                }
            }
            if let Some(gx) = acc(grads, nodes, *x) {
                add_into(gx, dx.into_iter());
            }
            if let Some(gg) = acc(grads, nodes, *gamma) {
                add_into(gg, dgamma.into_iter());
            }
        }
        Op::L2NormalizeRows(x) => {
            let xv = val(*x);
            let y = node.value.data();
            let (m, n) = (xv.rows(), xv.cols());
            if let Some(gx) = acc(grads, nodes, *x) {
                for r in 0..m {
                    let row = xv.row(r);
                    let nrm = dot(row, row).sqrt();
                    if nrm == T::zero() {
                        continue;
                    }
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let yg = dot(yr, gr);
                    for c in 0..n {
                        gx[r * n + c] += (gr[c] - yr[c] * yg) / nrm;
                    }
                }
            }
        }
        Op::Gather { table, ids } => {
            let n = val(*table).cols();
            if let Some(gt) = acc(grads, nodes, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * n..(id + 1) * n], g[r * n..(r + 1) * n].iter().copied());
                }
            }
        }
        Op::SelectRows { x, rows } => {
            let n = val(*x).cols();
            if let Some(gx) = acc(grads, nodes, *x) {
                for (r, &src) in rows.iter().enumerate() {
                    add_into(&mut gx[src * n..(src + 1) * n], g[r * n..(r + 1) * n].iter().copied());
                }
            }
        }
        Op::ConcatRows(xs) => {
            let mut off = 0;
            for &x in xs {
                let len = val(x).numel();
                if let Some(gx) = acc(grads, nodes, x) {
                    add_into(gx, g[off..off + len].iter().copied());
                }
                off += len;
            }
        }
        Op::MaskFill { x, mask } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for (j, &m) in mask.iter().enumerate() {
                    if !m {
                        gx[j] += g[j];
                    }
                }
            }
        }
        Op::PickPerRow { x, cols } => {
            let n = val(*x).cols();
            if let Some(gx) = acc(grads, nodes, *x) {
                for (r, &c) in cols.iter().enumerate() {
                    gx[r * n + c] += g[r];
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            causal,
            probs,
        } => {
            let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
            let (t, d) = (val(*q).rows(), val(*q).cols());
            let dh = d / heads;
            let scale = T::one() / T::lit(dh as f64).sqrt();
            let mut dq = vec![T::zero(); t * d];
            let mut dk = vec![T::zero(); t * d];
            let mut dv = vec![T::zero(); t * d];
            let mut dp = vec![T::zero(); t];
            for h in 0..*heads {
                let off = h * dh;
                for i in 0..t {
                    let p = &probs[(h * t + i) * t..(h * t + i + 1) * t];
                    let upto = if *causal { i + 1 } else { t };
                    let go = &g[i * d + off..i * d + off + dh];
                    let mut s = T::zero();
                    for j in 0..upto {
                        axpy(p[j], go, &mut dv[j * d + off..j * d + off + dh]);
                        dp[j] = dot(go, &vd[j * d + off..j * d + off + dh]);
                        s += p[j] * dp[j];
                    }
                    for j in 0..upto {
                        let ds = p[j] * (dp[j] - s) * scale;
                        axpy(ds, &kd[j * d + off..j * d + off + dh], &mut dq[i * d + off..i * d + off + dh]);
                        axpy(ds, &qd[i * d + off..i * d + off + dh], &mut dk[j * d + off..j * d + off + dh]);
                    }
                }
            }
            for (var, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                if let Some(gx) = acc(grads, nodes, var) {
                    add_into(gx, buf.into_iter());
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(t: &mut Tape<f64>, r: usize, c: usize, d: &[f64], rg: bool) -> Var {
        t.leaf(Tensor::matrix(r, c, d.to_vec()).unwrap(), rg)
    }

    #[test]
    fn matmul_identity_and_inner_product() {
        let mut t = Tape::<f64>::new();
        let i = mat(&mut t, 2, 2, &[1., 0., 0., 1.], false);
        let b = mat(&mut t, 2, 2, &[3., 4., 5., 6.], false);
        let c = t.matmul(i, b).unwrap();
        assert_eq!(t.value(c).data(), &[3., 4., 5., 6.]);
        let a = mat(&mut t, 1, 2, &[1., 2.], false);
        let b = mat(&mut t, 2, 1, &[3., 4.], false);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[11.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::<f64>::new();
        let a = mat(&mut t, 2, 3, &[0.; 6], false);
        let b = mat(&mut t, 2, 3, &[0.; 6], false);
        let msg = t.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::vector(vec![0., 0., 0.]));
        let y = t.softmax(x, 0).unwrap();
        for &p in t.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        let x = t.constant(Tensor::vector(vec![1000., 0.]));
        let y = t.softmax(x, 0).unwrap();
        let d = t.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1] < 1e-300 && d[1].is_finite());
        let x = t.constant(Tensor::vector(vec![1., 2., 3.]));
        let y = t.softmax(x, 0).unwrap();
        let expected = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219];
        for (a, b) in t.value(y).data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-5);
        }
        assert!(t.softmax(x, 1).is_err());
    }

    #[test]
    fn softmax_column_axis() {
        let mut t = Tape::<f64>::new();
        let x = mat(&mut t, 2, 2, &[1., 5., 1., -5.], false);
        let y = t.softmax(x, 0).unwrap();
        let d = t.value(y).data();
        assert!((d[0] - 0.5).abs() < 1e-12 && (d[1] + d[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rms_norm_examples() {
        let mut t = Tape::<f64>::new();
        let g = t.constant(Tensor::ones(vec![4]));
        let x = t.constant(Tensor::vector(vec![1.; 4]));
        let y = t.rms_norm(x, g, 0.0).unwrap();
        assert_eq!(t.value(y).data(), &[1.; 4]);
        let g = t.constant(Tensor::ones(vec![2]));
        let x = t.constant(Tensor::vector(vec![2., 0.]));
        let y = t.rms_norm(x, g, 0.0).unwrap();
        assert!((t.value(y).data()[0] - 1.41421).abs() < 1e-5);
        assert_eq!(t.value(y).data()[1], 0.0);
    }

    #[test]
    fn activations() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::vector(vec![-3., 2., 0., 1.]));
        let r = t.relu(x);
        let s = t.sigmoid(x);
        let si = t.silu(x);
        assert_eq!(&t.value(r).data()[..2], &[0., 2.]);
        assert_eq!(t.value(s).data()[2], 0.5);
        assert!((t.value(si).data()[3] - 0.7310585786300049).abs() < 1e-5);
    }

    #[test]
    fn backward_of_sum_and_square() {
        let mut t = Tape::<f64>::new();
        let x = mat(&mut t, 2, 3, &[1., -2., 3., 0.5, 0., 4.], true);
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.; 6]);

        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2., -4., 6., 1., 0., 8.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::<f64>::new();
        let x = mat(&mut t, 2, 2, &[1.; 4], true);
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
        let mut empty = Tape::<f64>::new();
        let _ = &mut empty;
    }

    #[test]
    fn off_path_gradients_are_zero() {
        let mut t = Tape::<f64>::new();
        let x = mat(&mut t, 1, 2, &[1., 2.], true);
        let unused = mat(&mut t, 1, 2, &[3., 4.], true);
        let c = t.constant(Tensor::vector(vec![5.0, 6.0]));
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(unused).unwrap().data(), &[0., 0.]);
        assert!(t.grad(c).is_none());
    }

    #[test]
    fn broadcasting_rules() {
        let mut t = Tape::<f64>::new();
        let m = mat(&mut t, 2, 3, &[1.; 6], false);
        let row = t.constant(Tensor::vector(vec![1., 2., 3.]));
        let bad = t.constant(Tensor::vector(vec![1., 2.]));
        let sc = t.constant(Tensor::scalar(2.0));
        assert!(t.add(m, row).is_ok());
        assert!(t.mul(m, sc).is_ok());
        assert!(t.add(m, bad).is_err());
        let col = mat(&mut t, 2, 1, &[1., 1.], false);
        assert!(t.add(m, col).is_err());
    }

    #[test]
    fn param_is_memoized_by_storage() {
        let w = Tensor::<f64>::ones(vec![2, 2]);
        let mut t = Tape::new();
        let a = t.param(&w, true);
        let b = t.param(&w.clone(), true);
        assert_eq!(a, b);
        let other = Tensor::<f64>::ones(vec![2, 2]);
        assert_ne!(t.param(&other, true), a);
    }
}
