use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// Handle to a tensor recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Gelu { x: Var, tanh: Vec<T> },
    Attention { qkv: Var, batch: usize, heads: usize, probs: Vec<T> },
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, probs: Vec<T> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Gather { x: Var, indices: Vec<usize> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Cosine { a: Var, b: Var },
    L2Normalize { x: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run tape. Operations are appended in execution order, so the
/// insertion order is a topological order and backward walks it in reverse.
///
/// Gradients of leaves that require them are accumulated additively across
/// `backward` calls until [`Graph::zero_grad`].
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    degenerate: usize,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Denominator clamp for cosine similarity and L2 normalization.
pub const NORM_EPS: f64 = 1e-12;

const LAYER_NORM_EPS: f64 = 1e-6;

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Gradient buffer of `v`, allocated on demand; `None` if `v` needs no gradient.
fn grad_slot<'a, T: Scalar>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044715;

/// Derivative of the tanh-approximated GELU given `t = tanh(c (x + k x^3))`.
fn gelu_grad<T: Scalar>(x: T, t: T) -> T {
    let (c, k, half, one) = (T::lit(GELU_C), T::lit(GELU_K), T::lit(0.5), T::one());
    half * (one + t) + half * x * (one - t * t) * c * (one + T::lit(3.0) * k * x * x)
}

fn softmax_row<T: Scalar>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    row.iter_mut().for_each(|v| *v = *v - mx);
    T::exp_in_place(row);
    let z: T = row.iter().copied().sum();
    let inv = T::one() / z;
    row.iter_mut().for_each(|v| *v = *v * inv);
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            degenerate: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node so the graph can host the next pass.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.degenerate = 0;
    }

    /// Number of cosine/normalization evaluations that hit the zero-norm clamp.
    pub fn degenerate_inputs(&self) -> usize {
        self.degenerate
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.clear_grad();
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite output from {:?}", std::mem::discriminant(&op));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf; it requires grad iff the tensor says so.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad();
        let mut t = tensor;
        t.clear_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// A leaf that accumulates gradient.
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Same value as `x`, detached from the graph.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, rec: Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rec, rg))
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, rec: Op<T>) -> Var {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let out = Tensor::new(self.shape(x), data).expect("same numel");
        let rg = self.rg(&[x]);
        self.push(out, rec, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x[.., j] + row[j]` where `row` has the size of the last axis of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&1);
        if self.shape(row) != [n] {
            return Err(Error::shape("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.data(row).to_vec();
        let data = self
            .data(x)
            .chunks(n)
            .flat_map(|c| c.iter().zip(&r).map(|(&a, &b)| a + b))
            .collect();
        let out = Tensor::new(self.shape(x), data)?;
        let rg = self.rg(&[x, row]);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        self.map(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        self.map(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, |v| v.ln(), Op::Log(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, k, half, one, two) = (T::lit(GELU_C), T::lit(GELU_K), T::lit(0.5), T::one(), T::lit(2.0));
        let xs = self.data(x);
        let lim = T::lit(15.0);
        // tanh(u) = 1 - 2 / (exp(2u) + 1)
        let mut tanh: Vec<T> = xs
            .iter()
            .map(|&v| (two * c * (v + k * v * v * v)).max(-lim).min(lim))
            .collect();
        T::exp_in_place(&mut tanh);
        tanh.iter_mut().for_each(|e| *e = one - two / (*e + one));
        let data = xs.iter().zip(&tanh).map(|(&v, &t)| half * v * (one + t)).collect();
        let out = Tensor::new(self.shape(x), data).expect("same numel");
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu { x, tanh }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.data(a), k as isize, 1, self.data(b), n as isize, 1, T::zero(), &mut out, n as isize, 1);
        let out = Tensor::new(&[m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[]));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.data(x);
        let mut data = Vec::with_capacity(m * n);
        for j in 0..n {
            for i in 0..m {
                data.push(src[i * n + j]);
            }
        }
        let out = Tensor::new(&[n, m], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape("softmax", &shape, &[axis]));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = src.to_vec();
        if inner == 1 {
            for row in out.chunks_mut(n) {
                softmax_row(row);
            }
        } else {
            let mut buf = vec![T::zero(); n];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * n + a) * inner + i;
                    for (a, b) in buf.iter_mut().enumerate() {
                        *b = src[at(a)];
                    }
                    softmax_row(&mut buf);
                    for (a, &b) in buf.iter().enumerate() {
                        out[at(a)] = b;
                    }
                }
            }
        }
        let out = Tensor::new(&shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    /// Normalizes over the last axis, then applies `gamma * xhat + beta`.
    /// `log softmax` along the last axis, via max-subtracted log-sum-exp.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::shape("log_softmax", &shape, &[]))?;
        if n == 0 {
            return Err(Error::shape("log_softmax", &shape, &[]));
        }
        let mut out = self.data(x).to_vec();
        let mut probs = out.clone();
        for (row, p) in out.chunks_mut(n).zip(probs.chunks_mut(n)) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            row.iter_mut().for_each(|v| *v = *v - mx);
            p.copy_from_slice(row);
            T::exp_in_place(p);
            let z: T = p.iter().copied().sum();
            let lz = z.ln();
            let inv = T::one() / z;
            row.iter_mut().for_each(|v| *v = *v - lz);
            p.iter_mut().for_each(|v| *v = *v * inv);
        }
        let out = Tensor::new(&shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::LogSoftmax { x, probs }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm", &shape, &[]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let dn = T::lit(d as f64);
        let (g, b) = (self.data(gamma), self.data(beta));
        let rows = self.data(x).len() / d;
        let mut xhat = Vec::with_capacity(rows * d);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        for row in self.data(x).chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let out = Tensor::new(&shape, out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.data(x).len() as f64);
        let s = self.data(x).iter().copied().sum::<T>() / n;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", &shape, &[axis]));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..n {
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + src[(o * n + a) * inner + i];
                }
            }
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        let out = Tensor::new(&oshape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SumAxis { x, axis }, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let n = self.shape(v)[axis];
                let d = self.data(v);
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut oshape = base;
        oshape[axis] = total;
        let out = Tensor::new(&oshape, out)?;
        let rg = self.rg(xs);
        Ok(self.push(out, Op::Concat { xs: xs.to_vec(), axis }, rg))
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape("slice", &shape, &[axis, start, len]));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let out = Tensor::new(&oshape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Slice { x, axis, start }, rg))
    }

    /// Selects entries along axis 0; indices may repeat.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some(&n) = shape.first() else {
            return Err(Error::shape("gather", &shape, &[]));
        };
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather", &shape, &[bad]));
        }
        let inner: usize = shape[1..].iter().product();
        let src = self.data(x);
        let mut out = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            out.extend_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let mut oshape = shape;
        oshape[0] = indices.len();
        let out = Tensor::new(&oshape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Gather { x, indices: indices.to_vec() }, rg))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `qkv` is `[batch * T, 3 * d]` with each row packed as `[q | k | v]`;
    /// head `h` uses columns `h * d / heads ..` of each part. Sequences in the
    /// batch do not attend to each other. Output is `[batch * T, d]`.
    pub fn attention(&mut self, qkv: Var, batch: usize, heads: usize) -> Result<Var> {
        let shape = self.shape(qkv).to_vec();
        if shape.len() != 2 || batch == 0 || shape[0] % batch != 0 || heads == 0 || shape[1] % (3 * heads) != 0 {
            return Err(Error::shape("attention", &shape, &[batch, heads]));
        }
        let t = shape[0] / batch;
        let d = shape[1] / 3;
        let dh = d / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let src = self.data(qkv);
        let (rs, rsi) = (3 * d as isize, 3 * d);
        let mut probs = vec![T::zero(); batch * heads * t * t];
        let mut out = vec![T::zero(); batch * t * d];
        for b in 0..batch {
            for h in 0..heads {
                let base = b * t * rsi + h * dh;
                let p = &mut probs[(b * heads + h) * t * t..][..t * t];
                // S = Q Kᵀ
                T::gemm(t, dh, t, &src[base..], rs, 1, &src[base + d..], 1, rs, T::zero(), p, t as isize, 1);
                for row in p.chunks_mut(t) {
                    row.iter_mut().for_each(|v| *v = *v * scale);
                    softmax_row(row);
                }
                // O = P V
                T::gemm(t, t, dh, p, t as isize, 1, &src[base + 2 * d..], rs, 1, T::zero(), &mut out[b * t * d + h * dh..], d as isize, 1);
            }
        }
        let out = Tensor::new(&[batch * t, d], out)?;
        let rg = self.rg(&[qkv]);
        Ok(self.push(out, Op::Attention { qkv, batch, heads, probs }, rg))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
            return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
        }
        let (b, k) = (shape[0], shape[1]);
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(Error::Label {
                index,
                label,
                classes: k,
            });
        }
        let mut probs = Vec::with_capacity(b * k);
        let mut loss = T::zero();
        for (row, &y) in self.data(logits).chunks(k).zip(labels) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            loss = loss + lse - row[y];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let loss = loss / T::lit(b as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Cosine similarity along the last axis; output drops that axis.
    ///
    /// The norm product is clamped at [`NORM_EPS`]; hitting the clamp logs a
    /// warning and bumps [`Graph::degenerate_inputs`].
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_similarity", a, b)?;
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("cosine_similarity", &shape, &[]))?;
        let eps = T::lit(NORM_EPS);
        let mut out = Vec::with_capacity(self.data(a).len() / d.max(1));
        let mut degenerate = 0;
        for (ra, rb) in self.data(a).chunks(d).zip(self.data(b).chunks(d)) {
            let dot: T = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum();
            let na = ra.iter().map(|&x| x * x).sum::<T>().sqrt();
            let nb = rb.iter().map(|&x| x * x).sum::<T>().sqrt();
            let denom = na * nb;
            if denom <= eps {
                degenerate += 1;
            }
            out.push(dot / denom.max(eps));
        }
        if degenerate > 0 {
            log::warn!("cosine_similarity: {degenerate} zero-norm input row(s), denominator clamped");
            self.degenerate += degenerate;
        }
        let out = Tensor::new(&shape[..shape.len() - 1], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Cosine { a, b }, rg))
    }

    /// Scales each vector along the last axis to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("l2_normalize", &shape, &[]))?;
        let eps = T::lit(NORM_EPS);
        let mut out = Vec::with_capacity(self.data(x).len());
        let mut degenerate = 0;
        for row in self.data(x).chunks(d) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if n <= eps {
                degenerate += 1;
            }
            let n = n.max(eps);
            out.extend(row.iter().map(|&v| v / n));
        }
        if degenerate > 0 {
            log::warn!("l2_normalize: {degenerate} zero-norm row(s), norm clamped");
            self.degenerate += degenerate;
        }
        let out = Tensor::new(&shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::L2Normalize { x }, rg))
    }

    /// Reverse-mode sweep from a single-element `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![T::one()]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        macro_rules! with_grad {
            ($v:expr, |$buf:ident| $body:block) => {
                if let Some($buf) = grad_slot(nodes, grads, $v) {
                    $body
                }
            };
        }
        let val = |v: Var| nodes[v.0].value.data();

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                with_grad!(*a, |ga| { ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y) });
                with_grad!(*b, |gb| { gb.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y) });
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |ga| { ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y) });
                with_grad!(*b, |gb| { gb.iter_mut().zip(g).for_each(|(x, &y)| *x = *x - y) });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                with_grad!(*a, |ga| {
                    for ((x, &y), &w) in ga.iter_mut().zip(g).zip(vb) {
                        *x = *x + y * w;
                    }
                });
                with_grad!(*b, |gb| {
                    for ((x, &y), &w) in gb.iter_mut().zip(g).zip(va) {
                        *x = *x + y * w;
                    }
                });
            }
            Op::AddRow(x, r) => {
                with_grad!(*x, |gx| { gx.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b) });
                with_grad!(*r, |gr| {
                    let n = gr.len();
                    for row in g.chunks(n) {
                        gr.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
                    }
                });
            }
            Op::Scale(x, c) => {
                with_grad!(*x, |gx| { gx.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + *c * b) });
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                with_grad!(*x, |gx| { gx.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b) });
            }
            Op::Exp(x) => {
                let y = out.data();
                with_grad!(*x, |gx| {
                    for ((a, &b), &e) in gx.iter_mut().zip(g).zip(y) {
                        *a = *a + b * e;
                    }
                });
            }
            Op::Log(x) => {
                let xv = val(*x);
                with_grad!(*x, |gx| {
                    for ((a, &b), &v) in gx.iter_mut().zip(g).zip(xv) {
                        *a = *a + b / v;
                    }
                });
            }
            Op::Relu(x) => {
                let xv = val(*x);
                with_grad!(*x, |gx| {
                    for ((a, &b), &v) in gx.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *a = *a + b;
                        }
                    }
                });
            }
            Op::Gelu { x, tanh } => {
                let xv = val(*x);
                with_grad!(*x, |gx| {
                    for (((a, &b), &v), &t) in gx.iter_mut().zip(g).zip(xv).zip(tanh) {
                        *a = *a + b * gelu_grad(v, t);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                with_grad!(*a, |ga| {
                    // dA += dOut · Bᵀ
                    T::gemm(m, n, k, g, n as isize, 1, val(*b), 1, n as isize, T::one(), ga, k as isize, 1);
                });
                with_grad!(*b, |gb| {
                    // dB += Aᵀ · dOut
                    T::gemm(k, m, n, val(*a), 1, k as isize, g, n as isize, 1, T::one(), gb, n as isize, 1);
                });
            }
            Op::Transpose(x) => {
                let s = nodes[x.0].value.shape();
                let (m, n) = (s[0], s[1]);
                with_grad!(*x, |gx| {
                    for r in 0..m {
                        for c in 0..n {
                            gx[r * n + c] = gx[r * n + c] + g[c * m + r];
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                with_grad!(*x, |gx| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |a: usize| (o * n + a) * inner + ii;
                            let s: T = (0..n).map(|a| g[at(a)] * y[at(a)]).sum();
                            for a in 0..n {
                                gx[at(a)] = gx[at(a)] + y[at(a)] * (g[at(a)] - s);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, probs } => {
                let n = *out.shape().last().expect("rank >= 1");
                with_grad!(*x, |gx| {
                    for ((gr, dr), pr) in gx.chunks_mut(n).zip(g.chunks(n)).zip(probs.chunks(n)) {
                        let s: T = dr.iter().copied().sum();
                        for ((a, &b), &p) in gr.iter_mut().zip(dr).zip(pr) {
                            *a = *a + b - p * s;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = rstd.len().max(1);
                let d = xhat.len() / d;
                let gam = val(*gamma);
                with_grad!(*gamma, |gg| {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] = gg[j] + grow[j] * hrow[j];
                        }
                    }
                });
                with_grad!(*beta, |gb| {
                    for grow in g.chunks(d) {
                        gb.iter_mut().zip(grow).for_each(|(a, &b)| *a = *a + b);
                    }
                });
                with_grad!(*x, |gx| {
                    let dn = T::lit(d as f64);
                    for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dh = grow[j] * gam[j];
                            m1 = m1 + dh;
                            m2 = m2 + dh * hrow[j];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for j in 0..d {
                            let dh = grow[j] * gam[j];
                            gx[r * d + j] = gx[r * d + j] + rstd[r] * (dh - m1 - hrow[j] * m2);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                with_grad!(*x, |gx| { gx.iter_mut().for_each(|a| *a = *a + g[0]) });
            }
            Op::Mean(x) => {
                with_grad!(*x, |gx| {
                    let s = g[0] / T::lit(gx.len() as f64);
                    gx.iter_mut().for_each(|a| *a = *a + s);
                });
            }
            Op::SumAxis { x, axis } => {
                let (outer, n, inner) = axis_split(nodes[x.0].value.shape(), *axis);
                with_grad!(*x, |gx| {
                    for o in 0..outer {
                        for a in 0..n {
                            for ii in 0..inner {
                                let idx = (o * n + a) * inner + ii;
                                gx[idx] = gx[idx] + g[o * inner + ii];
                            }
                        }
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let n = nodes[v.0].value.shape()[*axis];
                    with_grad!(v, |gv| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * n * inner;
                            for t in 0..n * inner {
                                gv[dst + t] = gv[dst + t] + g[src + t];
                            }
                        }
                    });
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = axis_split(nodes[x.0].value.shape(), *axis);
                let len = out.shape()[*axis];
                with_grad!(*x, |gx| {
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        let src = o * len * inner;
                        for t in 0..len * inner {
                            gx[dst + t] = gx[dst + t] + g[src + t];
                        }
                    }
                });
            }
            Op::Gather { x, indices } => {
                let inner: usize = nodes[x.0].value.shape()[1..].iter().product();
                with_grad!(*x, |gx| {
                    for (r, &src) in indices.iter().enumerate() {
                        for t in 0..inner {
                            gx[src * inner + t] = gx[src * inner + t] + g[r * inner + t];
                        }
                    }
                });
            }
            Op::Attention { qkv, batch, heads, probs } => {
                let (batch, heads) = (*batch, *heads);
                let shape = nodes[qkv.0].value.shape();
                let t = shape[0] / batch;
                let d = shape[1] / 3;
                let dh = d / heads;
                let scale = T::lit(1.0 / (dh as f64).sqrt());
                let src = val(*qkv);
                let (rs, rsi) = (3 * d as isize, 3 * d);
                let (ti, di) = (t as isize, d as isize);
                with_grad!(*qkv, |gq| {
                    let mut ds = vec![T::zero(); t * t];
                    for b in 0..batch {
                        for h in 0..heads {
                            let base = b * t * rsi + h * dh;
                            let p = &probs[(b * heads + h) * t * t..][..t * t];
                            let go = &g[b * t * d + h * dh..];
                            // dP = dO Vᵀ
                            T::gemm(t, dh, t, go, di, 1, &src[base + 2 * d..], 1, rs, T::zero(), &mut ds, ti, 1);
                            // dS = scale * P ⊙ (dP - rowsum(dP ⊙ P))
                            for (dr, pr) in ds.chunks_mut(t).zip(p.chunks(t)) {
                                let s: T = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                                for (a, &b) in dr.iter_mut().zip(pr) {
                                    *a = scale * b * (*a - s);
                                }
                            }
                            // dQ += dS K, dK += dSᵀ Q, dV += Pᵀ dO
                            T::gemm(t, t, dh, &ds, ti, 1, &src[base + d..], rs, 1, T::one(), &mut gq[base..], rs, 1);
                            T::gemm(t, t, dh, &ds, 1, ti, &src[base..], rs, 1, T::one(), &mut gq[base + d..], rs, 1);
                            T::gemm(t, t, dh, p, 1, ti, go, di, 1, T::one(), &mut gq[base + 2 * d..], rs, 1);
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let b = labels.len();
                let k = probs.len() / b;
                let s = g[0] / T::lit(b as f64);
                with_grad!(*logits, |gl| {
                    for (r, &y) in labels.iter().enumerate() {
                        for c in 0..k {
                            let onehot = if c == y { T::one() } else { T::zero() };
                            gl[r * k + c] = gl[r * k + c] + s * (probs[r * k + c] - onehot);
                        }
                    }
                });
            }
            Op::Cosine { a, b } => {
                let d = *nodes[a.0].value.shape().last().unwrap();
                let eps = T::lit(NORM_EPS);
                let (va, vb) = (val(*a), val(*b));
                let cos = out.data();
                // Per-row coefficients: d cos / d a = b·ca - a·cb_a, and symmetrically.
                let coef: Vec<(T, T, T)> = va
                    .chunks(d)
                    .zip(vb.chunks(d))
                    .zip(cos)
                    .map(|((ra, rb), &c)| {
                        let na2: T = ra.iter().map(|&x| x * x).sum();
                        let nb2: T = rb.iter().map(|&x| x * x).sum();
                        let denom = (na2 * nb2).sqrt();
                        if denom > eps {
                            (T::one() / denom, c / na2, c / nb2)
                        } else {
                            (T::one() / eps, T::zero(), T::zero())
                        }
                    })
                    .collect();
                with_grad!(*a, |ga| {
                    for (r, &(inv, ka, _)) in coef.iter().enumerate() {
                        for j in 0..d {
                            let t = r * d + j;
                            ga[t] = ga[t] + g[r] * (vb[t] * inv - va[t] * ka);
                        }
                    }
                });
                with_grad!(*b, |gb| {
                    for (r, &(inv, _, kb)) in coef.iter().enumerate() {
                        for j in 0..d {
                            let t = r * d + j;
                            gb[t] = gb[t] + g[r] * (va[t] * inv - vb[t] * kb);
                        }
                    }
                });
            }
            Op::L2Normalize { x } => {
                let d = *out.shape().last().unwrap();
                let eps = T::lit(NORM_EPS);
                let xv = val(*x);
                let y = out.data();
                with_grad!(*x, |gx| {
                    for (r, (xrow, yrow)) in xv.chunks(d).zip(y.chunks(d)).enumerate() {
                        let n = xrow.iter().map(|&v| v * v).sum::<T>().sqrt();
                        let grow = &g[r * d..(r + 1) * d];
                        if n > eps {
                            let dot: T = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                            for j in 0..d {
                                gx[r * d + j] = gx[r * d + j] + (grow[j] - yrow[j] * dot) / n;
                            }
                        } else {
                            for j in 0..d {
                                gx[r * d + j] = gx[r * d + j] + grow[j] / eps;
                            }
                        }
                    }
                });
            }
        }
    }
}
