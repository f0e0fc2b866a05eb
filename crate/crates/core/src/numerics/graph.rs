//! Reverse-mode tape over [`Tensor`] values.
//!
//! Every primitive evaluates eagerly, appends a node, and keeps whatever it
//! needs for its vector-Jacobian product. Nodes are stored in execution
//! order, so a reverse sweep over the node list is a valid topological
//! replay.

use super::tensor::{dims2, gemm, split_axis, Element, Tensor, View};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Scale { a: Var, factor: T },
    AddScalar { a: Var },
    Transpose { a: Var },
    Reshape { a: Var },
    Concat { parts: Vec<Var> },
    SliceRows { a: Var, start: usize },
    GatherRows { a: Var, index: Vec<usize> },
    Softmax { a: Var, axis: usize },
    LogSoftmax { a: Var, axis: usize },
    LayerNorm { a: Var, inv_std: Vec<T> },
    Gelu { a: Var },
    Relu { a: Var },
    Sigmoid { a: Var },
    Log { a: Var },
    Exp { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    SumAxis { a: Var, axis: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, blocks: usize, probs: Vec<T> },
    Upsample2x { a: Var },
    PatchUnfold { a: Var, patch: usize },
    MapCustom { a: Var, derivative: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Saved softmax weights of an attention node, laid out as
/// `[blocks][heads][queries_per_block][keys_per_block]`.
pub struct AttentionProbs<'a, T> {
    pub probs: &'a [T],
    pub heads: usize,
    pub blocks: usize,
    pub queries_per_block: usize,
    pub keys_per_block: usize,
}

impl<T: Element> AttentionProbs<'_, T> {
    pub fn get(&self, block: usize, head: usize, query: usize, key: usize) -> T {
        let (qb, kb) = (self.queries_per_block, self.keys_per_block);
        self.probs[((block * self.heads + head) * qb + query) * kb + key]
    }
}

/// The tape. Confined to one thread of execution.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn c<T: Element>(v: f64) -> T {
    T::from_f64(v)
}

/// True when `b` is a trailing sub-shape of `a`.
fn is_suffix(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn attention_probs(&self, v: Var) -> Option<AttentionProbs<'_, T>> {
        let node = &self.nodes[v.0];
        match &node.op {
            Op::Attention { q, k, heads, blocks, probs, .. } => Some(AttentionProbs {
                probs,
                heads: *heads,
                blocks: *blocks,
                queries_per_block: self.shape(*q)[0] / blocks,
                keys_per_block: self.shape(*k)[0] / blocks,
            }),
            _ => None,
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ---- linear algebra -------------------------------------------------

    /// `a (m x k) @ b (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a (m x k) @ b^T` where `b` is stored `(n x k)`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = dims2("matmul", self.shape(a))?;
        let (b0, b1) = dims2("matmul", self.shape(b))?;
        let (kb, n) = if trans_b { (b1, b0) } else { (b0, b1) };
        if k != kb {
            return Err(Error::shape(
                "matmul",
                format!(
                    "{:?} x {:?}{}",
                    self.shape(a),
                    self.shape(b),
                    if trans_b { "^T" } else { "" }
                ),
            ));
        }
        let bv = if trans_b { View::transposed(0, k) } else { View::row_major(0, n) };
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, T::one(), self.data(a), View::row_major(0, k), self.data(b), bv, T::zero(), &mut out, View::row_major(0, n));
        let rg = self.rg(&[a, b]);
        self.push("matmul", Tensor::new([m, n], out)?, Op::MatMul { a, b, trans_b }, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        self.push("transpose", out, Op::Transpose { a }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self
            .value(a)
            .reshape(shape.to_vec())
            .map_err(|_| Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(a))))?;
        let rg = self.rg(&[a]);
        self.push("reshape", out, Op::Reshape { a }, rg)
    }

    // ---- elementwise ----------------------------------------------------

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if !is_suffix(self.shape(a), self.shape(b)) {
            return Err(Error::shape(
                op,
                format!("{:?} and {:?} (rhs must match trailing dims)", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.broadcast_check(name, a, b)?;
        let bd = self.data(b);
        let bn = bd.len();
        let out: Vec<T> = self.data(a).iter().enumerate().map(|(i, &x)| f(x, bd[i % bn])).collect();
        Tensor::new(self.shape(a).to_vec(), out)
    }

    /// `a + b`, with `b` broadcast over the leading dims of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push("add", out, Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push("sub", out, Op::Sub { a, b }, rg)
    }

    /// Elementwise product, with `b` broadcast over the leading dims of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push("mul", out, Op::Mul { a, b }, rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("div", format!("{:?} / {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.binary("div", a, b, |x, y| x / y)?;
        let rg = self.rg(&[a, b]);
        self.push("div", out, Op::Div { a, b }, rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let f = c::<T>(factor);
        let out = self.unary_map(a, |x| x * f)?;
        let rg = self.rg(&[a]);
        self.push("scale", out, Op::Scale { a, factor: f }, rg)
    }

    pub fn add_scalar(&mut self, a: Var, value: f64) -> Result<Var> {
        let v = c::<T>(value);
        let out = self.unary_map(a, |x| x + v)?;
        let rg = self.rg(&[a]);
        self.push("add_scalar", out, Op::AddScalar { a }, rg)
    }

    fn unary_map(&self, a: Var, f: impl Fn(T) -> T) -> Result<Tensor<T>> {
        Tensor::new(self.shape(a).to_vec(), self.data(a).iter().map(|&x| f(x)).collect())
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.unary_map(a, gelu_fwd)?;
        let rg = self.rg(&[a]);
        self.push("gelu", out, Op::Gelu { a }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.unary_map(a, |x| x.max(T::zero()))?;
        let rg = self.rg(&[a]);
        self.push("relu", out, Op::Relu { a }, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.unary_map(a, |x| T::one() / (T::one() + (-x).exp()))?;
        let rg = self.rg(&[a]);
        self.push("sigmoid", out, Op::Sigmoid { a }, rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.unary_map(a, |x| x.ln())?;
        let rg = self.rg(&[a]);
        self.push("log", out, Op::Log { a }, rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.unary_map(a, |x| x.exp())?;
        let rg = self.rg(&[a]);
        self.push("exp", out, Op::Exp { a }, rg)
    }

    /// Elementwise map with a caller-supplied derivative.
    ///
    /// The tape trusts `derivative`; [`super::grad_check`] is how to find out
    /// whether it should.
    pub fn map_custom(&mut self, a: Var, f: impl Fn(T) -> T, derivative: impl Fn(T) -> T) -> Result<Var> {
        let out = self.unary_map(a, f)?;
        let d: Vec<T> = self.data(a).iter().map(|&x| derivative(x)).collect();
        let rg = self.rg(&[a]);
        self.push("map_custom", out, Op::MapCustom { a, derivative: d }, rg)
    }

    // ---- structural -----------------------------------------------------

    /// Concatenation along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape("concat", format!("{:?} vs trailing {tail:?}", s)));
            }
            rows += s[0];
            out.extend_from_slice(self.data(p));
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let rg = self.rg(parts);
        self.push("concat", Tensor::new(shape, out)?, Op::Concat { parts: parts.to_vec() }, rg)
    }

    /// Rows `start..start + len` along axis 0.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.is_empty() || len == 0 || start + len > s[0] {
            return Err(Error::shape("slice", format!("rows {start}..{} of {s:?}", start + len)));
        }
        let row: usize = s[1..].iter().product();
        let out = self.data(a)[start * row..(start + len) * row].to_vec();
        let mut shape = s.clone();
        shape[0] = len;
        let rg = self.rg(&[a]);
        self.push("slice", Tensor::new(shape, out)?, Op::SliceRows { a, start }, rg)
    }

    /// Selects rows along axis 0 by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.is_empty() || index.is_empty() || index.iter().any(|&i| i >= s[0]) {
            return Err(Error::shape("gather_rows", format!("index out of range for {s:?}")));
        }
        let row: usize = s[1..].iter().product();
        let src = self.data(a);
        let mut out = Vec::with_capacity(index.len() * row);
        for &i in index {
            out.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut shape = s.clone();
        shape[0] = index.len();
        let rg = self.rg(&[a]);
        self.push("gather_rows", Tensor::new(shape, out)?, Op::GatherRows { a, index: index.to_vec() }, rg)
    }

    // ---- normalization --------------------------------------------------

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = split_axis("softmax", self.shape(a), axis)?;
        let mut out = self.data(a).to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for l in 0..len {
                    mx = mx.max(out[base + l * inner]);
                }
                let mut sum = T::zero();
                for l in 0..len {
                    let e = (out[base + l * inner] - mx).exp();
                    out[base + l * inner] = e;
                    sum = sum + e;
                }
                for l in 0..len {
                    out[base + l * inner] = out[base + l * inner] / sum;
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push("softmax", Tensor::new(self.shape(a).to_vec(), out)?, Op::Softmax { a, axis }, rg)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = split_axis("log_softmax", self.shape(a), axis)?;
        let mut out = self.data(a).to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for l in 0..len {
                    mx = mx.max(out[base + l * inner]);
                }
                let mut sum = T::zero();
                for l in 0..len {
                    sum = sum + (out[base + l * inner] - mx).exp();
                }
                let lse = mx + sum.ln();
                for l in 0..len {
                    out[base + l * inner] = out[base + l * inner] - lse;
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push("log_softmax", Tensor::new(self.shape(a).to_vec(), out)?, Op::LogSoftmax { a, axis }, rg)
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let d = *s.last().ok_or_else(|| Error::shape("layernorm", "rank-0 input"))?;
        let x = self.data(a);
        let rows = x.len() / d;
        let mut out = vec![T::zero(); x.len()];
        let mut inv_std = Vec::with_capacity(rows);
        let dn = c::<T>(d as f64);
        let eps = c::<T>(eps);
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |acc, &v| acc + v) / dn;
            let var = row.iter().fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / dn;
            let istd = T::one() / (var + eps).sqrt();
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * istd;
            }
            inv_std.push(istd);
        }
        let rg = self.rg(&[a]);
        self.push("layernorm", Tensor::new(s, out)?, Op::LayerNorm { a, inv_std }, rg)
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.rg(&[a]);
        self.push("sum", Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = c::<T>(self.data(a).len() as f64);
        let s = self.data(a).iter().fold(T::zero(), |acc, &v| acc + v) / n;
        let rg = self.rg(&[a]);
        self.push("mean", Tensor::scalar(s), Op::Mean { a }, rg)
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = split_axis("sum_axis", &shape, axis)?;
        let x = self.data(a);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst = *dst + v;
                }
            }
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        let rg = self.rg(&[a]);
        self.push("sum_axis", Tensor::new(new_shape, out)?, Op::SumAxis { a, axis }, rg)
    }

    // ---- composite primitives ------------------------------------------

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `(nq, d)`, `k` and `v` are `(nk, d)`. Rows are split into
    /// `blocks` contiguous groups and each query group attends only to the
    /// matching key group; `blocks = 1` is ordinary global attention.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, blocks: usize) -> Result<Var> {
        let (nq, d) = dims2("attention", self.shape(q))?;
        let (nk, dk) = dims2("attention", self.shape(k))?;
        let (nv, dv) = dims2("attention", self.shape(v))?;
        if dk != d || dv != d || nv != nk {
            return Err(Error::shape(
                "attention",
                format!("q {:?} k {:?} v {:?}", self.shape(q), self.shape(k), self.shape(v)),
            ));
        }
        if heads == 0 || d % heads != 0 || blocks == 0 || nq % blocks != 0 || nk % blocks != 0 {
            return Err(Error::shape(
                "attention",
                format!("width {d} / heads {heads}, rows {nq},{nk} / blocks {blocks}"),
            ));
        }
        let dh = d / heads;
        let (qb, kb) = (nq / blocks, nk / blocks);
        let scale = c::<T>(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); blocks * heads * qb * kb];
        let mut out = vec![T::zero(); nq * d];
        {
            let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
            for blk in 0..blocks {
                for h in 0..heads {
                    let p_off = (blk * heads + h) * qb * kb;
                    let q_off = blk * qb * d + h * dh;
                    let k_off = blk * kb * d + h * dh;
                    gemm(
                        qb,
                        dh,
                        kb,
                        scale,
                        qd,
                        View { offset: q_off, row_stride: d, col_stride: 1 },
                        kd,
                        View { offset: k_off, row_stride: 1, col_stride: d },
                        T::zero(),
                        &mut probs,
                        View::row_major(p_off, kb),
                    );
                    for row in probs[p_off..p_off + qb * kb].chunks_mut(kb) {
                        softmax_in_place(row);
                    }
                    gemm(
                        qb,
                        kb,
                        dh,
                        T::one(),
                        &probs,
                        View::row_major(p_off, kb),
                        vd,
                        View { offset: k_off, row_stride: d, col_stride: 1 },
                        T::zero(),
                        &mut out,
                        View { offset: q_off, row_stride: d, col_stride: 1 },
                    );
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        self.push("attention", Tensor::new([nq, d], out)?, Op::Attention { q, k, v, heads, blocks, probs }, rg)
    }

    /// Bilinear 2x upsampling of a `(C, H, W)` map, half-pixel centers
    /// (align-corners = false).
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let [ch, h, w] = s[..] else {
            return Err(Error::shape("upsample2x", format!("expected (C,H,W), got {s:?}")));
        };
        let wy = axis_weights(h, 2 * h);
        let wx = axis_weights(w, 2 * w);
        let x = self.data(a);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); ch * oh * ow];
        // Separable: interpolate every source row along x once, then blend rows.
        let mut rows = vec![T::zero(); h * ow];
        for cc in 0..ch {
            let src = &x[cc * h * w..(cc + 1) * h * w];
            for (y, row) in rows.chunks_exact_mut(ow).enumerate() {
                let s = &src[y * w..(y + 1) * w];
                for (r, &(x0, x1, lx)) in row.iter_mut().zip(&wx) {
                    let lx = c::<T>(lx);
                    *r = s[x0] * (T::one() - lx) + s[x1] * lx;
                }
            }
            let dst = &mut out[cc * oh * ow..(cc + 1) * oh * ow];
            for (d, &(y0, y1, ly)) in dst.chunks_exact_mut(ow).zip(&wy) {
                let ly = c::<T>(ly);
                let (top, bot) = (&rows[y0 * ow..(y0 + 1) * ow], &rows[y1 * ow..(y1 + 1) * ow]);
                for ((o, &t), &b) in d.iter_mut().zip(top).zip(bot) {
                    *o = t * (T::one() - ly) + b * ly;
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push("upsample2x", Tensor::new([ch, oh, ow], out)?, Op::Upsample2x { a }, rg)
    }

    /// Unfolds a `(C, H, W)` image into `(num_patches, C * patch * patch)`,
    /// patches in raster order, features ordered `(c, py, px)`.
    pub fn patch_unfold(&mut self, a: Var, patch: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let [ch, h, w] = s[..] else {
            return Err(Error::shape("patch_unfold", format!("expected (C,H,W), got {s:?}")));
        };
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::shape("patch_unfold", format!("{s:?} not divisible by patch {patch}")));
        }
        let index = unfold_index(ch, h, w, patch);
        let x = self.data(a);
        let out: Vec<T> = index.iter().map(|&i| x[i]).collect();
        let (gh, gw) = (h / patch, w / patch);
        let rg = self.rg(&[a]);
        self.push(
            "patch_unfold",
            Tensor::new([gh * gw, ch * patch * patch], out)?,
            Op::PatchUnfold { a, patch },
            rg,
        )
    }

    // ---- reverse sweep --------------------------------------------------

    /// Back-propagates from a scalar `loss`, replacing the `grad` of every
    /// leaf that requires one. Leaves the loss does not depend on receive
    /// zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage("backward: variable not on this tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Err(Error::Usage("backward on a value that does not require grad".into()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                leaf_grads.push((i, g));
                continue;
            }
            self.backward_node(i, &g, &mut grads)?;
        }
        for (i, g) in leaf_grads {
            let shape = self.nodes[i].value.shape().to_vec();
            self.nodes[i].grad = Some(Tensor::new(shape, g)?);
        }
        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = dims2("matmul", self.shape(*a))?;
                let n = node.value.shape()[1];
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(da) = self.slot(grads, *a) {
                    // da = g (m x n) @ b_logical^T (n x k)
                    let bv = if *trans_b { View::row_major(0, k) } else { View::transposed(0, n) };
                    gemm(m, n, k, T::one(), g, View::row_major(0, n), bd, bv, T::one(), da, View::row_major(0, k));
                }
                if let Some(db) = self.slot(grads, *b) {
                    if *trans_b {
                        // db (n x k) = g^T (n x m) @ a (m x k)
                        gemm(n, m, k, T::one(), g, View::transposed(0, n), ad, View::row_major(0, k), T::one(), db, View::row_major(0, k));
                    } else {
                        // db (k x n) = a^T (k x m) @ g (m x n)
                        gemm(k, m, n, T::one(), ad, View::transposed(0, k), g, View::row_major(0, n), T::one(), db, View::row_major(0, n));
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -T::one() } else { T::one() };
                if let Some(da) = self.slot(grads, *a) {
                    for (d, &gi) in da.iter_mut().zip(g) {
                        *d = *d + gi;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    let bn = db.len();
                    for (idx, &gi) in g.iter().enumerate() {
                        db[idx % bn] = db[idx % bn] + sign * gi;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let bn = bd.len();
                if let Some(da) = self.slot(grads, *a) {
                    for (idx, d) in da.iter_mut().enumerate() {
                        *d = *d + g[idx] * bd[idx % bn];
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for (idx, &gi) in g.iter().enumerate() {
                        db[idx % bn] = db[idx % bn] + gi * ad[idx];
                    }
                }
            }
            Op::Div { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(da) = self.slot(grads, *a) {
                    for (idx, d) in da.iter_mut().enumerate() {
                        *d = *d + g[idx] / bd[idx];
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for (idx, d) in db.iter_mut().enumerate() {
                        *d = *d - g[idx] * ad[idx] / (bd[idx] * bd[idx]);
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(da) = self.slot(grads, *a) {
                    for (d, &gi) in da.iter_mut().zip(g) {
                        *d = *d + gi * *factor;
                    }
                }
            }
            Op::AddScalar { a } | Op::Reshape { a } => {
                if let Some(da) = self.slot(grads, *a) {
                    for (d, &gi) in da.iter_mut().zip(g) {
                        *d = *d + gi;
                    }
                }
            }
            Op::Transpose { a } => {
                let (m, n) = dims2("transpose", self.shape(*a))?;
                if let Some(da) = self.slot(grads, *a) {
                    for r in 0..m {
                        for col in 0..n {
                            da[r * n + col] = da[r * n + col] + g[col * m + r];
                        }
                    }
                }
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.numel();
                    if let Some(dp) = self.slot(grads, *p) {
                        for (d, &gi) in dp.iter_mut().zip(&g[off..off + len]) {
                            *d = *d + gi;
                        }
                    }
                    off += len;
                }
            }
            Op::SliceRows { a, start } => {
                let row: usize = self.shape(*a)[1..].iter().product();
                if let Some(da) = self.slot(grads, *a) {
                    for (d, &gi) in da[start * row..].iter_mut().zip(g) {
                        *d = *d + gi;
                    }
                }
            }
            Op::GatherRows { a, index } => {
                let row: usize = self.shape(*a)[1..].iter().product();
                if let Some(da) = self.slot(grads, *a) {
                    for (o, &src) in index.iter().enumerate() {
                        for j in 0..row {
                            da[src * row + j] = da[src * row + j] + g[o * row + j];
                        }
                    }
                }
            }
            Op::Softmax { a, axis } | Op::LogSoftmax { a, axis } => {
                let log = matches!(node.op, Op::LogSoftmax { .. });
                let (outer, len, inner) = split_axis("softmax", self.shape(*a), *axis)?;
                if let Some(da) = self.slot(grads, *a) {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * len * inner + ii;
                            if log {
                                let mut gs = T::zero();
                                for l in 0..len {
                                    gs = gs + g[base + l * inner];
                                }
                                for l in 0..len {
                                    let idx = base + l * inner;
                                    da[idx] = da[idx] + g[idx] - y[idx].exp() * gs;
                                }
                            } else {
                                let mut dot = T::zero();
                                for l in 0..len {
                                    dot = dot + g[base + l * inner] * y[base + l * inner];
                                }
                                for l in 0..len {
                                    let idx = base + l * inner;
                                    da[idx] = da[idx] + y[idx] * (g[idx] - dot);
                                }
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { a, inv_std } => {
                let d = *self.shape(*a).last().expect("rank >= 1");
                let dn = c::<T>(d as f64);
                if let Some(da) = self.slot(grads, *a) {
                    for (r, &istd) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let yr = &y[r * d..(r + 1) * d];
                        let mg = gr.iter().fold(T::zero(), |s, &v| s + v) / dn;
                        let mgy = gr.iter().zip(yr).fold(T::zero(), |s, (&gv, &yv)| s + gv * yv) / dn;
                        for j in 0..d {
                            da[r * d + j] = da[r * d + j] + istd * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                let x = self.data(*a);
                if let Some(da) = self.slot(grads, *a) {
                    for (idx, d) in da.iter_mut().enumerate() {
                        *d = *d + g[idx] * gelu_grad(x[idx]);
                    }
                }
            }
            Op::Relu { a } => {
                let x = self.data(*a);
                if let Some(da) = self.slot(grads, *a) {
                    for (idx, d) in da.iter_mut().enumerate() {
                        if x[idx] > T::zero() {
                            *d = *d + g[idx];
                        }
                    }
                }
            }
            Op::Sigmoid { a } => {
                if let Some(da) = self.slot(grads, *a) {
                    for (idx, d) in da.iter_mut().enumerate() {
                        *d = *d + g[idx] * y[idx] * (T::one() - y[idx]);
                    }
                }
            }
            Op::Log { a } => {
                let x = self.data(*a);
                if let Some(da) = self.slot(grads, *a) {
                    for (idx, d) in da.iter_mut().enumerate() {
                        *d = *d + g[idx] / x[idx];
                    }
                }
            }
            Op::Exp { a } => {
                if let Some(da) = self.slot(grads, *a) {
                    for (idx, d) in da.iter_mut().enumerate() {
                        *d = *d + g[idx] * y[idx];
                    }
                }
            }
            Op::MapCustom { a, derivative } => {
                if let Some(da) = self.slot(grads, *a) {
                    for (idx, d) in da.iter_mut().enumerate() {
                        *d = *d + g[idx] * derivative[idx];
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(da) = self.slot(grads, *a) {
                    for d in da.iter_mut() {
                        *d = *d + g[0];
                    }
                }
            }
            Op::Mean { a } => {
                if let Some(da) = self.slot(grads, *a) {
                    let share = g[0] / c::<T>(da.len() as f64);
                    for d in da.iter_mut() {
                        *d = *d + share;
                    }
                }
            }
            Op::SumAxis { a, axis } => {
                let (outer, len, inner) = split_axis("sum_axis", self.shape(*a), *axis)?;
                if let Some(da) = self.slot(grads, *a) {
                    for o in 0..outer {
                        for l in 0..len {
                            for ii in 0..inner {
                                let idx = (o * len + l) * inner + ii;
                                da[idx] = da[idx] + g[o * inner + ii];
                            }
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, blocks, probs } => {
                self.attention_backward(g, *q, *k, *v, *heads, *blocks, probs, grads)?;
            }
            Op::Upsample2x { a } => {
                let s = self.shape(*a);
                let (ch, h, w) = (s[0], s[1], s[2]);
                let wy = axis_weights(h, 2 * h);
                let wx = axis_weights(w, 2 * w);
                let ow = 2 * w;
                if let Some(da) = self.slot(grads, *a) {
                    for cc in 0..ch {
                        let gsrc = &g[cc * 4 * h * w..(cc + 1) * 4 * h * w];
                        let dst = &mut da[cc * h * w..(cc + 1) * h * w];
                        for (oy, &(y0, y1, ly)) in wy.iter().enumerate() {
                            let ly = c::<T>(ly);
                            for (ox, &(x0, x1, lx)) in wx.iter().enumerate() {
                                let lx = c::<T>(lx);
                                let gv = gsrc[oy * ow + ox];
                                let gt = gv * (T::one() - ly);
                                let gb = gv * ly;
                                dst[y0 * w + x0] = dst[y0 * w + x0] + gt * (T::one() - lx);
                                dst[y0 * w + x1] = dst[y0 * w + x1] + gt * lx;
                                dst[y1 * w + x0] = dst[y1 * w + x0] + gb * (T::one() - lx);
                                dst[y1 * w + x1] = dst[y1 * w + x1] + gb * lx;
                            }
                        }
                    }
                }
            }
            Op::PatchUnfold { a, patch } => {
                let s = self.shape(*a);
                let index = unfold_index(s[0], s[1], s[2], *patch);
                if let Some(da) = self.slot(grads, *a) {
                    for (o, &src) in index.iter().enumerate() {
                        da[src] = da[src] + g[o];
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        blocks: usize,
        probs: &[T],
        grads: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        let (nq, d) = dims2("attention", self.shape(q))?;
        let nk = self.shape(k)[0];
        let dh = d / heads;
        let (qb, kb) = (nq / blocks, nk / blocks);
        let scale = c::<T>(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let need_q = self.requires_grad(q);
        let need_k = self.requires_grad(k);
        let need_v = self.requires_grad(v);
        let mut dq = need_q.then(|| vec![T::zero(); nq * d]);
        let mut dk = need_k.then(|| vec![T::zero(); nk * d]);
        let mut dv = need_v.then(|| vec![T::zero(); nk * d]);
        let mut dp = vec![T::zero(); qb * kb];
        for blk in 0..blocks {
            for h in 0..heads {
                let p_off = (blk * heads + h) * qb * kb;
                let q_view = View { offset: blk * qb * d + h * dh, row_stride: d, col_stride: 1 };
                let k_view = View { offset: blk * kb * d + h * dh, row_stride: d, col_stride: 1 };
                let p = &probs[p_off..p_off + qb * kb];
                if let Some(dv) = dv.as_mut() {
                    // dV (kb x dh) += P^T (kb x qb) @ dO (qb x dh)
                    gemm(kb, qb, dh, T::one(), p, View::transposed(0, kb), g, q_view, T::one(), dv, k_view);
                }
                if !(need_q || need_k) {
                    continue;
                }
                // dP (qb x kb) = dO (qb x dh) @ V^T (dh x kb)
                gemm(
                    qb,
                    dh,
                    kb,
                    T::one(),
                    g,
                    q_view,
                    vd,
                    View { offset: k_view.offset, row_stride: 1, col_stride: d },
                    T::zero(),
                    &mut dp,
                    View::row_major(0, kb),
                );
                for r in 0..qb {
                    let pr = &p[r * kb..(r + 1) * kb];
                    let dr = &mut dp[r * kb..(r + 1) * kb];
                    let dot = pr.iter().zip(dr.iter()).fold(T::zero(), |s, (&a, &b)| s + a * b);
                    for (dv_, &pv) in dr.iter_mut().zip(pr) {
                        *dv_ = pv * (*dv_ - dot) * scale;
                    }
                }
                if let Some(dq) = dq.as_mut() {
                    // dQ (qb x dh) += dS (qb x kb) @ K (kb x dh)
                    gemm(qb, kb, dh, T::one(), &dp, View::row_major(0, kb), kd, k_view, T::one(), dq, q_view);
                }
                if let Some(dk) = dk.as_mut() {
                    // dK (kb x dh) += dS^T (kb x qb) @ Q (qb x dh)
                    gemm(kb, qb, dh, T::one(), &dp, View::transposed(0, kb), qd, q_view, T::one(), dk, k_view);
                }
            }
        }
        for (var, part) in [(q, dq), (k, dk), (v, dv)] {
            if let (Some(part), Some(slot)) = (part, self.slot(grads, var)) {
                for (s, p) in slot.iter_mut().zip(part) {
                    *s = *s + p;
                }
            }
        }
        Ok(())
    }
}

fn softmax_in_place<T: Element>(row: &mut [T]) {
    let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

fn gelu_fwd<T: Element>(x: T) -> T {
    let u = c::<T>(GELU_K) * (x + c::<T>(GELU_C) * x * x * x);
    c::<T>(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Element>(x: T) -> T {
    let u = c::<T>(GELU_K) * (x + c::<T>(GELU_C) * x * x * x);
    let t = u.tanh();
    let du = c::<T>(GELU_K) * (T::one() + c::<T>(3.0 * GELU_C) * x * x);
    c::<T>(0.5) * (T::one() + t) + c::<T>(0.5) * x * (T::one() - t * t) * du
}

/// Source taps `(i0, i1, weight_of_i1)` for resampling an axis of `in_len`
/// samples to `out_len` samples with half-pixel centers.
pub fn axis_weights(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let l = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, l)
        })
        .collect()
}

/// Plain bilinear resize of a single-channel `h x w` grid (half-pixel centers).
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let wy = axis_weights(h, oh);
    let wx = axis_weights(w, ow);
    let mut out = Vec::with_capacity(oh * ow);
    for &(y0, y1, ly) in &wy {
        for &(x0, x1, lx) in &wx {
            let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
            let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
            out.push(top * (1.0 - ly) + bot * ly);
        }
    }
    out
}

fn unfold_index(ch: usize, h: usize, w: usize, p: usize) -> Vec<usize> {
    let (gh, gw) = (h / p, w / p);
    let mut index = Vec::with_capacity(ch * h * w);
    for gy in 0..gh {
        for gx in 0..gw {
            for cc in 0..ch {
                for py in 0..p {
                    for px in 0..p {
                        index.push(cc * h * w + (gy * p + py) * w + gx * p + px);
                    }
                }
            }
        }
    }
    index
}
