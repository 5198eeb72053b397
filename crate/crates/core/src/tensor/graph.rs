use super::kernels::{gelu, gelu_grad, mm_a_bt_acc, mm_acc, mm_at_b_acc};
use super::{domain_err, shape_err, Result, Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    /// Ties go to the lowest index, both forward and backward.
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Relu,
    Gelu,
    Abs,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    /// Output has the larger operand's shape; the other repeats with period
    /// `numel` (trailing-dimension or scalar broadcast).
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
    },
    ScaleShift {
        x: Var,
        scale: T,
    },
    Unary {
        kind: Unary,
        x: Var,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    WeightedSoftmax {
        x: Var,
        w: Var,
        /// exp(x - max) / Z per entry (not multiplied by the weight).
        unweighted: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Reduce {
        x: Var,
        kind: ReduceKind,
        outer: usize,
        len: usize,
        inner: usize,
        argmax: Vec<usize>,
    },
    RowL2 {
        a: Var,
        b: Var,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<T>,
        eps: T,
    },
    Concat {
        parts: Vec<Var>,
        /// Number of leading rows (axis 0 concat) or columns (axis 1 concat).
        sizes: Vec<usize>,
        cols: bool,
    },
    SelectRows {
        x: Var,
        indices: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Stack(Vec<Var>),
    MulRows {
        x: Var,
        w: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only op record. Node ids are issued in creation order, so every
/// input id precedes its consumer and reverse id order is a valid reverse
/// topological order.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Scalar>(op: &'static str, t: &Tensor<T>) {
    debug_assert!(t.all_finite(), "non-finite output from {op}");
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_with(value, op, requires_grad)
    }

    fn push_with(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient on backward.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push_with(value, Op::Leaf, true)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_with(value, Op::Leaf, false)
    }

    /// Copy of `x` cut from the gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.clone();
        self.constant(v)
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

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return shape_err("matmul", sa, sb),
        };
        let mut out = vec![T::zero(); m * n];
        mm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        check_finite("matmul", &t);
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        Ok(self.push(t, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (na, nb) = (self.value(a).numel(), self.value(b).numel());
        let out_shape = if sa == sb {
            sa.clone()
        } else if nb == 1 || (sb.len() <= sa.len() && sa.ends_with(&sb)) {
            sa.clone()
        } else if na == 1 || (sa.len() <= sb.len() && sb.ends_with(&sa)) {
            sb.clone()
        } else {
            return shape_err(name, &sa, &sb);
        };
        let n: usize = out_shape.iter().product();
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let out: Vec<T> = (0..n).map(|i| f(da[i % na], db[i % nb])).collect();
        let t = Tensor::new(out_shape, out)?;
        check_finite(name, &t);
        Ok(self.push(t, Op::Binary { kind, a, b }, &[a, b]))
    }

    /// Elementwise sum with trailing-dimension or scalar broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b, "mul")
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn scale_shift(&mut self, x: Var, scale: T, shift: T) -> Var {
        let t = self.value(x).map(|v| scale * v + shift);
        self.push(t, Op::ScaleShift { x, scale }, &[x])
    }

    pub fn scale(&mut self, x: Var, scale: T) -> Var {
        let t = self.value(x).map(|v| scale * v);
        self.push(t, Op::ScaleShift { x, scale }, &[x])
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let t = self.value(x).map(|v| match kind {
            Unary::Relu => {
                if v > T::zero() {
                    v
                } else {
                    T::zero()
                }
            }
            Unary::Gelu => gelu(v),
            Unary::Abs => v.abs(),
        });
        self.push(t, Op::Unary { kind, x }, &[x])
    }

    /// max(x, 0); derivative at 0 is taken as 0.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(Unary::Gelu, x)
    }

    /// |x|; subgradient at 0 is 0.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Unary::Abs, x)
    }

    fn split_axis(&self, x: Var, axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if axis >= s.len() {
            return domain_err(op, format!("axis {axis} out of range for {s:?}"));
        }
        let outer = s[..axis].iter().product();
        let inner = s[axis + 1..].iter().product();
        Ok((outer, s[axis], inner))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.split_axis(x, axis, "softmax")?;
        let src = self.value(x).data();
        if src.iter().any(|v| v.is_nan()) {
            return Err(TensorError::Numeric {
                op: "softmax",
                msg: "NaN input".into(),
            });
        }
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let mut m = src[idx(0)];
                for k in 1..len {
                    m = m.max(src[idx(k)]);
                }
                let mut z = T::zero();
                for k in 0..len {
                    let e = (src[idx(k)] - m).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[idx(k)] /= z;
                }
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            t,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            &[x],
        ))
    }

    /// Softmax over the last axis where key `k` carries a non-negative weight
    /// `w[k]`: `a_k = w_k exp(x_k) / Σ_j w_j exp(x_j)`. Zero weights remove a
    /// key exactly (padding); a row whose weights are all zero yields zeros.
    pub fn weighted_softmax(&mut self, x: Var, w: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let len = *s.last().unwrap_or(&1);
        if self.value(w).numel() != len || self.shape(w).len() != 1 {
            return shape_err("weighted_softmax", &s, self.shape(w));
        }
        let src = self.value(x).data();
        let wv = self.value(w).data();
        if src.iter().any(|v| v.is_nan()) {
            return Err(TensorError::Numeric {
                op: "weighted_softmax",
                msg: "NaN input".into(),
            });
        }
        let rows = src.len() / len;
        let mut out = vec![T::zero(); src.len()];
        let mut unweighted = vec![T::zero(); src.len()];
        for r in 0..rows {
            let xr = &src[r * len..(r + 1) * len];
            // Shift by the max over live keys only, so appending zero-weight
            // keys leaves every live output bit-identical.
            let live = xr.iter().zip(wv).filter(|(_, &w)| w > T::zero()).map(|(&v, _)| v);
            let m = live.fold(T::neg_infinity(), T::max);
            let m = if m.is_finite() { m } else { xr.iter().copied().fold(T::neg_infinity(), T::max) };
            let mut z = T::zero();
            for k in 0..len {
                let e = (xr[k] - m).exp();
                unweighted[r * len + k] = e;
                if wv[k] != T::zero() {
                    z += wv[k] * e;
                }
            }
            if z > T::zero() {
                for k in 0..len {
                    let u = unweighted[r * len + k] / z;
                    unweighted[r * len + k] = u;
                    out[r * len + k] = wv[k] * u;
                }
            } else {
                for k in 0..len {
                    unweighted[r * len + k] = T::zero();
                }
            }
        }
        let t = Tensor::new(s, out)?;
        check_finite("weighted_softmax", &t);
        Ok(self.push(t, Op::WeightedSoftmax { x, w, unweighted }, &[x, w]))
    }

    /// Normalizes over the last axis, then applies the optional affine
    /// parameters (shape `[d]`).
    pub fn layernorm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return domain_err("layernorm", "eps must be positive");
        }
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap_or(&1);
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [d] {
                return shape_err("layernorm", &s, self.shape(p));
            }
        }
        let src = self.value(x).data();
        let rows = src.len() / d;
        let dn = T::from_usize(d).unwrap();
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let xr = &src[r * d..(r + 1) * d];
            let mean = xr.iter().copied().sum::<T>() / dn;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for k in 0..d {
                xhat[r * d + k] = (xr[k] - mean) * rs;
            }
        }
        let mut out = xhat.clone();
        if let Some(gv) = gamma {
            let gd = self.value(gv).data();
            for (i, o) in out.iter_mut().enumerate() {
                *o *= gd[i % d];
            }
        }
        if let Some(bv) = beta {
            let bd = self.value(bv).data();
            for (i, o) in out.iter_mut().enumerate() {
                *o += bd[i % d];
            }
        }
        let t = Tensor::new(s, out)?;
        check_finite("layernorm", &t);
        let mut inputs = vec![x];
        inputs.extend(gamma);
        inputs.extend(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &inputs,
        ))
    }

    /// Reduces `axis` away.
    pub fn reduce(&mut self, x: Var, kind: ReduceKind, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.split_axis(x, axis, "reduce")?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = Vec::new();
        if kind == ReduceKind::Max {
            argmax = vec![0; outer * inner];
        }
        let lenf = T::from_usize(len).unwrap();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let oi = o * inner + i;
                match kind {
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let mut s = T::zero();
                        for k in 0..len {
                            s += src[idx(k)];
                        }
                        out[oi] = if kind == ReduceKind::Mean { s / lenf } else { s };
                    }
                    ReduceKind::Max => {
                        let mut best = 0;
                        for k in 1..len {
                            if src[idx(k)] > src[idx(best)] {
                                best = k;
                            }
                        }
                        argmax[oi] = best;
                        out[oi] = src[idx(best)];
                    }
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::Reduce {
                x,
                kind,
                outer,
                len,
                inner,
                argmax,
            },
            &[x],
        ))
    }

    /// Sum of every entry, as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, vec![n])?;
        self.reduce(flat, ReduceKind::Sum, 0)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, vec![n])?;
        self.reduce(flat, ReduceKind::Mean, 0)
    }

    /// Euclidean distance between matching rows of two `[m×d]` tensors; a
    /// rank-1 pair yields a rank-0 distance. The gradient at zero distance is
    /// defined as 0.
    pub fn row_l2_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa != self.shape(b) {
            return shape_err("l2_distance", &sa, self.shape(b));
        }
        let d = *sa.last().unwrap_or(&1);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let rows = da.len() / d;
        let out: Vec<T> = (0..rows)
            .map(|r| {
                (0..d)
                    .map(|k| {
                        let diff = da[r * d + k] - db[r * d + k];
                        diff * diff
                    })
                    .sum::<T>()
                    .sqrt()
            })
            .collect();
        let shape = if sa.len() <= 1 { Vec::new() } else { sa[..sa.len() - 1].to_vec() };
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::RowL2 { a, b }, &[a, b]))
    }

    /// Alias of [`Graph::row_l2_distance`] for two vectors.
    pub fn l2_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.row_l2_distance(a, b)
    }

    /// Each row divided by `max(‖row‖₂, eps)`; a zero row stays zero.
    pub fn normalize_rows(&mut self, x: Var, eps: T) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap_or(&1);
        let src = self.value(x).data();
        let rows = src.len() / d;
        let mut norms = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let xr = &src[r * d..(r + 1) * d];
            let n = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms[r] = n;
            let den = n.max(eps);
            for k in 0..d {
                out[r * d + k] = xr[k] / den;
            }
        }
        let t = Tensor::new(s, out)?;
        Ok(self.push(t, Op::NormalizeRows { x, norms, eps }, &[x]))
    }

    fn concat(&mut self, parts: &[Var], cols: bool) -> Result<Var> {
        let name = if cols { "concat_cols" } else { "concat_rows" };
        if parts.is_empty() {
            return domain_err(name, "no inputs");
        }
        let first = self.shape(parts[0]).to_vec();
        if first.len() != 2 {
            return domain_err(name, format!("expected rank 2, got {first:?}"));
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == 2 && if cols { s[0] == first[0] } else { s[1] == first[1] };
            if !ok {
                return shape_err(name, &first, s);
            }
            sizes.push(if cols { s[1] } else { s[0] });
        }
        let total: usize = sizes.iter().sum();
        let t = if cols {
            let rows = first[0];
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (&p, &c) in parts.iter().zip(&sizes) {
                    out.extend_from_slice(&self.value(p).data()[r * c..(r + 1) * c]);
                }
            }
            Tensor::new(vec![rows, total], out)?
        } else {
            let mut out = Vec::with_capacity(total * first[1]);
            for &p in parts {
                out.extend_from_slice(self.value(p).data());
            }
            Tensor::new(vec![total, first[1]], out)?
        };
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                sizes,
                cols,
            },
            parts,
        ))
    }

    /// Stacks rank-2 tensors vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.concat(parts, false)
    }

    /// Stacks rank-2 tensors side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.concat(parts, true)
    }

    /// Gathers rows of a rank-2 tensor (indices may repeat).
    pub fn select_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x).select_rows(indices)?;
        Ok(self.push(
            t,
            Op::SelectRows {
                x,
                indices: indices.to_vec(),
            },
            &[x],
        ))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if start >= end || end > c {
            return domain_err("slice_cols", format!("bad range {start}..{end} for {c} columns"));
        }
        let src = self.value(x).data();
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let t = Tensor::new(vec![r, w], out)?;
        Ok(self.push(t, Op::SliceCols { x, start }, &[x]))
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return domain_err("stack", "no inputs");
        }
        let s = self.shape(parts[0]).to_vec();
        let mut out = Vec::with_capacity(parts.len() * self.value(parts[0]).numel());
        for &p in parts {
            if self.shape(p) != s.as_slice() {
                return shape_err("stack", &s, self.shape(p));
            }
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&s);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Stack(parts.to_vec()), parts))
    }

    /// Row `r` of `x [P×D]` multiplied by `w[r]`.
    pub fn mul_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (p, d) = self.value(x).dims2()?;
        if self.shape(w) != [p] {
            return shape_err("mul_rows", self.shape(x), self.shape(w));
        }
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let out: Vec<T> = (0..p * d).map(|i| xd[i] * wd[i / d]).collect();
        let t = Tensor::new(vec![p, d], out)?;
        Ok(self.push(t, Op::MulRows { x, w }, &[x, w]))
    }

    /// Mean softmax cross-entropy of `logits [B×C]` against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.value(logits).dims2()?;
        if labels.len() != b {
            return shape_err("cross_entropy", &[b, c], &[labels.len()]);
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return domain_err("cross_entropy", format!("label {bad} >= {c} classes"));
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); b * c];
        let mut loss = T::zero();
        for r in 0..b {
            let xr = &src[r * c..(r + 1) * c];
            let m = xr.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = xr.iter().map(|&v| (v - m).exp()).sum();
            for k in 0..c {
                probs[r * c + k] = (xr[k] - m).exp() / z;
            }
            loss += z.ln() + m - xr[labels[r]];
        }
        loss /= T::from_usize(b).unwrap();
        let t = Tensor::scalar(loss);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a one-element `root`, seeding its gradient with 1.
    /// Gradients of earlier backward calls are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.backward_with_seed(root, T::one())
    }

    pub fn backward_with_seed(&mut self, root: Var, seed: T) -> Result<()> {
        if self.value(root).numel() != 1 {
            return domain_err("backward", format!("root must hold one value, got {:?}", self.shape(root)));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(vec![seed]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    /// Gradient of a leaf, or zeros when no gradient reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(self.shape(v).to_vec()))
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[i].value.data();
        fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs(*a) {
                    let ga = acc(grads, *a, m * k);
                    mm_a_bt_acc(g, val(*b), ga, m, k, n);
                }
                if needs(*b) {
                    let gb = acc(grads, *b, k * n);
                    mm_at_b_acc(val(*a), g, gb, m, k, n);
                }
            }
            Op::Transpose(x) => {
                let s = nodes[x.0].value.shape();
                let (r, c) = (s[0], s[1]);
                let gx = acc(grads, *x, r * c);
                for a in 0..r {
                    for b in 0..c {
                        gx[a * c + b] += g[b * r + a];
                    }
                }
            }
            Op::Reshape(x) => {
                let gx = acc(grads, *x, g.len());
                for (o, &v) in gx.iter_mut().zip(g) {
                    *o += v;
                }
            }
            Op::Binary { kind, a, b } => {
                let (da, db) = (val(*a), val(*b));
                let (na, nb) = (da.len(), db.len());
                if needs(*a) {
                    let ga = acc(grads, *a, na);
                    for (idx, &gv) in g.iter().enumerate() {
                        ga[idx % na] += match kind {
                            Binary::Add | Binary::Sub => gv,
                            Binary::Mul => gv * db[idx % nb],
                        };
                    }
                }
                if needs(*b) {
                    let gb = acc(grads, *b, nb);
                    for (idx, &gv) in g.iter().enumerate() {
                        gb[idx % nb] += match kind {
                            Binary::Add => gv,
                            Binary::Sub => -gv,
                            Binary::Mul => gv * da[idx % na],
                        };
                    }
                }
            }
            Op::ScaleShift { x, scale } => {
                let gx = acc(grads, *x, g.len());
                for (o, &v) in gx.iter_mut().zip(g) {
                    *o += *scale * v;
                }
            }
            Op::Unary { kind, x } => {
                let dx = val(*x);
                let gx = acc(grads, *x, g.len());
                for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(dx) {
                    *o += gv
                        * match kind {
                            Unary::Relu => {
                                if xv > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Gelu => gelu_grad(xv),
                            Unary::Abs => {
                                if xv > T::zero() {
                                    T::one()
                                } else if xv < T::zero() {
                                    -T::one()
                                } else {
                                    T::zero()
                                }
                            }
                        };
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let gx = acc(grads, *x, g.len());
                for o in 0..*outer {
                    for i2 in 0..*inner {
                        let idx = |k: usize| (o * len + k) * inner + i2;
                        let mut dot = T::zero();
                        for k in 0..*len {
                            dot += g[idx(k)] * out[idx(k)];
                        }
                        for k in 0..*len {
                            gx[idx(k)] += out[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
            }
            Op::WeightedSoftmax { x, w, unweighted } => {
                let len = nodes[w.0].value.numel();
                let rows = g.len() / len;
                let mut dots = vec![T::zero(); rows];
                for r in 0..rows {
                    let mut dot = T::zero();
                    for k in 0..len {
                        dot += g[r * len + k] * out[r * len + k];
                    }
                    dots[r] = dot;
                }
                if needs(*x) {
                    let gx = acc(grads, *x, g.len());
                    for r in 0..rows {
                        for k in 0..len {
                            let j = r * len + k;
                            gx[j] += out[j] * (g[j] - dots[r]);
                        }
                    }
                }
                if needs(*w) {
                    let gw = acc(grads, *w, len);
                    for r in 0..rows {
                        for k in 0..len {
                            let j = r * len + k;
                            gw[k] += unweighted[j] * (g[j] - dots[r]);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *nodes[x.0].value.shape().last().unwrap_or(&1);
                let rows = g.len() / d;
                let gam = gamma.map(|v| val(v).to_vec());
                if let Some(gv) = gamma.filter(|v| needs(*v)) {
                    let gg = acc(grads, gv, d);
                    for (j, &gval) in g.iter().enumerate() {
                        gg[j % d] += gval * xhat[j];
                    }
                }
                if let Some(bv) = beta.filter(|v| needs(*v)) {
                    let gb = acc(grads, bv, d);
                    for (j, &gval) in g.iter().enumerate() {
                        gb[j % d] += gval;
                    }
                }
                if needs(*x) {
                    let dn = T::from_usize(d).unwrap();
                    let gx = acc(grads, *x, g.len());
                    let mut gh = vec![T::zero(); d];
                    for r in 0..rows {
                        for k in 0..d {
                            let j = r * d + k;
                            gh[k] = match &gam {
                                Some(gm) => g[j] * gm[k],
                                None => g[j],
                            };
                        }
                        let mean_gh = gh.iter().copied().sum::<T>() / dn;
                        let mean_ghx = (0..d).map(|k| gh[k] * xhat[r * d + k]).sum::<T>() / dn;
                        for k in 0..d {
                            let j = r * d + k;
                            gx[j] += rstd[r] * (gh[k] - mean_gh - xhat[j] * mean_ghx);
                        }
                    }
                }
            }
            Op::Reduce {
                x,
                kind,
                outer,
                len,
                inner,
                argmax,
            } => {
                let n = nodes[x.0].value.numel();
                let gx = acc(grads, *x, n);
                let lenf = T::from_usize(*len).unwrap();
                for o in 0..*outer {
                    for i2 in 0..*inner {
                        let oi = o * inner + i2;
                        let idx = |k: usize| (o * len + k) * inner + i2;
                        match kind {
                            ReduceKind::Sum => {
                                for k in 0..*len {
                                    gx[idx(k)] += g[oi];
                                }
                            }
                            ReduceKind::Mean => {
                                for k in 0..*len {
                                    gx[idx(k)] += g[oi] / lenf;
                                }
                            }
                            ReduceKind::Max => gx[idx(argmax[oi])] += g[oi],
                        }
                    }
                }
            }
            Op::RowL2 { a, b } => {
                let (da, db) = (val(*a), val(*b));
                let d = *nodes[a.0].value.shape().last().unwrap_or(&1);
                let mut coef = vec![T::zero(); da.len()];
                for (r, &dist) in out.iter().enumerate() {
                    if dist > T::zero() {
                        for k in 0..d {
                            let j = r * d + k;
                            coef[j] = g[r] * (da[j] - db[j]) / dist;
                        }
                    }
                }
                if needs(*a) {
                    let ga = acc(grads, *a, da.len());
                    for (o, &c) in ga.iter_mut().zip(&coef) {
                        *o += c;
                    }
                }
                if needs(*b) {
                    let gb = acc(grads, *b, db.len());
                    for (o, &c) in gb.iter_mut().zip(&coef) {
                        *o -= c;
                    }
                }
            }
            Op::NormalizeRows { x, norms, eps } => {
                let d = *nodes[x.0].value.shape().last().unwrap_or(&1);
                let gx = acc(grads, *x, g.len());
                for (r, &nrm) in norms.iter().enumerate() {
                    let row = r * d..(r + 1) * d;
                    if nrm > *eps {
                        // y = x/n, dy/dx = (I - y yᵀ)/n
                        let dot: T = g[row.clone()].iter().zip(&out[row.clone()]).map(|(&a, &b)| a * b).sum();
                        for j in row {
                            gx[j] += (g[j] - out[j] * dot) / nrm;
                        }
                    } else {
                        for j in row {
                            gx[j] += g[j] / *eps;
                        }
                    }
                }
            }
            Op::Concat { parts, sizes, cols } => {
                if *cols {
                    let total: usize = sizes.iter().sum();
                    let rows = g.len() / total;
                    let mut off = 0;
                    for (&p, &c) in parts.iter().zip(sizes) {
                        if needs(p) {
                            let gp = acc(grads, p, rows * c);
                            for r in 0..rows {
                                for k in 0..c {
                                    gp[r * c + k] += g[r * total + off + k];
                                }
                            }
                        }
                        off += c;
                    }
                } else {
                    let width = g.len() / sizes.iter().sum::<usize>();
                    let mut off = 0;
                    for (&p, &r) in parts.iter().zip(sizes) {
                        let n = r * width;
                        if needs(p) {
                            let gp = acc(grads, p, n);
                            for (o, &v) in gp.iter_mut().zip(&g[off..off + n]) {
                                *o += v;
                            }
                        }
                        off += n;
                    }
                }
            }
            Op::SelectRows { x, indices } => {
                let c = *nodes[x.0].value.shape().last().unwrap_or(&1);
                let n = nodes[x.0].value.numel();
                let gx = acc(grads, *x, n);
                for (r, &src) in indices.iter().enumerate() {
                    for k in 0..c {
                        gx[src * c + k] += g[r * c + k];
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let s = nodes[x.0].value.shape();
                let (r, c) = (s[0], s[1]);
                let w = g.len() / r;
                let gx = acc(grads, *x, r * c);
                for i2 in 0..r {
                    for k in 0..w {
                        gx[i2 * c + start + k] += g[i2 * w + k];
                    }
                }
            }
            Op::Stack(parts) => {
                let n = nodes[parts[0].0].value.numel();
                for (pi, &p) in parts.iter().enumerate() {
                    if needs(p) {
                        let gp = acc(grads, p, n);
                        for (o, &v) in gp.iter_mut().zip(&g[pi * n..(pi + 1) * n]) {
                            *o += v;
                        }
                    }
                }
            }
            Op::MulRows { x, w } => {
                let (xd, wd) = (val(*x), val(*w));
                let p = wd.len();
                let d = xd.len() / p;
                if needs(*x) {
                    let gx = acc(grads, *x, xd.len());
                    for j in 0..xd.len() {
                        gx[j] += g[j] * wd[j / d];
                    }
                }
                if needs(*w) {
                    let gw = acc(grads, *w, p);
                    for j in 0..xd.len() {
                        gw[j / d] += g[j] * xd[j];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let c = probs.len() / b;
                let scale = g[0] / T::from_usize(b).unwrap();
                let gl = acc(grads, *logits, b * c);
                for r in 0..b {
                    for k in 0..c {
                        let onehot = if labels[r] == k { T::one() } else { T::zero() };
                        gl[r * c + k] += scale * (probs[r * c + k] - onehot);
                    }
                }
            }
        }
    }
}
