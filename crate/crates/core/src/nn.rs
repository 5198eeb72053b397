//! Parameter storage and the small set of layers the models are built from.

use std::ops::Index;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;
use crate::tensor::{Graph, Result, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn same_structure(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Places every parameter on the graph, as gradient-receiving inputs or
    /// as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.input(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Gradients of a bound set after backward (zeros where none reached).
    pub fn grads(&self, g: &Graph<T>, bound: &Bound) -> Vec<Tensor<T>> {
        bound.vars.iter().map(|&v| g.grad_or_zeros(v)).collect()
    }

    /// CRC32 over names, shapes and raw values.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        let mut buf = Vec::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            h.update(n.as_bytes());
            for &d in t.shape() {
                h.update(&(d as u64).to_le_bytes());
            }
            buf.clear();
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        h.finalize()
    }
}

/// Graph handles of a bound [`ParamSet`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps handles created elsewhere, in [`ParamSet`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Weight initializers.
pub struct Init<'a, R: Rng> {
    pub rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    /// Normal(0, std) truncated to ±2·std by rejection.
    pub fn trunc_normal<T: Scalar>(&mut self, shape: Vec<usize>, std: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0, std).expect("valid std");
        let data = (0..n)
            .map(|_| loop {
                let v: f64 = normal.sample(self.rng);
                if v.abs() <= 2.0 * std {
                    break T::lit(v);
                }
            })
            .collect();
        Tensor::new(shape, data).expect("init shape")
    }
}

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        ps: &mut ParamSet<T>,
        init: &mut Init<R>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        zero: bool,
    ) -> Self {
        let w = if zero {
            Tensor::zeros(vec![fan_in, fan_out])
        } else {
            init.trunc_normal(vec![fan_in, fan_out], INIT_STD)
        };
        let w = ps.add(format!("{name}.weight"), w);
        let b = ps.add(format!("{name}.bias"), Tensor::zeros(vec![fan_out]));
        Linear {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.w])?;
        g.add(y, p[self.b])
    }

    pub fn num_params(fan_in: usize, fan_out: usize) -> usize {
        fan_in * fan_out + fan_out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, dim: usize) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), Tensor::full(vec![dim], T::one()));
        let beta = ps.add(format!("{name}.beta"), Tensor::zeros(vec![dim]));
        LayerNorm { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.layernorm(x, Some(p[self.gamma]), Some(p[self.beta]), T::lit(LN_EPS))
    }
}

/// Two-layer GELU MLP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    /// `zero_out` zero-initializes the second layer so the MLP outputs 0.
    pub fn new<T: Scalar, R: Rng>(
        ps: &mut ParamSet<T>,
        init: &mut Init<R>,
        name: &str,
        dims: (usize, usize, usize),
        zero_out: bool,
    ) -> Self {
        let (i, h, o) = dims;
        Mlp {
            fc1: Linear::new(ps, init, &format!("{name}.fc1"), i, h, false),
            fc2: Linear::new(ps, init, &format!("{name}.fc2"), h, o, zero_out),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, p, h)
    }
}

/// Scaled dot-product attention of `q [P×h·dh]` over `k, v [K×h·dh]` split
/// into `heads`; `key_weights [K]` gates each key (see
/// [`Graph::weighted_softmax`]).
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    key_weights: Var,
    scaled: bool,
) -> Result<Var> {
    let dim = g.shape(q)[1];
    let dh = dim / heads;
    let scale = if scaled {
        T::one() / T::from_usize(dh).unwrap().sqrt()
    } else {
        T::one()
    };
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, (h + 1) * dh)?,
                g.slice_cols(k, h * dh, (h + 1) * dh)?,
                g.slice_cols(v, h * dh, (h + 1) * dh)?,
            )
        };
        let kt = g.transpose(kh)?;
        let logits = g.matmul(qh, kt)?;
        let logits = if scaled { g.scale(logits, scale) } else { logits };
        let a = g.weighted_softmax(logits, key_weights)?;
        outs.push(g.matmul(a, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        g.concat_cols(&outs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl SelfAttention {
    pub fn new<T: Scalar, R: Rng>(ps: &mut ParamSet<T>, init: &mut Init<R>, name: &str, dim: usize, heads: usize) -> Self {
        SelfAttention {
            qkv: Linear::new(ps, init, &format!("{name}.qkv"), dim, 3 * dim, false),
            proj: Linear::new(ps, init, &format!("{name}.proj"), dim, dim, false),
            heads,
            dim,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, key_weights: Var) -> Result<Var> {
        let qkv = self.qkv.forward(g, p, x)?;
        let d = self.dim;
        let q = g.slice_cols(qkv, 0, d)?;
        let k = g.slice_cols(qkv, d, 2 * d)?;
        let v = g.slice_cols(qkv, 2 * d, 3 * d)?;
        let o = multi_head_attention(g, q, k, v, self.heads, key_weights, true)?;
        self.proj.forward(g, p, o)
    }
}

/// Scale/shift pairs applied after the two LayerNorms of a block:
/// `LN(x)·(1+scale) + shift`.
#[derive(Debug, Clone, Copy)]
pub struct Modulation {
    pub scale1: Var,
    pub shift1: Var,
    pub scale2: Var,
    pub shift2: Var,
}

/// `ln_out·(1+scale) + shift` with `scale, shift` broadcast over rows.
pub fn modulate<T: Scalar>(g: &mut Graph<T>, ln_out: Var, scale: Var, shift: Var) -> Result<Var> {
    let one_plus = g.scale_shift(scale, T::one(), T::one());
    let y = g.mul(ln_out, one_plus)?;
    g.add(y, shift)
}

/// Pre-norm transformer block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<T: Scalar, R: Rng>(
        ps: &mut ParamSet<T>,
        init: &mut Init<R>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Self {
        Block {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim),
            attn: SelfAttention::new(ps, init, &format!("{name}.attn"), dim, heads),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(ps, init, &format!("{name}.mlp"), (dim, dim * mlp_ratio, dim), false),
        }
    }

    pub fn num_params(dim: usize, mlp_ratio: usize) -> usize {
        let h = dim * mlp_ratio;
        4 * dim + Linear::num_params(dim, 3 * dim) + Linear::num_params(dim, dim) + Linear::num_params(dim, h) + Linear::num_params(h, dim)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        key_weights: Var,
        modulation: Option<&Modulation>,
    ) -> Result<Var> {
        let mut h = self.ln1.forward(g, p, x)?;
        if let Some(m) = modulation {
            h = modulate(g, h, m.scale1, m.shift1)?;
        }
        let a = self.attn.forward(g, p, h, key_weights)?;
        let x = g.add(x, a)?;
        let mut h = self.ln2.forward(g, p, x)?;
        if let Some(m) = modulation {
            h = modulate(g, h, m.scale2, m.shift2)?;
        }
        let f = self.mlp.forward(g, p, h)?;
        g.add(x, f)
    }
}

/// `[n]` vector of ones, the key weights of unmasked attention.
pub fn ones_weights<T: Scalar>(g: &mut Graph<T>, n: usize) -> Var {
    g.constant(Tensor::full(vec![n], T::one()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trunc_normal_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init { rng: &mut rng };
        let t: Tensor<f64> = init.trunc_normal(vec![1000], INIT_STD);
        assert!(t.data().iter().all(|v| v.abs() <= 2.0 * INIT_STD));
        let mean: f64 = t.data().iter().sum::<f64>() / 1000.0;
        assert!(mean.abs() < 0.005);
    }

    #[test]
    fn block_param_count_matches_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init { rng: &mut rng };
        let mut ps = ParamSet::<f32>::new();
        Block::new(&mut ps, &mut init, "b", 16, 4, 4);
        assert_eq!(ps.numel(), Block::num_params(16, 4));
    }

    #[test]
    fn zero_modulation_is_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut init = Init { rng: &mut rng };
        let mut g = Graph::<f32>::new();
        let x = g.constant(init.trunc_normal(vec![3, 8], 1.0));
        let ln = g.layernorm(x, None, None, 1e-6).unwrap();
        let z = g.constant(Tensor::zeros(vec![8]));
        let m = modulate(&mut g, ln, z, z).unwrap();
        assert_eq!(g.value(m), g.value(ln));

        // shift-only adds a constant per channel
        let shift = g.constant(Tensor::from_f64(vec![8], &[0.5; 8]).unwrap());
        let m = modulate(&mut g, ln, z, shift).unwrap();
        for (a, b) in g.value(m).data().iter().zip(g.value(ln).data()) {
            assert_eq!(*a, *b + 0.5);
        }
    }

    #[test]
    fn block_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut init = Init { rng: &mut rng };
        let mut ps = ParamSet::<f64>::new();
        let blk = Block::new(&mut ps, &mut init, "b", 4, 2, 2);
        // larger weights so the check is not dominated by the residual path
        for t in ps.tensors_mut() {
            let r = init.trunc_normal::<f64>(t.shape().to_vec(), 0.5);
            *t = r;
        }
        let x: Tensor<f64> = init.trunc_normal(vec![3, 4], 1.0);
        let mut inputs = vec![x];
        inputs.extend(ps.tensors().iter().cloned());
        let r = grad_check(
            "block",
            |g, v| {
                let bound = Bound::from_vars(v[1..].to_vec());
                let w = ones_weights(g, 3);
                let y = blk.forward(g, &bound, v[0], w, None)?;
                let sq = g.mul(y, y)?;
                g.sum_all(sq)
            },
            &inputs,
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(r.passed(), "{r}");
    }
}
