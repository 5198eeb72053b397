use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{multi_head_attention, Bound, Init, LayerNorm, Mlp, ParamId, ParamSet, INIT_STD};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ConditionerKind {
    None,
    #[default]
    Fine,
    Sequence,
    Holistic,
    Adaln,
    Feature,
}

impl ConditionerKind {
    pub const ALL: [ConditionerKind; 6] = [
        ConditionerKind::None,
        ConditionerKind::Fine,
        ConditionerKind::Sequence,
        ConditionerKind::Holistic,
        ConditionerKind::Adaln,
        ConditionerKind::Feature,
    ];

    pub fn needs_text(self) -> bool {
        self != ConditionerKind::None
    }

    /// Whether per-caption results are fused (sequence conditioning appends
    /// every caption at once instead).
    pub fn fuses(self) -> bool {
        !matches!(self, ConditionerKind::None | ConditionerKind::Sequence)
    }

    pub fn has_similarity(self) -> bool {
        self == ConditionerKind::Fine
    }
}

impl FromStr for ConditionerKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        ConditionerKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| format!("unknown conditioner '{s}' (expected none, fine, sequence, holistic, adaln or feature)"))
    }
}

impl fmt::Display for ConditionerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConditionerKind::None => "none",
            ConditionerKind::Fine => "fine",
            ConditionerKind::Sequence => "sequence",
            ConditionerKind::Holistic => "holistic",
            ConditionerKind::Adaln => "adaln",
            ConditionerKind::Feature => "feature",
        })
    }
}

/// Residual cross-attention from patch rows to word embeddings, followed by
/// a residual pre-LN MLP. `W_O` and the MLP output layer start at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossAttnLayer {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln: LayerNorm,
    pub mlp: Mlp,
    pub heads: usize,
}

impl CrossAttnLayer {
    pub fn new<T: Scalar, R: Rng>(
        ps: &mut ParamSet<T>,
        init: &mut Init<R>,
        name: &str,
        dim: usize,
        text_dim: usize,
        heads: usize,
    ) -> Self {
        CrossAttnLayer {
            wq: ps.add(format!("{name}.wq"), init.trunc_normal(vec![dim, dim], INIT_STD)),
            wk: ps.add(format!("{name}.wk"), init.trunc_normal(vec![text_dim, dim], INIT_STD)),
            wv: ps.add(format!("{name}.wv"), init.trunc_normal(vec![text_dim, dim], INIT_STD)),
            wo: ps.add(format!("{name}.wo"), Tensor::zeros(vec![dim, dim])),
            ln: LayerNorm::new(ps, &format!("{name}.ln"), dim),
            mlp: Mlp::new(ps, init, &format!("{name}.mlp"), (dim, 4 * dim, dim), true),
            heads,
        }
    }

    pub fn num_params(dim: usize, text_dim: usize) -> usize {
        2 * dim * dim + 2 * text_dim * dim + 2 * dim + (dim * 4 * dim + 4 * dim) + (4 * dim * dim + dim)
    }

    /// `x [P×D]` attends over `t [S×d_t]`; `pad [S]` is 1 on live tokens.
    /// Returns the updated rows and, when `similarity` is set, the rectified
    /// patch-word cosines `O [P×S]` (exactly 0 at pads).
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        t: Var,
        pad: Var,
        similarity: bool,
    ) -> Result<(Var, Option<Var>)> {
        let q = g.matmul(x, p[self.wq])?;
        let k = g.matmul(t, p[self.wk])?;
        let v = g.matmul(t, p[self.wv])?;
        let a = multi_head_attention(g, q, k, v, self.heads, pad, true)?;
        let a = g.matmul(a, p[self.wo])?;
        let x = g.add(x, a)?;
        let h = self.ln.forward(g, p, x)?;
        let h = self.mlp.forward(g, p, h)?;
        let x = g.add(x, h)?;
        let o = if similarity {
            let eps = T::lit(1e-12);
            let qn = g.normalize_rows(q, eps)?;
            let kn = g.normalize_rows(k, eps)?;
            let knt = g.transpose(kn)?;
            let cos = g.matmul(qn, knt)?;
            let r = g.relu(cos);
            Some(g.mul(r, pad)?)
        } else {
            None
        };
        Ok((x, o))
    }
}
