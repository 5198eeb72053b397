use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{domain_error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, ReduceKind, Tensor, Var};

/// How per-caption features are combined at each conditioned layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    #[default]
    Max,
    Avg,
    Attention,
}

impl FromStr for Fusion {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "max" => Ok(Fusion::Max),
            "avg" => Ok(Fusion::Avg),
            "attention" => Ok(Fusion::Attention),
            _ => Err(format!("unknown fusion '{s}' (expected max, avg or attention)")),
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Max => "max",
            Fusion::Avg => "avg",
            Fusion::Attention => "attention",
        })
    }
}

/// Fuses `parts` (N tensors of `[P×D]`).
///
/// Avg and attention pooling are written relative to the first candidate,
/// `x₁ + Σₙ aₙ(xₙ − x₁)`, which equals `Σₙ aₙxₙ` when the weights sum to one
/// but returns `x₁` bit-exactly when all candidates coincide. `query` is the
/// `[D]` pooling query, required for attention.
pub fn fuse<T: Scalar>(g: &mut Graph<T>, parts: &[Var], strategy: Fusion, query: Option<Var>) -> Result<Var> {
    let Some(&first) = parts.first() else {
        return Err(domain_error("fuse", "no candidates"));
    };
    if parts.len() == 1 {
        return Ok(first);
    }
    match strategy {
        Fusion::Max => {
            let s = g.stack(parts)?;
            Ok(g.reduce(s, ReduceKind::Max, 0)?)
        }
        Fusion::Avg => {
            let inv = T::one() / T::from_usize(parts.len()).unwrap();
            let mut acc: Option<Var> = None;
            for &p in &parts[1..] {
                let d = g.sub(p, first)?;
                acc = Some(match acc {
                    None => d,
                    Some(a) => g.add(a, d)?,
                });
            }
            let mean = g.scale(acc.unwrap(), inv);
            Ok(g.add(first, mean)?)
        }
        Fusion::Attention => {
            let Some(q) = query else {
                return Err(domain_error("fuse", "attention pooling needs a query"));
            };
            let dim = g.shape(first)[1];
            let rows = g.shape(first)[0];
            let qc = g.reshape(q, vec![dim, 1])?;
            let scale = T::one() / T::from_usize(dim).unwrap().sqrt();
            let scores: Vec<Var> = parts
                .iter()
                .map(|&p| g.matmul(p, qc))
                .collect::<std::result::Result<_, _>>()?;
            let logits = g.concat_cols(&scores)?;
            let logits = g.scale(logits, scale);
            let a = g.softmax(logits, 1)?;
            let mut out = first;
            for (n, &p) in parts.iter().enumerate().skip(1) {
                let d = g.sub(p, first)?;
                let an = g.slice_cols(a, n, n + 1)?;
                let an = g.reshape(an, vec![rows])?;
                let w = g.mul_rows(d, an)?;
                out = g.add(out, w)?;
            }
            Ok(out)
        }
    }
}

/// Value-level fusion for analysis and tests.
pub fn fuse_captions<T: Scalar>(parts: &[Tensor<T>], strategy: Fusion, query: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = parts.iter().map(|t| g.constant(t.clone())).collect();
    let q = query.map(|q| g.constant(q.clone()));
    let out = fuse(&mut g, &vars, strategy, q)?;
    Ok(g.value(out).clone())
}
