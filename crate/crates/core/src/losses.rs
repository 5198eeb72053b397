//! Prediction loss, similarity regularizers and their weighted total.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, domain_error, Result};
use crate::masking::MaskSpec;
use crate::predictor::SimilarityVars;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// How patches repeated across overlapping target blocks are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Every (block, patch) pair counts once.
    #[default]
    PerOccurrence,
    /// Every distinct patch counts once.
    PerUnique,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub beta: f64,
    pub predict_averaging: Averaging,
    pub similarity_averaging: Averaging,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.1,
            beta: 0.5,
            predict_averaging: Averaging::PerOccurrence,
            similarity_averaging: Averaging::PerOccurrence,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.beta >= 0.0 && self.lambda.is_finite() && self.beta.is_finite()) {
            return config_err(format!("lambda {} and beta {} must be finite and >= 0", self.lambda, self.beta));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_predict: f64,
    pub l_sparse: f64,
    pub l_consistency: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub predict: Var,
    pub sparse: Option<Var>,
    pub consistency: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown<T: Scalar>(&self, g: &Graph<T>) -> LossBreakdown {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.value(x).item().to_f64_lossless());
        LossBreakdown {
            l_predict: v(Some(self.predict)),
            l_sparse: v(self.sparse),
            l_consistency: v(self.consistency),
            total: v(Some(self.total)),
        }
    }
}

/// Mean L2 (not squared) distance between predicted and target rows.
/// `preds[k]` and `targets[k]` are the rows of target block `k`.
pub fn predict_loss<T: Scalar>(
    g: &mut Graph<T>,
    preds: &[Var],
    targets: &[Var],
    mask: &MaskSpec,
    averaging: Averaging,
) -> Result<Var> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(domain_error("predict_loss", format!("{} predictions vs {} targets", preds.len(), targets.len())));
    }
    let p = g.concat_rows(preds)?;
    let z = g.concat_rows(targets)?;
    let d = g.row_l2_distance(p, z)?;
    match averaging {
        Averaging::PerOccurrence => Ok(g.mean_all(d)?),
        Averaging::PerUnique => {
            let mut count = std::collections::HashMap::new();
            for &i in mask.targets.iter().flatten() {
                *count.entry(i).or_insert(0usize) += 1;
            }
            if mask.target_occurrences() != g.value(d).numel() {
                return Err(domain_error("predict_loss", "mask does not match prediction rows"));
            }
            let unique = T::from_usize(count.len()).unwrap();
            let w: Vec<T> = mask
                .targets
                .iter()
                .flatten()
                .map(|i| T::one() / (T::from_usize(count[i]).unwrap() * unique))
                .collect();
            let n = w.len();
            let w = g.constant(Tensor::new(vec![n], w)?);
            let wd = g.mul(d, w)?;
            Ok(g.sum_all(wd)?)
        }
    }
}

/// `(1/(rows·L)) Σ_l Σ_i ‖O_i^(l)‖₁` for one caption; `layers[l]` is `[rows×S]`
/// and `rows` the patch-count normalizer.
pub fn sparsity_loss<T: Scalar>(g: &mut Graph<T>, layers: &[Var], rows: usize) -> Result<Var> {
    let Some(&first) = layers.first() else {
        return Err(domain_error("sparsity_loss", "no layers"));
    };
    let mut acc = g.sum_all(first)?;
    for &o in &layers[1..] {
        let s = g.sum_all(o)?;
        acc = g.add(acc, s)?;
    }
    Ok(g.scale(acc, T::one() / T::from_usize(rows * layers.len()).unwrap()))
}

/// `(1/(rows·L)) Σ_l Σ_i ‖O_i^(l) − Ō_i‖₁` for one caption.
pub fn consistency_loss<T: Scalar>(g: &mut Graph<T>, layers: &[Var], rows: usize) -> Result<Var> {
    let Some(&first) = layers.first() else {
        return Err(domain_error("consistency_loss", "no layers"));
    };
    let inv_l = T::one() / T::from_usize(layers.len()).unwrap();
    let mut sum = first;
    for &o in &layers[1..] {
        sum = g.add(sum, o)?;
    }
    let mean = if layers.len() == 1 { first } else { g.scale(sum, inv_l) };
    let mut acc: Option<Var> = None;
    for &o in layers {
        let d = g.sub(o, mean)?;
        let a = g.abs(d);
        let s = g.sum_all(a)?;
        acc = Some(match acc {
            None => s,
            Some(x) => g.add(x, s)?,
        });
    }
    Ok(g.scale(acc.unwrap(), inv_l / T::from_usize(rows).unwrap()))
}

/// `l_predict + (λ/N) Σ_n L_sparse^n + (β/N) Σ_n L_consistency^n`. Without a
/// similarity tensor the total is `l_predict` itself.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    l_predict: Var,
    similarity: Option<&SimilarityVars>,
    cfg: &LossConfig,
) -> Result<LossVars> {
    let Some(sim) = similarity else {
        return Ok(LossVars {
            predict: l_predict,
            sparse: None,
            consistency: None,
            total: l_predict,
        });
    };
    let rows = match cfg.similarity_averaging {
        Averaging::PerOccurrence => sim.rows(),
        Averaging::PerUnique => sim.unique_patches,
    };
    let n = sim.per_caption.len();
    if n == 0 {
        return Err(domain_error("total_loss", "no captions"));
    }
    let mut sp = Vec::with_capacity(n);
    let mut co = Vec::with_capacity(n);
    for layers in &sim.per_caption {
        sp.push(sparsity_loss(g, layers, rows)?);
        co.push(consistency_loss(g, layers, rows)?);
    }
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let mean = |g: &mut Graph<T>, v: &[Var]| -> Result<Var> {
        let mut a = v[0];
        for &x in &v[1..] {
            a = g.add(a, x)?;
        }
        Ok(if v.len() == 1 { a } else { g.scale(a, inv_n) })
    };
    let sparse = mean(g, &sp)?;
    let consistency = mean(g, &co)?;
    let ws = g.scale(sparse, T::lit(cfg.lambda));
    let wc = g.scale(consistency, T::lit(cfg.beta));
    let t = g.add(l_predict, ws)?;
    let total = g.add(t, wc)?;
    Ok(LossVars {
        predict: l_predict,
        sparse: Some(sparse),
        consistency: Some(consistency),
        total,
    })
}

/// Value-level sparsity term for one caption.
pub fn sparsity_value<T: Scalar>(layers: &[Tensor<T>], rows: usize) -> Result<T> {
    let mut g = Graph::new();
    let v: Vec<Var> = layers.iter().map(|t| g.constant(t.clone())).collect();
    let out = sparsity_loss(&mut g, &v, rows)?;
    Ok(g.value(out).item())
}

/// Value-level consistency term for one caption.
pub fn consistency_value<T: Scalar>(layers: &[Tensor<T>], rows: usize) -> Result<T> {
    let mut g = Graph::new();
    let v: Vec<Var> = layers.iter().map(|t| g.constant(t.clone())).collect();
    let out = consistency_loss(&mut g, &v, rows)?;
    Ok(g.value(out).item())
}

/// Weighted total from already-evaluated terms (`Σ_n` sums, N captions).
pub fn combine(l_predict: f64, sparse_sum: f64, consistency_sum: f64, n: usize, cfg: &LossConfig) -> LossBreakdown {
    let nf = n as f64;
    let (s, c) = (sparse_sum / nf, consistency_sum / nf);
    LossBreakdown {
        l_predict,
        l_sparse: s,
        l_consistency: c,
        total: l_predict + cfg.lambda * s + cfg.beta * c,
    }
}
