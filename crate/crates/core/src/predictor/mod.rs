//! Narrow ViT predictor with mask tokens and the text conditioners.
//!
//! One predictor forward runs per target block over `[context ; mask tokens]`.
//! Per conditioned layer the order is: ViT block → per-caption conditioning →
//! fusion.

mod conditioner;
mod fusion;
mod similarity;

pub use conditioner::{ConditionerKind, CrossAttnLayer};
pub use fusion::{fuse, fuse_captions, Fusion};
pub use similarity::{SimilarityTensor, SimilarityVars};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::masking::{GridShape, MaskSpec};
use crate::nn::{ones_weights, Block, Bound, Init, LayerNorm, Linear, Mlp, Modulation, ParamId, ParamSet, INIT_STD};
use crate::scalar::Scalar;
use crate::text::CaptionBatch;
use crate::tensor::{Graph, Tensor, Var};
use crate::vit::sincos_pos_embed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub pred_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub text_dim: usize,
    pub conditioner: ConditionerKind,
    pub fusion: Fusion,
    /// Predictor layers that carry conditioning; `None` means all.
    pub cond_layers: Option<Vec<usize>>,
    /// Heads of the fine/holistic cross-attention.
    pub cond_heads: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            pred_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            text_dim: 32,
            conditioner: ConditionerKind::Fine,
            fusion: Fusion::Max,
            cond_layers: None,
            cond_heads: 1,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return config_err("predictor depth must be at least 1");
        }
        if self.pred_dim == 0 || self.pred_dim % 4 != 0 {
            return config_err(format!("pred_dim {} must be a positive multiple of 4", self.pred_dim));
        }
        for (h, what) in [(self.heads, "heads"), (self.cond_heads, "cond_heads")] {
            if h == 0 || self.pred_dim % h != 0 {
                return config_err(format!("predictor {what} {h} must divide pred_dim {}", self.pred_dim));
            }
        }
        if self.text_dim == 0 || self.mlp_ratio == 0 {
            return config_err("text_dim and mlp_ratio must be positive");
        }
        if let Some(bad) = self.cond_layers.iter().flatten().find(|&&l| l >= self.depth) {
            return config_err(format!("cond layer {bad} out of range for depth {}", self.depth));
        }
        Ok(())
    }

    pub fn is_conditioned(&self, layer: usize) -> bool {
        self.cond_layers.as_ref().map_or(true, |ls| ls.contains(&layer))
    }

    pub fn conditioned_layers(&self) -> Vec<usize> {
        (0..self.depth).filter(|&l| self.is_conditioned(l)).collect()
    }
}

/// Per-kind conditioner parameters, indexed by predictor layer where
/// applicable (`None` for unconditioned layers).
#[derive(Debug, Clone)]
pub enum Conditioner {
    None,
    Fine(Vec<Option<CrossAttnLayer>>),
    Holistic(Vec<Option<CrossAttnLayer>>),
    /// Modulation MLP `t̄ → [scale1, shift1, scale2, shift2]`.
    Adaln(Vec<Option<Mlp>>),
    /// Input-only MLP on `LN([z, t̄])`.
    Feature { ln: LayerNorm, mlp: Mlp },
    /// Text projection and one non-negative gate per layer scaling the
    /// attention weight of the appended word tokens (0 at init).
    Sequence { proj: Linear, gates: Vec<Option<ParamId>> },
}

#[derive(Debug, Clone)]
pub struct Predictor {
    pub cfg: PredictorConfig,
    pub enc_dim: usize,
    pub input_proj: Linear,
    pub mask_token: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub output_proj: Linear,
    pub conditioner: Conditioner,
    pub fusion_query: Option<ParamId>,
    pos: Tensor<f64>,
}

/// Predicted target features per block plus, for the fine conditioner, the
/// graph nodes of the similarity tensor.
#[derive(Debug, Clone)]
pub struct PredictOutput {
    pub blocks: Vec<Var>,
    pub similarity: Option<SimilarityVars>,
}

struct Text {
    seqs: Vec<Var>,
    pads: Vec<Var>,
    means: Vec<Var>,
    means_t: Vec<Tensor<f64>>,
    seq_len: usize,
}

impl Predictor {
    /// Core parameters are drawn before any conditioner parameter, so every
    /// conditioner kind shares the unconditioned initialization.
    pub fn new<T: Scalar, R: Rng>(
        cfg: &PredictorConfig,
        enc_dim: usize,
        grid: GridShape,
        ps: &mut ParamSet<T>,
        init: &mut Init<R>,
    ) -> Result<Self> {
        cfg.validate()?;
        let pd = cfg.pred_dim;
        let input_proj = Linear::new(ps, init, "predictor.input_proj", enc_dim, pd, false);
        let mask_token = ps.add("predictor.mask_token", init.trunc_normal(vec![pd], INIT_STD));
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(ps, init, &format!("predictor.blocks.{i}"), pd, cfg.heads, cfg.mlp_ratio))
            .collect();
        let norm = LayerNorm::new(ps, "predictor.norm", pd);
        let output_proj = Linear::new(ps, init, "predictor.output_proj", pd, enc_dim, false);

        let dt = cfg.text_dim;
        let conditioner = match cfg.conditioner {
            ConditionerKind::None => Conditioner::None,
            ConditionerKind::Fine | ConditionerKind::Holistic => {
                let layers = (0..cfg.depth)
                    .map(|l| {
                        cfg.is_conditioned(l)
                            .then(|| CrossAttnLayer::new(ps, init, &format!("cond.layers.{l}"), pd, dt, cfg.cond_heads))
                    })
                    .collect();
                if cfg.conditioner == ConditionerKind::Fine {
                    Conditioner::Fine(layers)
                } else {
                    Conditioner::Holistic(layers)
                }
            }
            ConditionerKind::Adaln => Conditioner::Adaln(
                (0..cfg.depth)
                    .map(|l| {
                        cfg.is_conditioned(l)
                            .then(|| Mlp::new(ps, init, &format!("cond.adaln.{l}"), (dt, pd, 4 * pd), true))
                    })
                    .collect(),
            ),
            ConditionerKind::Feature => Conditioner::Feature {
                ln: LayerNorm::new(ps, "cond.feature.ln", pd + dt),
                mlp: Mlp::new(ps, init, "cond.feature.mlp", (pd + dt, 4 * pd, pd), true),
            },
            ConditionerKind::Sequence => Conditioner::Sequence {
                proj: Linear::new(ps, init, "cond.sequence.proj", dt, pd, false),
                gates: (0..cfg.depth)
                    .map(|l| {
                        cfg.is_conditioned(l)
                            .then(|| ps.add(format!("cond.sequence.gate.{l}"), Tensor::zeros(vec![1])))
                    })
                    .collect(),
            },
        };
        let fusion_query = (cfg.conditioner.fuses() && cfg.fusion == Fusion::Attention)
            .then(|| ps.add("cond.fusion.query", Tensor::zeros(vec![pd])));
        Ok(Predictor {
            cfg: cfg.clone(),
            enc_dim,
            input_proj,
            mask_token,
            blocks,
            norm,
            output_proj,
            conditioner,
            fusion_query,
            pos: sincos_pos_embed(grid, pd)?,
        })
    }

    /// Re-imposes parameter constraints after an optimizer step.
    pub fn project_params<T: Scalar>(&self, ps: &mut ParamSet<T>) {
        if let Conditioner::Sequence { gates, .. } = &self.conditioner {
            for &id in gates.iter().flatten() {
                for v in ps.get_mut(id).data_mut() {
                    *v = v.max(T::zero());
                }
            }
        }
    }

    fn text<T: Scalar>(&self, g: &mut Graph<T>, captions: &CaptionBatch<T>) -> Result<Text> {
        if captions.text_dim() != self.cfg.text_dim {
            return config_err(format!(
                "caption embedding dim {} does not match predictor text_dim {}",
                captions.text_dim(),
                self.cfg.text_dim
            ));
        }
        let mut t = Text {
            seqs: Vec::new(),
            pads: Vec::new(),
            means: Vec::new(),
            means_t: Vec::new(),
            seq_len: captions.seq_len(),
        };
        for c in &captions.captions {
            t.seqs.push(g.constant(c.embeddings.clone()));
            t.pads.push(g.constant(c.pad_weights()));
            let m = c.mean_embedding();
            t.means_t.push(m.cast());
            t.means.push(g.constant(m));
        }
        Ok(t)
    }

    pub fn predict<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        z_x: Var,
        mask: &MaskSpec,
        captions: Option<&CaptionBatch<T>>,
    ) -> Result<PredictOutput> {
        let kind = self.cfg.conditioner;
        let text = match (kind.needs_text(), captions) {
            (false, _) => None,
            (true, Some(c)) => Some(self.text(g, c)?),
            (true, None) => return config_err(format!("conditioner '{kind}' requires captions")),
        };
        if g.shape(z_x) != [mask.context.len(), self.enc_dim] {
            return Err(crate::error::shape_error(
                "predict",
                g.shape(z_x),
                &[mask.context.len(), self.enc_dim],
            ));
        }
        let ctx = self.input_proj.forward(g, p, z_x)?;
        let ctx_pos = g.constant(self.pos.select_rows(&mask.context)?.cast());
        let ctx = g.add(ctx, ctx_pos)?;
        let query = self.fusion_query.map(|q| p[q]);

        let layers = self.cfg.conditioned_layers();
        let n_caps = text.as_ref().map_or(0, |t| t.seqs.len());
        let mut o_rows: Vec<Vec<Vec<Var>>> = vec![vec![Vec::new(); layers.len()]; n_caps];
        let mut row_patch = Vec::new();
        let mut row_block = Vec::new();
        let mut outs = Vec::with_capacity(mask.targets.len());

        for (bi, block) in mask.targets.iter().enumerate() {
            let pos = g.constant(self.pos.select_rows(block)?.cast());
            let tokens = g.add(pos, p[self.mask_token])?;
            let mut x = g.concat_rows(&[ctx, tokens])?;
            let rows = mask.context.len() + block.len();
            if kind.has_similarity() {
                row_patch.extend(mask.context.iter().chain(block));
                row_block.extend(std::iter::repeat(bi).take(rows));
            }

            if let (Conditioner::Feature { ln, mlp }, Some(t)) = (&self.conditioner, &text) {
                let mut cands = Vec::with_capacity(t.means.len());
                for mt in &t.means_t {
                    let rep: Vec<T> = (0..rows).flat_map(|_| mt.data().iter().map(|&v| T::lit(v))).collect();
                    let rep = g.constant(Tensor::new(vec![rows, self.cfg.text_dim], rep)?);
                    let cat = g.concat_cols(&[x, rep])?;
                    let h = ln.forward(g, p, cat)?;
                    let h = mlp.forward(g, p, h)?;
                    cands.push(g.add(x, h)?);
                }
                x = fuse(g, &cands, self.cfg.fusion, query)?;
            }

            let mut seq_weights: Option<(Var, Var)> = None;
            if let (Conditioner::Sequence { proj, .. }, Some(t)) = (&self.conditioner, &text) {
                let all = g.concat_rows(&t.seqs)?;
                let emb = proj.forward(g, p, all)?;
                x = g.concat_rows(&[x, emb])?;
                let ns = t.seqs.len() * t.seq_len;
                let cols = t
                    .pads
                    .iter()
                    .map(|&v| g.reshape(v, vec![t.seq_len, 1]))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                let pads = g.concat_rows(&cols)?;
                let pads = g.reshape(pads, vec![ns])?;
                seq_weights = Some((ones_weights(g, rows), pads));
            }
            let image_weights = ones_weights(g, rows);
            debug_assert_eq!(
                g.shape(x)[0],
                self.sequence_length(mask.context.len(), block.len(), text.as_ref().map(|t| (t.seqs.len(), t.seq_len)))
            );

            let mut ci = 0;
            for (l, blk) in self.blocks.iter().enumerate() {
                match (&self.conditioner, &text) {
                    (Conditioner::Adaln(mlps), Some(t)) if mlps[l].is_some() => {
                        let mlp = mlps[l].as_ref().unwrap();
                        let pd = self.cfg.pred_dim;
                        let mut cands = Vec::with_capacity(t.means.len());
                        for &m in &t.means {
                            let coef = mlp.forward(g, p, m)?;
                            let part = |i: usize, g: &mut Graph<T>| -> Result<Var> {
                                let c = g.slice_cols(coef, i * pd, (i + 1) * pd)?;
                                Ok(g.reshape(c, vec![pd])?)
                            };
                            let m = Modulation {
                                scale1: part(0, g)?,
                                shift1: part(1, g)?,
                                scale2: part(2, g)?,
                                shift2: part(3, g)?,
                            };
                            cands.push(blk.forward(g, p, x, image_weights, Some(&m))?);
                        }
                        x = fuse(g, &cands, self.cfg.fusion, query)?;
                    }
                    (Conditioner::Sequence { gates, .. }, Some(_)) => {
                        let (ones, pads) = seq_weights.unwrap();
                        let text_w = match gates[l] {
                            Some(gate) => g.mul(pads, p[gate])?,
                            None => g.scale(pads, T::zero()),
                        };
                        let a = g.reshape(ones, vec![rows, 1])?;
                        let b = g.reshape(text_w, vec![g.value(pads).numel(), 1])?;
                        let w = g.concat_rows(&[a, b])?;
                        let n = g.value(w).numel();
                        let w = g.reshape(w, vec![n])?;
                        x = blk.forward(g, p, x, w, None)?;
                    }
                    _ => x = blk.forward(g, p, x, image_weights, None)?,
                }

                match (&self.conditioner, &text) {
                    (Conditioner::Fine(cl), Some(t)) | (Conditioner::Holistic(cl), Some(t)) if cl[l].is_some() => {
                        let layer = cl[l].as_ref().unwrap();
                        let fine = kind == ConditionerKind::Fine;
                        let mut cands = Vec::with_capacity(t.seqs.len());
                        for n in 0..t.seqs.len() {
                            let (y, o) = if fine {
                                layer.forward(g, p, x, t.seqs[n], t.pads[n], true)?
                            } else {
                                let w = ones_weights(g, 1);
                                layer.forward(g, p, x, t.means[n], w, false)?
                            };
                            if let Some(o) = o {
                                o_rows[n][ci].push(o);
                            }
                            cands.push(y);
                        }
                        x = fuse(g, &cands, self.cfg.fusion, query)?;
                    }
                    _ => {}
                }
                if self.cfg.is_conditioned(l) {
                    ci += 1;
                }
            }

            let x = self.norm.forward(g, p, x)?;
            let idx: Vec<usize> = (mask.context.len()..rows).collect();
            let x = g.select_rows(x, &idx)?;
            outs.push(self.output_proj.forward(g, p, x)?);
        }

        let similarity = if kind.has_similarity() {
            let per_caption = o_rows
                .into_iter()
                .map(|layers| {
                    layers
                        .into_iter()
                        .map(|parts| g.concat_rows(&parts))
                        .collect::<std::result::Result<Vec<_>, _>>()
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            Some(SimilarityVars {
                per_caption,
                layers,
                row_patch,
                row_block,
                context_len: mask.context.len(),
                unique_patches: mask.context.len() + mask.target_union().len(),
            })
        } else {
            None
        };
        Ok(PredictOutput { blocks: outs, similarity })
    }

    /// Tokens in one per-block forward.
    pub fn sequence_length(&self, context: usize, block: usize, captions: Option<(usize, usize)>) -> usize {
        let text = match (self.cfg.conditioner, captions) {
            (ConditionerKind::Sequence, Some((n, s))) => n * s,
            _ => 0,
        };
        context + block + text
    }

    pub fn num_params(cfg: &PredictorConfig, enc_dim: usize) -> usize {
        let pd = cfg.pred_dim;
        let core = Linear::num_params(enc_dim, pd)
            + pd
            + cfg.depth * Block::num_params(pd, cfg.mlp_ratio)
            + 2 * pd
            + Linear::num_params(pd, enc_dim);
        core + Self::conditioner_params(cfg)
    }

    pub fn conditioner_params(cfg: &PredictorConfig) -> usize {
        let (pd, dt) = (cfg.pred_dim, cfg.text_dim);
        let lc = cfg.conditioned_layers().len();
        let query = if cfg.conditioner.fuses() && cfg.fusion == Fusion::Attention { pd } else { 0 };
        let body = match cfg.conditioner {
            ConditionerKind::None => 0,
            ConditionerKind::Fine | ConditionerKind::Holistic => lc * CrossAttnLayer::num_params(pd, dt),
            ConditionerKind::Adaln => lc * (Linear::num_params(dt, pd) + Linear::num_params(pd, 4 * pd)),
            ConditionerKind::Feature => {
                2 * (pd + dt) + Linear::num_params(pd + dt, 4 * pd) + Linear::num_params(4 * pd, pd)
            }
            ConditionerKind::Sequence => Linear::num_params(dt, pd) + lc,
        };
        body + query
    }
}
