//! Closed-form parameter and FLOP counts. FLOPs count two per multiply-add
//! of every matrix product; elementwise work is ignored.

use serde::{Deserialize, Serialize};

use crate::masking::{area_bounds, MaskingConfig};
use crate::nn::{Block, Linear};
use crate::predictor::{ConditionerKind, CrossAttnLayer, Predictor, PredictorConfig};
use crate::vit::{EncoderConfig, VitEncoder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelStats {
    pub encoder_params: usize,
    /// Online plus EMA target copy.
    pub encoder_params_total: usize,
    pub predictor_params: usize,
    pub conditioner_params: usize,
    /// Fixed sin-cos position table entries (not trainable).
    pub pos_constants: usize,
    pub block_params: usize,
    pub flops_without_conditioner: u64,
    pub flops_with_conditioner: u64,
    /// `(with - without) / without`.
    pub overhead_ratio: f64,
    /// Rows assumed for the nominal mask: context and per-target-block.
    pub nominal_context: usize,
    pub nominal_block: usize,
}

/// Multiply-adds of one pre-LN transformer block on `l` rows of width `d`.
fn block_macs(l: u64, d: u64, ratio: u64) -> u64 {
    4 * l * d * d + 2 * l * l * d + 2 * ratio * l * d * d
}

/// Nominal mask: mid-range target blocks and a context of mid-range scale
/// with the targets removed.
pub fn nominal_rows(mask: &MaskingConfig, area: usize) -> (usize, usize) {
    let mid = |(a, b): (f64, f64)| (a + b) / 2.0;
    let block = ((area as f64 * mid(mask.target_scale)).round() as usize).max(1);
    let ctx_area = (area as f64 * mid(mask.context_scale)).round() as usize;
    let context = ctx_area.saturating_sub(mask.num_targets * block).max(1);
    (context, block)
}

pub fn model_stats(
    enc: &EncoderConfig,
    pred: &PredictorConfig,
    mask: &MaskingConfig,
    n_captions: usize,
    seq_len: usize,
) -> ModelStats {
    let (d, pd, dt) = (enc.embed_dim as u64, pred.pred_dim as u64, pred.text_dim as u64);
    let p = enc.num_patches() as u64;
    let (c, b) = nominal_rows(mask, enc.num_patches());
    let (c, b) = (c as u64, b as u64);
    let k = mask.num_targets as u64;
    let (n, s) = (n_captions.max(1) as u64, seq_len as u64);
    let er = enc.mlp_ratio as u64;
    let pr = pred.mlp_ratio as u64;

    let encoder = |rows: u64| rows * enc.patch_dim() as u64 * d + enc.depth as u64 * block_macs(rows, d, er);
    let l = c + b;
    let core = c * d * pd + k * (pred.depth as u64 * block_macs(l, pd, pr) + b * pd * d);
    let without = 2 * (encoder(p) + encoder(c) + core);

    let lc = pred.conditioned_layers().len() as u64;
    let extra = match pred.conditioner {
        ConditionerKind::None => 0,
        ConditionerKind::Fine => {
            // q, k/v projections, scores + weighted sum, W_O, MLP, cosine map.
            let per = l * pd * pd + 2 * s * dt * pd + 2 * l * s * pd + l * pd * pd + 8 * l * pd * pd + l * s * pd;
            k * lc * n * per
        }
        ConditionerKind::Holistic => {
            let per = l * pd * pd + 2 * dt * pd + 2 * l * pd + l * pd * pd + 8 * l * pd * pd;
            k * lc * n * per
        }
        ConditionerKind::Adaln => {
            let per_caption = dt * pd + pd * 4 * pd;
            k * lc * (n * per_caption + (n - 1) * block_macs(l, pd, pr))
        }
        ConditionerKind::Feature => k * n * (l * (pd + dt) * 4 * pd + l * 4 * pd * pd),
        ConditionerKind::Sequence => {
            let ls = l + n * s;
            let depth = pred.depth as u64;
            k * (n * s * dt * pd + depth * (block_macs(ls, pd, pr) - block_macs(l, pd, pr)))
        }
    };
    let with = without + 2 * extra;
    let enc_params = VitEncoder::num_params(enc);
    let cond = Predictor::conditioner_params(pred);
    ModelStats {
        encoder_params: enc_params,
        encoder_params_total: 2 * enc_params,
        predictor_params: Predictor::num_params(pred, enc.embed_dim) - cond,
        conditioner_params: cond,
        pos_constants: enc.num_patches() * enc.embed_dim,
        block_params: enc.depth * Block::num_params(enc.embed_dim, enc.mlp_ratio),
        flops_without_conditioner: without,
        flops_with_conditioner: with,
        overhead_ratio: (with - without) as f64 / without as f64,
        nominal_context: c as usize,
        nominal_block: b as usize,
    }
}

/// Parameters of the patch projection alone.
pub fn patch_projection_params(enc: &EncoderConfig) -> usize {
    Linear::num_params(enc.patch_dim(), enc.embed_dim)
}

/// Keeps `area_bounds` and nominal sizes in agreement for feasible configs.
pub fn nominal_block_in_range(mask: &MaskingConfig, area: usize) -> bool {
    let (lo, hi) = area_bounds(mask.target_scale, crate::masking::GridShape::square((area as f64).sqrt() as usize));
    let (_, b) = nominal_rows(mask, area);
    (lo..=hi).contains(&b)
}

/// Fine conditioner parameters for one layer (re-exported for reports).
pub fn fine_layer_params(pred: &PredictorConfig) -> usize {
    CrossAttnLayer::num_params(pred.pred_dim, pred.text_dim)
}
