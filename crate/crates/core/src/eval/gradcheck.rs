//! The gradient-check suite: every tensor op, then the full multi-caption
//! loss through encoder, fine predictor and both regularizers.

use rand::Rng;

use crate::error::Result;
use crate::losses::{predict_loss, total_loss, Averaging, LossConfig};
use crate::masking::{GridShape, MaskSpec};
use crate::nn::{Bound, Init, ParamSet};
use crate::predictor::{ConditionerKind, Fusion, Predictor, PredictorConfig};
use crate::rng::{rng_for, Stream};
use crate::tensor::gradcheck::{grad_check, op_suite, GradCheckReport};
use crate::tensor::{Graph, Tensor, Var};
use crate::text::{CaptionBatch, WordSequence};
use crate::vit::{patchify, EncoderConfig, EncoderPair};

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-4;

/// Deliberate defects for testing that the oracle notices them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    None,
    /// Regularizer terms keep their value but lose their gradient.
    DetachRegularizers,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub reports: Vec<GradCheckReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.reports.iter().all(GradCheckReport::passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }
}

/// Two-caption fine-conditioned model on a 2×2 patch grid with every
/// zero-initialized output path randomized so all parameters matter.
struct Composite {
    pair: EncoderPair<f64>,
    predictor: Predictor,
    pred: ParamSet<f64>,
    patches: Tensor<f64>,
    mask: MaskSpec,
    captions: CaptionBatch<f64>,
}

fn composite(seed: u64) -> Result<Composite> {
    let enc = EncoderConfig {
        image_size: 4,
        patch_size: 2,
        channels: 3,
        embed_dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
    };
    let pcfg = PredictorConfig {
        pred_dim: 8,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        text_dim: 4,
        conditioner: ConditionerKind::Fine,
        fusion: Fusion::Max,
        cond_layers: None,
        cond_heads: 2,
    };
    let mut pair = EncoderPair::new(&enc, &mut rng_for(seed, Stream::Init, 0))?;
    let mut pred = ParamSet::new();
    let mut irng = rng_for(seed, Stream::Init, 1);
    let predictor = Predictor::new(&pcfg, enc.embed_dim, enc.grid(), &mut pred, &mut Init { rng: &mut irng })?;
    let mut rng = rng_for(seed, Stream::Init, 2);
    for t in pair.online.tensors_mut().iter_mut().chain(pred.tensors_mut()) {
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
    }
    pair.ema_update(0.5)?;

    let mut drng = rng_for(seed, Stream::Data, 0);
    let image = Tensor::new(vec![4, 4, 3], (0..48).map(|_| drng.gen_range(-1.0..1.0)).collect())?;
    let patches = patchify(&image, 2)?;
    let mask = MaskSpec {
        grid: GridShape::square(2),
        context: vec![0, 1],
        targets: vec![vec![2], vec![3]],
    };
    let s = 3;
    let captions = CaptionBatch::new(
        (0..2)
            .map(|_| {
                let mut e: Vec<f64> = (0..s * 4).map(|_| drng.gen_range(-1.0..1.0)).collect();
                e[(s - 1) * 4..].iter_mut().for_each(|v| *v = 0.0);
                WordSequence::new(Tensor::new(vec![s, 4], e)?, vec![5, 6, 0], vec![true, true, false])
            })
            .collect::<Result<_>>()?,
    )?;
    Ok(Composite {
        pair,
        predictor,
        pred,
        patches,
        mask,
        captions,
    })
}

/// Gradient check of the full loss with respect to every online-encoder and
/// predictor parameter.
pub fn composite_check(seed: u64, corruption: Corruption) -> Result<GradCheckReport> {
    let c = composite(seed)?;
    let loss_cfg = LossConfig {
        lambda: 0.7,
        beta: 0.9,
        ..LossConfig::default()
    };
    let targets = c.pair.encode_target(&c.patches, &c.mask, true)?;
    let n_enc = c.pair.online.len();
    let mut inputs: Vec<Tensor<f64>> = c.pair.online.tensors().to_vec();
    inputs.extend(c.pred.tensors().iter().cloned());
    grad_check(
        "composite loss (fine, N=2, 2x2 patches)",
        |g: &mut Graph<f64>, v: &[Var]| {
            let enc = Bound::from_vars(v[..n_enc].to_vec());
            let pp = Bound::from_vars(v[n_enc..].to_vec());
            let z = c.pair.encode_context(g, &enc, &c.patches, &c.mask)?;
            let out = c.predictor.predict(g, &pp, z, &c.mask, Some(&c.captions))?;
            let tv: Vec<Var> = targets.iter().map(|t| g.constant(t.clone())).collect();
            let lp = predict_loss(g, &out.blocks, &tv, &c.mask, Averaging::PerOccurrence)?;
            let lv = total_loss(g, lp, out.similarity.as_ref(), &loss_cfg)?;
            match corruption {
                Corruption::None => Ok(lv.total),
                Corruption::DetachRegularizers => {
                    let neg = g.scale(lp, -1.0);
                    let reg = g.add(lv.total, neg)?;
                    let frozen = g.detach(reg);
                    Ok(g.add(lp, frozen)?)
                }
            }
        },
        &inputs,
        STEP,
        TOLERANCE,
    )
}

/// Every op over `seeds`, then the composite loss.
pub fn run_suite(seeds: std::ops::Range<u64>) -> Result<SuiteReport> {
    let mut reports = op_suite(seeds, STEP, TOLERANCE);
    reports.push(composite_check(0, Corruption::None)?);
    Ok(SuiteReport { reports })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composite_loss_matches_finite_differences() {
        let r = composite_check(0, Corruption::None).unwrap();
        assert!(r.passed(), "{r}");
        assert!(r.coordinates > 500);
    }

    #[test]
    fn corrupted_backward_is_detected() {
        let r = composite_check(0, Corruption::DetachRegularizers).unwrap();
        assert!(!r.passed(), "{r}");
    }
}
