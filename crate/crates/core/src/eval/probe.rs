//! Linear probe on average-pooled target-encoder features.

use serde::{Deserialize, Serialize};

use crate::data::{normalize_pixels, DataConfig, SyntheticDataset};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for, Stream};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};
use crate::train::{thread_pool, AdamW};
use crate::vit::{patchify, EncoderPair};
use rand::seq::SliceRandom;
use rayon::prelude::*;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub train_n: usize,
    pub val_n: usize,
    pub epochs: usize,
    pub lr: f64,
    pub wd: f64,
    pub seed: u64,
    /// Shuffle training labels (label-destruction control).
    pub permute_labels: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            train_n: 1024,
            val_n: 512,
            epochs: 300,
            lr: 0.05,
            wd: 1e-4,
            seed: 0,
            permute_labels: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub train_acc: f64,
    pub val_acc: f64,
    pub classes: usize,
    pub feature_dim: usize,
    pub seed: u64,
    /// Accuracy of always answering the most frequent training class.
    pub majority_rate: f64,
}

/// Average-pooled target features, `[n × d]` row-major, in f64.
pub fn pooled_features<T: Scalar>(
    pair: &EncoderPair<T>,
    data: &SyntheticDataset,
    indices: &[u64],
    layernorm: bool,
) -> Result<Vec<Vec<f64>>> {
    let patch = pair.encoder.cfg.patch_size;
    thread_pool().install(|| {
        indices
            .par_iter()
            .map(|&i| {
                let s = data.sample::<T>(i, 1)?;
                let f = pair.target_features(&patchify(&normalize_pixels(&s.image), patch)?, layernorm)?;
                let (n, d) = f.dims2()?;
                let mut pooled = vec![0.0; d];
                for r in 0..n {
                    pooled.iter_mut().zip(f.row(r)).for_each(|(a, &b)| *a += b.to_f64_lossless());
                }
                pooled.iter_mut().for_each(|v| *v /= n as f64);
                Ok(pooled)
            })
            .collect()
    })
}

/// Split of the probe dataset: scenes disjoint from training, fixed by `seed`.
pub fn probe_dataset(data_cfg: &DataConfig, seed: u64) -> Result<SyntheticDataset> {
    SyntheticDataset::new(&DataConfig {
        seed: derive_seed(seed, Stream::Probe, 0),
        ..data_cfg.clone()
    })
}

/// Freezes the target encoder, pools features, standardizes them with the
/// training split's statistics and fits a softmax classifier with AdamW.
pub fn linear_probe<T: Scalar>(pair: &EncoderPair<T>, data_cfg: &DataConfig, cfg: &ProbeConfig) -> Result<ProbeResult> {
    let data = probe_dataset(data_cfg, cfg.seed)?;
    let classes = data.num_classes();
    let idx: Vec<u64> = (0..(cfg.train_n + cfg.val_n) as u64).collect();
    let feats = pooled_features(pair, &data, &idx, false)?;
    let mut labels: Vec<usize> = idx
        .iter()
        .map(|&i| crate::data::gen_scene(&data.cfg, data.sample_seed(i)).subject_glyph())
        .collect();
    if cfg.permute_labels {
        labels[..cfg.train_n].shuffle(&mut rng_for(cfg.seed, Stream::Probe, 1));
    }
    let (xtr, xva) = feats.split_at(cfg.train_n);
    let (ytr, yva) = labels.split_at(cfg.train_n);
    let mut counts = vec![0usize; classes];
    ytr.iter().for_each(|&y| counts[y] += 1);
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Data(format!("class {c} absent from the probe training split")));
    }
    let d = xtr[0].len();

    let mean: Vec<f64> = (0..d).map(|k| xtr.iter().map(|x| x[k]).sum::<f64>() / xtr.len() as f64).collect();
    let std: Vec<f64> = (0..d)
        .map(|k| {
            let v = xtr.iter().map(|x| (x[k] - mean[k]).powi(2)).sum::<f64>() / xtr.len() as f64;
            v.sqrt().max(1e-8)
        })
        .collect();
    let (mean, std) = (&mean, &std);
    let standardize = |xs: &[Vec<f64>]| -> Result<Tensor<f64>> {
        let data: Vec<f64> = xs.iter().flat_map(|x| (0..d).map(move |k| (x[k] - mean[k]) / std[k])).collect();
        Ok(Tensor::new(vec![xs.len(), d], data)?)
    };
    let (xtr_t, xva_t) = (standardize(xtr)?, standardize(xva)?);

    let mut params = vec![Tensor::<f64>::zeros(vec![d, classes]), Tensor::zeros(vec![classes])];
    let mut opt = AdamW::new(&params, 0.9, 0.999, 1e-8);
    for _ in 0..cfg.epochs {
        let mut g = Graph::new();
        let w = g.input(params[0].clone());
        let b = g.input(params[1].clone());
        let x = g.constant(xtr_t.clone());
        let z = g.matmul(x, w)?;
        let logits = g.add(z, b)?;
        let loss = g.cross_entropy(logits, ytr)?;
        g.backward(loss)?;
        let grads = vec![g.grad_or_zeros(w), g.grad_or_zeros(b)];
        opt.update(&mut params, &grads, cfg.lr, cfg.wd)?;
    }
    let accuracy = |x: &Tensor<f64>, y: &[usize]| -> Result<f64> {
        let mut g = Graph::new();
        let (xv, w, b) = (g.constant(x.clone()), g.constant(params[0].clone()), g.constant(params[1].clone()));
        let z = g.matmul(xv, w)?;
        let logits = g.add(z, b)?;
        let l = g.value(logits);
        let hits = (0..y.len())
            .filter(|&r| {
                let row = l.row(r);
                let arg = (0..classes).fold(0, |best, k| if row[k] > row[best] { k } else { best });
                arg == y[r]
            })
            .count();
        Ok(hits as f64 / y.len().max(1) as f64)
    };
    let majority = (0..classes).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap();
    Ok(ProbeResult {
        train_acc: accuracy(&xtr_t, ytr)?,
        val_acc: accuracy(&xva_t, yva)?,
        classes,
        feature_dim: d,
        seed: cfg.seed,
        majority_rate: yva.iter().filter(|&&y| y == majority).count() as f64 / yva.len().max(1) as f64,
    })
}
