//! Patch-word similarity export for offline plotting.

use serde::{Deserialize, Serialize};

use crate::data::{normalize_pixels, SyntheticDataset};
use crate::error::{Error, Result};
use crate::masking::sample_mask;
use crate::predictor::ConditionerKind;
use crate::rng::{rng_for, Stream};
use crate::scalar::Scalar;
use crate::tensor::Graph;
use crate::train::{Model, TrainConfig};
use crate::vit::patchify;

/// Schema of [`MapExport`], committed alongside the code.
pub const SCHEMA: &str = include_str!("../../schema/maps.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapRecord {
    /// Target block whose predictor forward produced the row.
    pub block: usize,
    pub patch_index: usize,
    pub caption_index: usize,
    pub layer: usize,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanRecord {
    pub block: usize,
    pub patch_index: usize,
    pub caption_index: usize,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockError {
    pub block: usize,
    pub patches: Vec<usize>,
    /// Mean L2 distance between predicted and target rows.
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapExport {
    pub image_index: u64,
    pub seed: u64,
    pub grid: [usize; 2],
    pub seq_len: usize,
    pub layers: Vec<usize>,
    pub captions: Vec<Vec<u32>>,
    pub context: Vec<usize>,
    pub targets: Vec<Vec<usize>>,
    pub records: Vec<MapRecord>,
    pub mean_map: Vec<MeanRecord>,
    pub block_errors: Vec<BlockError>,
}

/// Runs one forward of the fine predictor on dataset image `index` under a
/// mask drawn from `(seed, index)` and collects the similarities.
pub fn export_maps<T: Scalar>(model: &Model<T>, cfg: &TrainConfig, data: &SyntheticDataset, index: u64, seed: u64) -> Result<MapExport> {
    if cfg.conditioner != ConditionerKind::Fine {
        return Err(Error::Unsupported(format!(
            "conditioner '{}' has no patch-word similarities (only 'fine' does)",
            cfg.conditioner
        )));
    }
    let sample = data.sample::<T>(index, cfg.n_captions.max(1))?;
    let patches = patchify(&normalize_pixels(&sample.image), cfg.patch_size)?;
    let grid = cfg.encoder().grid();
    let mask = sample_mask(&cfg.masking(), grid, &mut rng_for(seed, Stream::Mask, index))?;
    let captions = data.vocab.embed_batch::<T>(&sample.captions)?;

    let mut g = Graph::new();
    let enc = model.pair.online.bind(&mut g, false);
    let pp = model.pred.bind(&mut g, false);
    let z = model.pair.encode_context(&mut g, &enc, &patches, &mask)?;
    let out = model.predictor.predict(&mut g, &pp, z, &mask, Some(&captions))?;
    let targets = model.pair.encode_target(&patches, &mask, cfg.target_layernorm)?;
    let sim = out
        .similarity
        .as_ref()
        .ok_or_else(|| Error::Unsupported("predictor produced no similarities".into()))?
        .extract(&g)?;

    let f = |v: &[T]| v.iter().map(|x| x.to_f64_lossless()).collect::<Vec<_>>();
    let mut records = Vec::with_capacity(sim.layers.len() * sim.rows * sim.captions);
    for (li, &layer) in sim.layers.iter().enumerate() {
        for r in 0..sim.rows {
            for c in 0..sim.captions {
                records.push(MapRecord {
                    block: sim.row_block[r],
                    patch_index: sim.row_patch[r],
                    caption_index: c,
                    layer,
                    scores: f(sim.scores(li, r, c)),
                });
            }
        }
    }
    let mean = sim.layer_mean();
    let s = sim.seq_len;
    let mut mean_map = Vec::with_capacity(sim.rows * sim.captions);
    for r in 0..sim.rows {
        for c in 0..sim.captions {
            let i = (r * sim.captions + c) * s;
            mean_map.push(MeanRecord {
                block: sim.row_block[r],
                patch_index: sim.row_patch[r],
                caption_index: c,
                scores: f(&mean[i..i + s]),
            });
        }
    }
    let block_errors = out
        .blocks
        .iter()
        .zip(&targets)
        .enumerate()
        .map(|(k, (&p, t))| {
            let p = g.value(p);
            let rows = t.shape()[0];
            let err = (0..rows)
                .map(|r| {
                    p.row(r)
                        .iter()
                        .zip(t.row(r))
                        .map(|(&a, &b)| (a.to_f64_lossless() - b.to_f64_lossless()).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .sum::<f64>()
                / rows as f64;
            BlockError {
                block: k,
                patches: mask.targets[k].clone(),
                error: err,
            }
        })
        .collect();
    Ok(MapExport {
        image_index: index,
        seed,
        grid: [grid.rows, grid.cols],
        seq_len: s,
        layers: sim.layers.clone(),
        captions: sample.captions.clone(),
        context: mask.context.clone(),
        targets: mask.targets.clone(),
        records,
        mean_map,
        block_errors,
    })
}
