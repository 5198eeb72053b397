//! Training loop: per-item graphs run in parallel, gradients are summed in
//! batch order, then AdamW, parameter projection and the EMA update.

pub mod checkpoint;
mod config;
mod optim;

use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{parse_override, Precision, TrainConfig};
pub use optim::{schedules, AdamW, Schedule, ScheduleConfig};

use crate::data::{normalize_pixels, SyntheticDataset};
use crate::error::{Error, Result};
use crate::losses::{predict_loss, total_loss, LossBreakdown};
use crate::masking::{sample_mask, MaskSpec};
use crate::nn::{Init, ParamSet};
use crate::predictor::Predictor;
use crate::rng::{rng_for, Stream};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};
use crate::vit::{patchify, EncoderPair};
use checkpoint::Entry;

/// Worker pool shared by training and evaluation, capped by `TCJEPA_THREADS`.
pub fn thread_pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let n = std::env::var("TCJEPA_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        rayon::ThreadPoolBuilder::new().num_threads(n).build().expect("thread pool")
    })
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub pair: EncoderPair<T>,
    pub predictor: Predictor,
    pub pred: ParamSet<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let enc = cfg.encoder();
        let pair = EncoderPair::new(&enc, &mut rng_for(cfg.seed, Stream::Init, 0))?;
        let mut pred = ParamSet::new();
        let mut rng = rng_for(cfg.seed, Stream::Init, 1);
        let predictor = Predictor::new(&cfg.predictor(), enc.embed_dim, enc.grid(), &mut pred, &mut Init { rng: &mut rng })?;
        Ok(Model { pair, predictor, pred })
    }

    /// Online encoder then predictor, the order of optimizer slots.
    pub fn trainable(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.pair.online.tensors().iter().chain(self.pred.tensors())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub losses: LossBreakdown,
    pub lr: f64,
    pub wd: f64,
    pub ema_m: f64,
}

pub const METRICS_HEADER: &str = "step,l_predict,l_sparse,l_consistency,total,lr,wd,ema_m";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, l.l_predict, l.l_sparse, l.l_consistency, l.total, self.lr, self.wd, self.ema_m
        )
    }
}

/// Appends rows, writing the header first when the file is new or empty.
pub fn append_metrics(path: &Path, records: &[StepRecord]) -> Result<()> {
    let fresh = std::fs::metadata(path).map_or(true, |m| m.len() == 0);
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut out = String::new();
    if fresh {
        out.push_str(METRICS_HEADER);
        out.push('\n');
    }
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Mean `l_predict` of each complete epoch.
pub fn epoch_means(records: &[StepRecord], steps_per_epoch: usize) -> Vec<f64> {
    records
        .chunks_exact(steps_per_epoch.max(1))
        .map(|c| c.iter().map(|r| r.losses.l_predict).sum::<f64>() / c.len() as f64)
        .collect()
}

struct ItemOut<T> {
    losses: LossBreakdown,
    grads: Vec<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub model: Model<T>,
    pub opt: AdamW<T>,
    /// Number of completed updates.
    pub step: u64,
    pub data: SyntheticDataset,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg)?;
        let opt = AdamW::new(model.trainable(), cfg.beta1, cfg.beta2, cfg.adam_eps);
        Ok(Trainer {
            cfg: cfg.clone(),
            model,
            opt,
            step: 0,
            data: SyntheticDataset::new(&cfg.data())?,
        })
    }

    pub fn schedule_config(&self) -> ScheduleConfig {
        ScheduleConfig {
            base_lr: self.cfg.base_lr,
            warmup_steps: self.cfg.warmup_steps(),
            total_steps: self.cfg.total_steps(),
            wd: (self.cfg.wd_start, self.cfg.wd_end),
            ema: (self.cfg.ema_start, self.cfg.ema_end),
        }
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.total_steps()
    }

    /// Dataset index of batch item `i` at `step`.
    pub fn item_index(&self, step: u64, i: usize) -> u64 {
        let spe = self.cfg.steps_per_epoch() as u64;
        let order = self.data.epoch_order(step / spe, self.cfg.train_size);
        order[(step % spe) as usize * self.cfg.batch_size + i]
    }

    pub fn item_mask(&self, step: u64, i: usize) -> Result<MaskSpec> {
        let mut rng = rng_for(self.cfg.seed, Stream::Mask, step * self.cfg.batch_size as u64 + i as u64);
        Ok(sample_mask(&self.cfg.masking(), self.cfg.encoder().grid(), &mut rng)?)
    }

    fn item(&self, step: u64, i: usize) -> Result<ItemOut<T>> {
        let cfg = &self.cfg;
        let m = &self.model;
        let sample = self.data.sample::<T>(self.item_index(step, i), cfg.n_captions.max(1))?;
        let patches = patchify(&normalize_pixels(&sample.image), cfg.patch_size)?;
        let mask = self.item_mask(step, i)?;
        let captions = if cfg.conditioner.needs_text() {
            Some(self.data.vocab.embed_batch::<T>(&sample.captions)?)
        } else {
            None
        };

        let mut g = Graph::new();
        let enc = m.pair.online.bind(&mut g, true);
        let pp = m.pred.bind(&mut g, true);
        let z = m.pair.encode_context(&mut g, &enc, &patches, &mask)?;
        let targets: Vec<Var> = m
            .pair
            .encode_target(&patches, &mask, cfg.target_layernorm)?
            .into_iter()
            .map(|t| g.constant(t))
            .collect();
        let out = m.predictor.predict(&mut g, &pp, z, &mask, captions.as_ref())?;
        let lp = predict_loss(&mut g, &out.blocks, &targets, &mask, cfg.predict_averaging)?;
        let lv = total_loss(&mut g, lp, out.similarity.as_ref(), &cfg.loss())?;
        g.backward(lv.total)?;
        let mut grads = m.pair.online.grads(&g, &enc);
        grads.extend(m.pred.grads(&g, &pp));
        Ok(ItemOut {
            losses: lv.breakdown(&g),
            grads,
        })
    }

    /// One optimizer update on batch `self.step`.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let step = self.step;
        let sched = schedules(step, &self.schedule_config());
        let b = self.cfg.batch_size;
        let items: Vec<ItemOut<T>> = {
            let this = &*self;
            thread_pool().install(|| (0..b).into_par_iter().map(|i| this.item(step, i)).collect::<Result<_>>())?
        };

        let mut losses = LossBreakdown::default();
        for it in &items {
            losses.l_predict += it.losses.l_predict;
            losses.l_sparse += it.losses.l_sparse;
            losses.l_consistency += it.losses.l_consistency;
            losses.total += it.losses.total;
        }
        let inv = 1.0 / b as f64;
        losses.l_predict *= inv;
        losses.l_sparse *= inv;
        losses.l_consistency *= inv;
        losses.total *= inv;

        let mut items = items.into_iter();
        let mut grads = items.next().expect("batch_size >= 1").grads;
        for it in items {
            for (acc, g) in grads.iter_mut().zip(&it.grads) {
                for (a, &x) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += x;
                }
            }
        }
        let inv_t = T::lit(inv);
        grads.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= inv_t));

        let finite = [losses.l_predict, losses.l_sparse, losses.l_consistency, losses.total]
            .iter()
            .all(|v| v.is_finite());
        if !finite || !grads.iter().all(Tensor::all_finite) {
            return Err(Error::NonFinite {
                step,
                l_predict: losses.l_predict,
                l_sparse: losses.l_sparse,
                l_consistency: losses.l_consistency,
            });
        }

        let m = &mut self.model;
        let params = m.pair.online.tensors_mut().iter_mut().chain(m.pred.tensors_mut().iter_mut());
        self.opt.update(params, &grads, sched.lr, sched.wd)?;
        m.predictor.project_params(&mut m.pred);
        m.pair.ema_update(sched.ema_m)?;
        self.step += 1;
        log::debug!("step {step}: l_predict {:.6} total {:.6}", losses.l_predict, losses.total);
        Ok(StepRecord {
            step,
            losses,
            lr: sched.lr,
            wd: sched.wd,
            ema_m: sched.ema_m,
        })
    }

    /// Runs until `total_steps`, handing every record to `on_step`.
    pub fn run(&mut self, mut on_step: impl FnMut(&Self, &StepRecord) -> Result<()>) -> Result<Vec<StepRecord>> {
        let mut out = Vec::new();
        while !self.is_done() {
            let r = self.train_step()?;
            on_step(self, &r)?;
            out.push(r);
        }
        Ok(out)
    }

    pub fn checkpoint_entries(&self) -> Result<Vec<Entry>> {
        let mut e = vec![
            Entry::bytes("meta/config", serde_json::to_vec(&self.cfg)?),
            Entry::u64s("meta/step", vec![self.step, self.opt.t]),
        ];
        let m = &self.model;
        for (prefix, ps) in [("online", &m.pair.online), ("target", &m.pair.target), ("pred", &m.pred)] {
            for (n, t) in ps.names().iter().zip(ps.tensors()) {
                e.push(Entry::tensor(format!("{prefix}/{n}"), t));
            }
        }
        for (k, t) in self.opt.m.iter().enumerate() {
            e.push(Entry::tensor(format!("adam.m/{k}"), t));
        }
        for (k, t) in self.opt.v.iter().enumerate() {
            e.push(Entry::tensor(format!("adam.v/{k}"), t));
        }
        Ok(e)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_file(path, &self.checkpoint_entries()?)
    }

    pub fn from_entries(entries: &[Entry]) -> Result<Self> {
        let find = |name: &str| {
            entries
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing entry {name}")))
        };
        let cfg: TrainConfig = match &find("meta/config")?.payload {
            checkpoint::Payload::U8(b) => serde_json::from_slice(b)?,
            _ => return Err(Error::Checkpoint("meta/config is not a byte entry".into())),
        };
        let mut tr = Trainer::<T>::new(&cfg)?;
        let (step, t) = match &find("meta/step")?.payload {
            checkpoint::Payload::U64(v) if v.len() == 2 => (v[0], v[1]),
            _ => return Err(Error::Checkpoint("meta/step malformed".into())),
        };
        tr.step = step;
        tr.opt.t = t;
        let load = |name: String, dst: &mut Tensor<T>| -> Result<()> {
            let t = find(&name)?.to_tensor::<T>()?;
            if t.shape() != dst.shape() {
                return Err(Error::Checkpoint(format!("{name}: shape {:?} != {:?}", t.shape(), dst.shape())));
            }
            *dst = t;
            Ok(())
        };
        let m = &mut tr.model;
        for (prefix, ps) in [("online", &mut m.pair.online), ("target", &mut m.pair.target), ("pred", &mut m.pred)] {
            let names = ps.names().to_vec();
            for (n, dst) in names.iter().zip(ps.tensors_mut()) {
                load(format!("{prefix}/{n}"), dst)?;
            }
        }
        for (k, dst) in tr.opt.m.iter_mut().enumerate() {
            load(format!("adam.m/{k}"), dst)?;
        }
        for (k, dst) in tr.opt.v.iter_mut().enumerate() {
            load(format!("adam.v/{k}"), dst)?;
        }
        let expected = tr.checkpoint_entries()?.len();
        if entries.len() != expected {
            return Err(Error::Checkpoint(format!("{} entries, expected {expected}", entries.len())));
        }
        Ok(tr)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_entries(&checkpoint::read_file(path)?)
    }
}

/// Precision stored in a checkpoint's config.
pub fn checkpoint_precision(path: &Path) -> Result<Precision> {
    let entries = checkpoint::read_file(path)?;
    let e = entries
        .iter()
        .find(|e| e.name == "meta/config")
        .ok_or_else(|| Error::Checkpoint("missing entry meta/config".into()))?;
    match &e.payload {
        checkpoint::Payload::U8(b) => Ok(serde_json::from_slice::<TrainConfig>(b)?.precision),
        _ => Err(Error::Checkpoint("meta/config is not a byte entry".into())),
    }
}
