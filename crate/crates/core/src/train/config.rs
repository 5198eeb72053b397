use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::DataConfig;
use crate::error::{config_err, Error, Result};
use crate::losses::{Averaging, LossConfig};
use crate::masking::MaskingConfig;
use crate::predictor::{ConditionerKind, Fusion, PredictorConfig};
use crate::vit::EncoderConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(format!("unknown precision '{s}' (expected f32 or f64)")),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

/// Every knob of a training run, as one flat key list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub precision: Precision,

    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Distinct scenes per epoch.
    pub train_size: usize,
    pub base_lr: f64,
    pub wd_start: f64,
    pub wd_end: f64,
    pub ema_start: f64,
    pub ema_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Checkpoint period in epochs; 0 writes only the final one.
    pub checkpoint_every: usize,

    pub lambda: f64,
    pub beta: f64,
    pub predict_averaging: Averaging,
    pub similarity_averaging: Averaging,
    pub target_layernorm: bool,

    pub n_captions: usize,
    pub conditioner: ConditionerKind,
    pub fusion: Fusion,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cond_layers: Option<Vec<usize>>,
    pub cond_heads: usize,

    pub num_targets: usize,
    pub target_scale: (f64, f64),
    pub target_aspect: (f64, f64),
    pub context_scale: (f64, f64),
    pub context_aspect: (f64, f64),
    pub max_retries: usize,

    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub pred_dim: usize,
    pub pred_depth: usize,
    pub pred_heads: usize,

    pub cells: usize,
    pub num_glyphs: usize,
    pub num_colors: usize,
    pub seq_len: usize,
    pub text_dim: usize,
    pub vocab_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_placements: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = MaskingConfig::default();
        let e = EncoderConfig::default();
        let p = PredictorConfig::default();
        let d = DataConfig::default();
        let l = LossConfig::default();
        TrainConfig {
            seed: 0,
            precision: Precision::F32,
            batch_size: 64,
            epochs: 50,
            warmup_epochs: 5,
            train_size: 2048,
            base_lr: 1e-3,
            wd_start: 0.04,
            wd_end: 0.4,
            ema_start: 0.996,
            ema_end: 1.0,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            checkpoint_every: 10,
            lambda: l.lambda,
            beta: l.beta,
            predict_averaging: l.predict_averaging,
            similarity_averaging: l.similarity_averaging,
            target_layernorm: false,
            n_captions: 4,
            conditioner: p.conditioner,
            fusion: p.fusion,
            cond_layers: None,
            cond_heads: p.cond_heads,
            num_targets: m.num_targets,
            target_scale: m.target_scale,
            target_aspect: m.target_aspect,
            context_scale: m.context_scale,
            context_aspect: m.context_aspect,
            max_retries: m.max_retries,
            image_size: e.image_size,
            patch_size: e.patch_size,
            embed_dim: e.embed_dim,
            depth: e.depth,
            heads: e.heads,
            mlp_ratio: e.mlp_ratio,
            pred_dim: p.pred_dim,
            pred_depth: p.depth,
            pred_heads: p.heads,
            cells: d.cells,
            num_glyphs: d.num_glyphs,
            num_colors: d.num_colors,
            seq_len: d.seq_len,
            text_dim: d.text_dim,
            vocab_size: d.vocab_size,
            max_placements: None,
        }
    }
}

const OPTIONAL_KEYS: [&str; 2] = ["cond_layers", "max_placements"];

impl TrainConfig {
    /// All accepted keys, in declaration order.
    pub fn keys() -> Vec<String> {
        let table = toml::Table::try_from(TrainConfig::default()).expect("default config serializes");
        let mut keys: Vec<String> = table.keys().cloned().collect();
        keys.extend(OPTIONAL_KEYS.iter().map(|k| k.to_string()));
        keys
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for o in overrides {
            let (k, v) = parse_override(o)?;
            table.insert(k, v);
        }
        Self::from_table(table)
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let known: BTreeSet<String> = Self::keys().into_iter().collect();
        let unknown: Vec<&str> = table.keys().filter(|k| !known.contains(*k)).map(String::as_str).collect();
        if !unknown.is_empty() {
            return config_err(format!("unknown config keys: {}", unknown.join(", ")));
        }
        let cfg: TrainConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return config_err("batch_size and epochs must be positive");
        }
        if self.warmup_epochs > self.epochs {
            return config_err(format!("warmup_epochs {} exceeds epochs {}", self.warmup_epochs, self.epochs));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return config_err(format!("base_lr {} must be positive", self.base_lr));
        }
        if self.train_size < self.batch_size {
            return config_err(format!("train_size {} is smaller than batch_size {}", self.train_size, self.batch_size));
        }
        for (v, name) in [(self.beta1, "beta1"), (self.beta2, "beta2")] {
            if !(0.0..1.0).contains(&v) {
                return config_err(format!("{name} {v} outside [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) || self.wd_start < 0.0 || self.wd_end < 0.0 {
            return config_err("adam_eps must be positive and weight decay non-negative");
        }
        for m in [self.ema_start, self.ema_end] {
            if !(0.0..=1.0).contains(&m) {
                return config_err(format!("EMA momentum {m} outside [0, 1]"));
            }
        }
        if self.conditioner.needs_text() && self.n_captions == 0 {
            return config_err("n_captions must be at least 1 for a text conditioner");
        }
        self.masking().validate()?;
        self.encoder().validate()?;
        self.predictor().validate()?;
        self.data().validate()?;
        self.loss().validate()?;
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train_size / self.batch_size
    }

    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.steps_per_epoch()) as u64
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_epochs * self.steps_per_epoch()) as u64
    }

    pub fn masking(&self) -> MaskingConfig {
        MaskingConfig {
            num_targets: self.num_targets,
            target_scale: self.target_scale,
            target_aspect: self.target_aspect,
            context_scale: self.context_scale,
            context_aspect: self.context_aspect,
            max_retries: self.max_retries,
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            channels: 3,
            embed_dim: self.embed_dim,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn predictor(&self) -> PredictorConfig {
        PredictorConfig {
            pred_dim: self.pred_dim,
            depth: self.pred_depth,
            heads: self.pred_heads,
            mlp_ratio: self.mlp_ratio,
            text_dim: self.text_dim,
            conditioner: self.conditioner,
            fusion: self.fusion,
            cond_layers: self.cond_layers.clone(),
            cond_heads: self.cond_heads,
        }
    }

    pub fn data(&self) -> DataConfig {
        DataConfig {
            image_size: self.image_size,
            cells: self.cells,
            num_glyphs: self.num_glyphs,
            num_colors: self.num_colors,
            seq_len: self.seq_len,
            text_dim: self.text_dim,
            vocab_size: self.vocab_size,
            max_placements: self.max_placements,
            seed: self.seed,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            beta: self.beta,
            predict_averaging: self.predict_averaging,
            similarity_averaging: self.similarity_averaging,
        }
    }

    /// Stable short hash of the resolved config (sweep bookkeeping).
    pub fn hash(&self) -> String {
        format!("{:08x}", crc32fast::hash(self.to_toml().as_bytes()))
    }
}

/// `key=value`, with `value` read as a TOML literal and falling back to a
/// bare string (`conditioner=fine`).
pub fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let s = s.trim_start_matches("--");
    let Some((k, v)) = s.split_once('=') else {
        return config_err(format!("override '{s}' is not key=value"));
    };
    let value = format!("v = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        let back = TrainConfig::from_toml_str(&c.to_toml(), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!((c.batch_size, c.base_lr, c.epochs), (64, 1e-3, 50));
    }

    #[test]
    fn unknown_keys_are_all_listed() {
        let err = TrainConfig::from_toml_str("seed = 1\nfoo = 2\nbar = \"x\"\n", &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bar") && msg.contains("foo"), "{msg}");
        assert!(TrainConfig::from_toml_str("", &["--nope=1".into()]).is_err());
    }

    #[test]
    fn overrides_take_precedence() {
        let c = TrainConfig::from_toml_str(
            "conditioner = \"fine\"\nseed = 3\n",
            &[
                "--conditioner=none".into(),
                "seed=9".into(),
                "target_scale=[0.1, 0.3]".into(),
                "cond_layers=[0, 2]".into(),
                "fusion=attention".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.conditioner, ConditionerKind::None);
        assert_eq!(c.fusion, Fusion::Attention);
        assert_eq!(c.seed, 9);
        assert_eq!(c.target_scale, (0.1, 0.3));
        assert_eq!(c.cond_layers, Some(vec![0, 2]));
    }

    #[test]
    fn invariants_are_enforced() {
        let bad = |o: &str| TrainConfig::from_toml_str("", &[o.to_string()]).is_err();
        assert!(bad("warmup_epochs=51"));
        assert!(bad("base_lr=0.0"));
        assert!(bad("conditioner=film"));
        assert!(bad("target_scale=[0.5, 0.2]"));
        assert!(bad("batch_size=4096"));
    }

    #[test]
    fn step_counts() {
        let c = TrainConfig {
            train_size: 100,
            batch_size: 32,
            epochs: 3,
            warmup_epochs: 1,
            ..TrainConfig::default()
        };
        assert_eq!((c.steps_per_epoch(), c.total_steps(), c.warmup_steps()), (3, 9, 3));
    }
}
