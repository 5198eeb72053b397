//! Sweeps: one short training run plus a probe per grid point.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::probe::{linear_probe, ProbeConfig};
use crate::predictor::{ConditionerKind, Fusion};
use crate::scalar::Scalar;
use crate::train::{Precision, StepRecord, TrainConfig, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    MaskingScale,
    LossCoeff,
    NCaptions,
    Fusion,
    Conditioner,
}

impl AblationKind {
    pub const ALL: [AblationKind; 5] = [
        AblationKind::MaskingScale,
        AblationKind::LossCoeff,
        AblationKind::NCaptions,
        AblationKind::Fusion,
        AblationKind::Conditioner,
    ];
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationKind::MaskingScale => "masking_scale",
            AblationKind::LossCoeff => "loss_coeff",
            AblationKind::NCaptions => "n_captions",
            AblationKind::Fusion => "fusion",
            AblationKind::Conditioner => "conditioner",
        })
    }
}

impl FromStr for AblationKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        AblationKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| format!("unknown ablation '{s}' (expected masking_scale, loss_coeff, n_captions, fusion or conditioner)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GridValue {
    Scale { context: (f64, f64), target: (f64, f64) },
    /// Multiplier on both λ and β.
    Coeff(f64),
    Captions(usize),
    Fusion(Fusion),
    Conditioner(ConditionerKind),
}

impl GridValue {
    pub fn label(&self) -> String {
        match self {
            GridValue::Scale { context, target } => format!("ctx[{},{}] tgt[{},{}]", context.0, context.1, target.0, target.1),
            GridValue::Coeff(r) => format!("r={r}"),
            GridValue::Captions(n) => format!("N={n}"),
            GridValue::Fusion(f) => f.to_string(),
            GridValue::Conditioner(c) => c.to_string(),
        }
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match *self {
            GridValue::Scale { context, target } => {
                c.context_scale = context;
                c.target_scale = target;
            }
            GridValue::Coeff(r) => {
                c.lambda = base.lambda * r;
                c.beta = base.beta * r;
            }
            GridValue::Captions(n) => c.n_captions = n,
            GridValue::Fusion(f) => c.fusion = f,
            GridValue::Conditioner(k) => c.conditioner = k,
        }
        c
    }
}

pub fn default_grid(kind: AblationKind) -> Vec<GridValue> {
    match kind {
        AblationKind::MaskingScale => {
            let mut v = Vec::new();
            for context in [(0.75, 1.0), (0.85, 1.0), (0.95, 1.0)] {
                for target in [(0.1, 0.15), (0.15, 0.2), (0.2, 0.25)] {
                    v.push(GridValue::Scale { context, target });
                }
            }
            v
        }
        AblationKind::LossCoeff => [0.5, 1.0, 2.5].map(GridValue::Coeff).to_vec(),
        AblationKind::NCaptions => [1, 2, 4, 8].map(GridValue::Captions).to_vec(),
        AblationKind::Fusion => [Fusion::Max, Fusion::Avg, Fusion::Attention].map(GridValue::Fusion).to_vec(),
        AblationKind::Conditioner => ConditionerKind::ALL.map(GridValue::Conditioner).to_vec(),
    }
}

fn pair(s: &str) -> Result<(f64, f64)> {
    let (a, b) = s.split_once(':').ok_or_else(|| Error::Usage(format!("'{s}' is not lo:hi")))?;
    let num = |x: &str| x.trim().parse::<f64>().map_err(|e| Error::Usage(format!("'{x}': {e}")));
    Ok((num(a)?, num(b)?))
}

/// Comma-separated grid values. Masking-scale points are written
/// `ctx_lo:ctx_hi/tgt_lo:tgt_hi`.
pub fn parse_grid(kind: AblationKind, spec: &str) -> Result<Vec<GridValue>> {
    let items: Vec<&str> = spec.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(Error::Usage(format!("empty grid for ablation '{kind}'")));
    }
    items
        .into_iter()
        .map(|it| {
            let usage = |e: String| Error::Usage(e);
            Ok(match kind {
                AblationKind::MaskingScale => {
                    let (c, t) = it.split_once('/').ok_or_else(|| Error::Usage(format!("'{it}' is not context/target")))?;
                    GridValue::Scale {
                        context: pair(c)?,
                        target: pair(t)?,
                    }
                }
                AblationKind::LossCoeff => GridValue::Coeff(it.parse().map_err(|e| usage(format!("'{it}': {e}")))?),
                AblationKind::NCaptions => GridValue::Captions(it.parse().map_err(|e| usage(format!("'{it}': {e}")))?),
                AblationKind::Fusion => GridValue::Fusion(it.parse().map_err(usage)?),
                AblationKind::Conditioner => GridValue::Conditioner(it.parse().map_err(usage)?),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    NanAbort,
    Failed,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Ok => "ok",
            Status::NanAbort => "nan_abort",
            Status::Failed => "failed",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub kind: AblationKind,
    pub label: String,
    pub config_hash: String,
    pub status: Status,
    pub steps: u64,
    /// Means over the final epoch.
    pub l_predict: f64,
    pub l_sparse: f64,
    pub l_consistency: f64,
    pub total: f64,
    pub probe_val_acc: f64,
    pub probe_train_acc: f64,
    pub message: String,
}

pub const CSV_HEADER: &str =
    "kind,label,config_hash,status,steps,l_predict,l_sparse,l_consistency,total,probe_val_acc,probe_train_acc,message";

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

impl AblationRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.kind,
            quote(&self.label),
            self.config_hash,
            self.status,
            self.steps,
            self.l_predict,
            self.l_sparse,
            self.l_consistency,
            self.total,
            self.probe_val_acc,
            self.probe_train_acc,
            quote(&self.message)
        )
    }
}

fn final_epoch(records: &[StepRecord], spe: usize) -> [f64; 4] {
    let tail = &records[records.len().saturating_sub(spe.max(1))..];
    let n = tail.len().max(1) as f64;
    let mean = |f: fn(&StepRecord) -> f64| tail.iter().map(f).sum::<f64>() / n;
    [
        mean(|r| r.losses.l_predict),
        mean(|r| r.losses.l_sparse),
        mean(|r| r.losses.l_consistency),
        mean(|r| r.losses.total),
    ]
}

fn run_typed<T: Scalar>(cfg: &TrainConfig, probe: &ProbeConfig) -> Result<(Vec<StepRecord>, f64, f64)> {
    let mut t = Trainer::<T>::new(cfg)?;
    let records = t.run(|_, _| Ok(()))?;
    let p = linear_probe(&t.model.pair, &cfg.data(), probe)?;
    Ok((records, p.val_acc, p.train_acc))
}

/// Trains and probes one grid point. Failures become rows rather than
/// errors so a sweep always completes.
pub fn run_point(kind: AblationKind, value: GridValue, base: &TrainConfig, probe: &ProbeConfig) -> AblationRow {
    let cfg = value.apply(base);
    let mut row = AblationRow {
        kind,
        label: value.label(),
        config_hash: cfg.hash(),
        status: Status::Ok,
        steps: 0,
        l_predict: f64::NAN,
        l_sparse: f64::NAN,
        l_consistency: f64::NAN,
        total: f64::NAN,
        probe_val_acc: f64::NAN,
        probe_train_acc: f64::NAN,
        message: String::new(),
    };
    let out = match cfg.precision {
        Precision::F32 => run_typed::<f32>(&cfg, probe),
        Precision::F64 => run_typed::<f64>(&cfg, probe),
    };
    match out {
        Ok((records, val, train)) => {
            [row.l_predict, row.l_sparse, row.l_consistency, row.total] = final_epoch(&records, cfg.steps_per_epoch());
            row.steps = records.len() as u64;
            row.probe_val_acc = val;
            row.probe_train_acc = train;
        }
        Err(e @ Error::NonFinite { step, .. }) => {
            row.status = Status::NanAbort;
            row.steps = step;
            row.message = e.to_string();
        }
        Err(e) => {
            row.status = Status::Failed;
            row.message = e.to_string();
        }
    }
    row
}

/// Runs every grid point in order, handing each row to `on_row` as it
/// completes.
pub fn run_sweep(
    kind: AblationKind,
    grid: &[GridValue],
    base: &TrainConfig,
    probe: &ProbeConfig,
    mut on_row: impl FnMut(&AblationRow) -> Result<()>,
) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(Error::Usage(format!("empty grid for ablation '{kind}'")));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &v in grid {
        let row = run_point(kind, v, base, probe);
        on_row(&row)?;
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_match_the_documented_values() {
        assert_eq!(default_grid(AblationKind::MaskingScale).len(), 9);
        assert_eq!(default_grid(AblationKind::LossCoeff), vec![GridValue::Coeff(0.5), GridValue::Coeff(1.0), GridValue::Coeff(2.5)]);
        assert_eq!(
            default_grid(AblationKind::NCaptions),
            [1, 2, 4, 8].map(GridValue::Captions).to_vec()
        );
        assert_eq!(default_grid(AblationKind::Fusion).len(), 3);
        assert_eq!(default_grid(AblationKind::Conditioner).len(), 6);
    }

    #[test]
    fn parsing() {
        assert_eq!(
            parse_grid(AblationKind::MaskingScale, "0.85:1/0.15:0.2").unwrap(),
            vec![GridValue::Scale {
                context: (0.85, 1.0),
                target: (0.15, 0.2)
            }]
        );
        assert_eq!(parse_grid(AblationKind::Fusion, "avg, max").unwrap(), vec![GridValue::Fusion(Fusion::Avg), GridValue::Fusion(Fusion::Max)]);
        assert!(matches!(parse_grid(AblationKind::LossCoeff, " , "), Err(Error::Usage(_))));
        assert!(matches!(parse_grid(AblationKind::NCaptions, "two"), Err(Error::Usage(_))));
        assert!(matches!(parse_grid(AblationKind::Conditioner, "film"), Err(Error::Usage(_))));
        for k in AblationKind::ALL {
            assert_eq!(k.to_string().parse::<AblationKind>().unwrap(), k);
        }
    }

    #[test]
    fn coefficient_multiplies_both_weights() {
        let base = TrainConfig::default();
        let c = GridValue::Coeff(2.5).apply(&base);
        assert_eq!((c.lambda, c.beta), (base.lambda * 2.5, base.beta * 2.5));
    }

    #[test]
    fn empty_sweep_is_a_usage_error() {
        let r = run_sweep(AblationKind::Fusion, &[], &TrainConfig::default(), &ProbeConfig::default(), |_| Ok(()));
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn infeasible_point_is_a_failed_row() {
        let base = TrainConfig {
            image_size: 8,
            cells: 2,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            pred_dim: 8,
            pred_depth: 1,
            pred_heads: 2,
            cond_heads: 2,
            text_dim: 8,
            batch_size: 2,
            train_size: 4,
            epochs: 1,
            warmup_epochs: 0,
            ..TrainConfig::default()
        };
        let v = GridValue::Scale {
            context: (0.95, 1.0),
            target: (0.9, 1.0),
        };
        let row = run_point(AblationKind::MaskingScale, v, &base, &ProbeConfig::default());
        assert_eq!(row.status, Status::Failed, "{row:?}");
        assert!(row.message.contains("mask sampling failed"), "{row:?}");
        assert!(row.csv_row().starts_with("masking_scale,\"ctx[0.95,1] tgt[0.9,1]\","));
    }
}
