use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tcjepa_core::eval::gradcheck::run_suite;
use tcjepa_core::eval::{self, ablate, AblationKind, ProbeConfig};
use tcjepa_core::predictor::{ConditionerKind, Fusion};
use tcjepa_core::train::{append_metrics, checkpoint_precision, Precision, StepRecord, TrainConfig, Trainer};
use tcjepa_core::{Error, Result, Scalar};

#[derive(Parser)]
#[command(name = "tcjepa", version, about = "Text-conditional JEPA pretraining at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; every key is optional and defaults apply.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `--key=value` overrides applied on top of the config file.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, extra: &[String]) -> Result<TrainConfig> {
        let mut ov = self.overrides.clone();
        ov.extend_from_slice(extra);
        let cfg = match &self.config {
            Some(p) => TrainConfig::from_file(p, &ov)?,
            None => TrainConfig::from_toml_str("", &ov)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct ProbeArgs {
    /// Seed of the probe dataset and label permutation.
    #[arg(long, default_value_t = 0)]
    probe_seed: u64,
    #[arg(long, default_value_t = 1024)]
    train_n: usize,
    #[arg(long, default_value_t = 512)]
    val_n: usize,
    #[arg(long, default_value_t = 300)]
    probe_epochs: usize,
    #[arg(long)]
    permute_labels: bool,
}

impl ProbeArgs {
    fn config(&self) -> ProbeConfig {
        ProbeConfig {
            train_n: self.train_n,
            val_n: self.val_n,
            epochs: self.probe_epochs,
            seed: self.probe_seed,
            permute_labels: self.permute_labels,
            ..ProbeConfig::default()
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Pretrain; writes metrics.csv, config.toml and checkpoints to --out.
    Train {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        conditioner: Option<ConditionerKind>,
        #[arg(long)]
        fusion: Option<Fusion>,
        /// Continue from a checkpoint (its stored config is used).
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
        /// Print the resolved config and exit.
        #[arg(long)]
        dry_run: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Linear probe of a checkpoint's target encoder (or of a fresh
    /// initialization with --random-init).
    Probe {
        #[arg(long, required_unless_present = "random_init")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        random_init: bool,
        #[command(flatten)]
        probe: ProbeArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Finite-difference check of every op and of the full loss.
    Gradcheck {
        /// Random draws per op.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Short training run plus probe for each grid point; one CSV row each.
    Ablate {
        #[arg(long)]
        kind: AblationKind,
        /// Comma-separated values; masking_scale points are
        /// `ctx_lo:ctx_hi/tgt_lo:tgt_hi`. Defaults to the standard grid.
        #[arg(long)]
        grid: Option<String>,
        /// Training budget per point, rounded up to whole epochs.
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        probe: ProbeArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Patch-word similarity maps and per-block prediction error as JSON.
    ExportMaps {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset image index.
        #[arg(long, default_value_t = 0)]
        index: u64,
        /// Mask seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-form parameter and FLOP counts as JSON.
    Stats {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => Ok(fs::write(p, text)?),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn train<T: Scalar>(mut t: Trainer<T>, out: &Path) -> Result<()> {
    let spe = t.cfg.steps_per_epoch();
    let every = t.cfg.checkpoint_every;
    let metrics = out.join("metrics.csv");
    let mut pending: Vec<StepRecord> = Vec::with_capacity(spe);
    eprintln!("training {} steps ({} per epoch) into {}", t.cfg.total_steps(), spe, out.display());
    t.run(|t, r| {
        pending.push(*r);
        if t.step % spe as u64 == 0 {
            let epoch = t.step / spe as u64;
            append_metrics(&metrics, &pending)?;
            let mean = pending.iter().map(|r| r.losses.l_predict).sum::<f64>() / pending.len() as f64;
            eprintln!("epoch {epoch}: l_predict {mean:.5}");
            pending.clear();
            if every > 0 && epoch % every as u64 == 0 {
                t.save(&out.join(format!("epoch_{epoch:04}.tcjp")))?;
            }
        }
        Ok(())
    })?;
    append_metrics(&metrics, &pending)?;
    t.save(&out.join("final.tcjp"))
}

fn probe<T: Scalar>(ckpt: Option<&Path>, cfg: &TrainConfig, pc: &ProbeConfig) -> Result<String> {
    let t = match ckpt {
        Some(p) => Trainer::<T>::load(p)?,
        None => Trainer::<T>::new(cfg)?,
    };
    let r = eval::linear_probe(&t.model.pair, &t.cfg.data(), pc)?;
    Ok(serde_json::to_string_pretty(&r)?)
}

fn maps<T: Scalar>(ckpt: &Path, index: u64, seed: u64) -> Result<String> {
    let t = Trainer::<T>::load(ckpt)?;
    let m = eval::export_maps(&t.model, &t.cfg, &t.data, index, seed)?;
    Ok(serde_json::to_string_pretty(&m)?)
}

macro_rules! by_precision {
    ($p:expr, $f:ident ( $($a:expr),* )) => {
        match $p {
            Precision::F32 => $f::<f32>($($a),*),
            Precision::F64 => $f::<f64>($($a),*),
        }
    };
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train {
            out,
            conditioner,
            fusion,
            resume,
            dry_run,
            cfg,
        } => {
            let mut extra = Vec::new();
            if let Some(c) = conditioner {
                extra.push(format!("conditioner={c}"));
            }
            if let Some(f) = fusion {
                extra.push(format!("fusion={f}"));
            }
            let config = match &resume {
                Some(p) => {
                    if !cfg.overrides.is_empty() || !extra.is_empty() {
                        return Err(Error::Usage("--resume uses the checkpoint's config; drop the overrides".into()));
                    }
                    by_precision!(checkpoint_precision(p)?, load_config(p))?
                }
                None => cfg.resolve(&extra)?,
            };
            if dry_run {
                print!("{}", config.to_toml());
                return Ok(());
            }
            let out = out.unwrap_or_else(|| PathBuf::from("runs").join(config.hash()));
            fs::create_dir_all(&out)?;
            fs::write(out.join("config.toml"), config.to_toml())?;
            match (config.precision, &resume) {
                (Precision::F32, None) => train(Trainer::<f32>::new(&config)?, &out),
                (Precision::F64, None) => train(Trainer::<f64>::new(&config)?, &out),
                (Precision::F32, Some(p)) => train(Trainer::<f32>::load(p)?, &out),
                (Precision::F64, Some(p)) => train(Trainer::<f64>::load(p)?, &out),
            }
        }
        Cmd::Probe {
            checkpoint,
            random_init,
            probe: pa,
            cfg,
        } => {
            let pc = pa.config();
            let (ckpt, precision, config) = if random_init {
                let c = cfg.resolve(&[])?;
                (None, c.precision, c)
            } else {
                let p = checkpoint.expect("clap enforces --checkpoint");
                (Some(p.clone()), checkpoint_precision(&p)?, TrainConfig::default())
            };
            let json = by_precision!(precision, probe(ckpt.as_deref(), &config, &pc))?;
            println!("{json}");
            Ok(())
        }
        Cmd::Gradcheck { seeds } => {
            let suite = run_suite(0..seeds.max(1))?;
            for r in &suite.reports {
                println!("{r}");
            }
            println!("max relative error {:.3e}", suite.max_rel_error());
            if suite.passed() {
                Ok(())
            } else {
                Err(Error::Data("gradient check failed".into()))
            }
        }
        Cmd::Ablate {
            kind,
            grid,
            steps,
            out,
            probe: pa,
            cfg,
        } => {
            let grid = match grid {
                Some(g) => ablate::parse_grid(kind, &g)?,
                None => ablate::default_grid(kind),
            };
            let mut base = cfg.resolve(&[])?;
            let spe = base.steps_per_epoch();
            base.epochs = steps.div_ceil(spe).max(1);
            base.warmup_epochs = base.warmup_epochs.min(base.epochs);
            let mut lines = vec![ablate::CSV_HEADER.to_string()];
            if out.is_none() {
                println!("{}", ablate::CSV_HEADER);
            }
            ablate::run_sweep(kind, &grid, &base, &pa.config(), |row| {
                eprintln!("{} {}: {}", row.label, row.status, row.probe_val_acc);
                lines.push(row.csv_row());
                if let Some(p) = &out {
                    fs::write(p, lines.join("\n") + "\n")?;
                } else {
                    println!("{}", row.csv_row());
                }
                Ok(())
            })?;
            Ok(())
        }
        Cmd::ExportMaps {
            checkpoint,
            index,
            seed,
            out,
        } => {
            let json = by_precision!(checkpoint_precision(&checkpoint)?, maps(&checkpoint, index, seed))?;
            write_or_print(out.as_deref(), &json)
        }
        Cmd::Stats { cfg } => {
            let c = cfg.resolve(&[])?;
            let s = eval::model_stats(&c.encoder(), &c.predictor(), &c.masking(), c.n_captions, c.seq_len);
            println!("{}", serde_json::to_string_pretty(&s)?);
            Ok(())
        }
    }
}

fn load_config<T: Scalar>(p: &Path) -> Result<TrainConfig> {
    Ok(Trainer::<T>::load(p)?.cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Usage(_)) { 2 } else { 1 })
        }
    }
}
