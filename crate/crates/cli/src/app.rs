//! Argument parsing and dispatch for the `fireseg` binary.

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::commands::{self, PredictRequest};
use crate::config::PipelineConfig;
use crate::exec::Exec;

#[derive(Debug, Parser)]
#[command(name = "fireseg", version, about = "Next-day fire segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Args)]
struct Shared {
    /// key=value configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<String>,
    /// Worker threads; 1 keeps every output bitwise reproducible.
    #[arg(long)]
    threads: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DataArg {
    /// Input dataset (prepare) or prepared directory (train, evaluate, predict).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainFlags {
    /// No-fire tiles per fire tile; comma-separated for a grid.
    #[arg(long)]
    tr: Option<String>,
    /// off, train or train+val; comma-separated for a grid.
    #[arg(long)]
    fire_buffer: Option<String>,
    #[arg(long)]
    buffer_radius: Option<String>,
    /// Width of the first encoder block; comma-separated for a grid.
    #[arg(long)]
    init_features: Option<String>,
    /// sh1 or sh2; comma-separated for a grid.
    #[arg(long)]
    es_metric: Option<String>,
    #[arg(long)]
    folds: Option<String>,
    #[arg(long)]
    patience: Option<String>,
    #[arg(long)]
    max_epochs: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Synthesise a dataset with a planted fire rule.
    Generate {
        #[command(flatten)]
        shared: Shared,
    },
    /// Scale, encode and tile a dataset; sample the train-validation tiles.
    Prepare {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        tr: Option<String>,
    },
    /// Cross-validate every configuration and keep the best model.
    Train {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Holdout sensitivity and specificity of a checkpoint.
    Evaluate {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Predicted masks for days or tiles, optionally rendered.
    Predict {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Day ids, comma-separated.
        #[arg(long, value_delimiter = ',')]
        days: Vec<String>,
        /// Tiles as day:row_off:col_off, comma-separated.
        #[arg(long, value_delimiter = ',')]
        tiles: Vec<String>,
        /// Also write truth|prediction PPM panels.
        #[arg(long)]
        render: bool,
        /// Pixels per label cell in rendered panels.
        #[arg(long, default_value_t = 1)]
        scale: usize,
    },
}

fn load_config(shared: &Shared) -> Result<PipelineConfig> {
    let mut cfg = match &shared.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            PipelineConfig::parse(&text).with_context(|| format!("{}", p.display()))?
        }
        None => PipelineConfig::default(),
    };
    override_with(&mut cfg, &[("seed", &shared.seed), ("threads", &shared.threads)])?;
    if let Some(o) = &shared.out {
        cfg.out = Some(o.clone());
    }
    Ok(cfg)
}

fn override_with(cfg: &mut PipelineConfig, flags: &[(&str, &Option<String>)]) -> Result<()> {
    for (key, v) in flags {
        if let Some(v) = v {
            cfg.set(key, v)
                .map_err(|e| anyhow!("--{}: {e}", key.replace('_', "-")))?;
        }
    }
    Ok(())
}

fn required(p: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    p.clone()
        .ok_or_else(|| anyhow!("missing --{what} (or `{what}` in the config file)"))
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
            print!("{e}");
            std::process::exit(0)
        }
        _ => anyhow!("usage: {}", e.to_string().lines().next().unwrap_or("invalid arguments")),
    })?;
    match cli.cmd {
        Cmd::Generate { shared } => {
            let cfg = load_config(&shared)?;
            let out = required(&cfg.out, "out")?;
            let s = commands::generate(&cfg, &out)?;
            println!(
                "generated {} days ({} holdout), fire rate {:.6}",
                s.days, s.holdout_days, s.achieved_fire_rate
            );
        }
        Cmd::Prepare { shared, data, tr } => {
            let mut cfg = load_config(&shared)?;
            override_with(&mut cfg, &[("tr", &tr)])?;
            if let Some(d) = data.data {
                cfg.data = Some(d);
            }
            let s = commands::prepare(&cfg, &required(&cfg.data, "data")?, &required(&cfg.out, "out")?)?;
            println!(
                "prepared: {} fire + {} no-fire train-validation tiles sampled, {} unknown categories",
                s.sampled_tiles.fire, s.sampled_tiles.no_fire, s.unknown_categories
            );
        }
        Cmd::Train { shared, data, flags } => {
            let mut cfg = load_config(&shared)?;
            let f = &flags;
            override_with(
                &mut cfg,
                &[
                    ("tr", &f.tr),
                    ("fire_buffer", &f.fire_buffer),
                    ("buffer_radius", &f.buffer_radius),
                    ("init_features", &f.init_features),
                    ("es_metric", &f.es_metric),
                    ("folds", &f.folds),
                    ("patience", &f.patience),
                    ("max_epochs", &f.max_epochs),
                    ("lr", &f.lr),
                    ("batch_size", &f.batch_size),
                ],
            )?;
            if let Some(d) = data.data {
                cfg.data = Some(d);
            }
            let exec = Exec::new(cfg.threads)?;
            let s = commands::train(&cfg, &required(&cfg.data, "data")?, &required(&cfg.out, "out")?, &exec)?;
            println!(
                "selected {} fold {} epoch {} ({} {:.4})",
                s.selection.config, s.selection.fold, s.selection.epoch, s.selection.es_metric, s.selection.fold_score
            );
        }
        Cmd::Evaluate {
            shared,
            data,
            checkpoint,
        } => {
            let mut cfg = load_config(&shared)?;
            if let Some(d) = data.data {
                cfg.data = Some(d);
            }
            if let Some(c) = checkpoint {
                cfg.checkpoint = Some(c);
            }
            let exec = Exec::new(cfg.threads)?;
            let rows = commands::evaluate(
                &cfg,
                &required(&cfg.checkpoint, "checkpoint")?,
                &required(&cfg.data, "data")?,
                &required(&cfg.out, "out")?,
                &exec,
            )?;
            for (p, c) in rows {
                println!(
                    "{p}: sens {} spec {}",
                    crate::records::fmt4(c.sensitivity()),
                    crate::records::fmt4(c.specificity())
                );
            }
        }
        Cmd::Predict {
            shared,
            data,
            checkpoint,
            days,
            tiles,
            render,
            scale,
        } => {
            let mut cfg = load_config(&shared)?;
            if let Some(d) = data.data {
                cfg.data = Some(d);
            }
            if let Some(c) = checkpoint {
                cfg.checkpoint = Some(c);
            }
            let exec = Exec::new(cfg.threads)?;
            let req = PredictRequest {
                days,
                tiles,
                render,
                scale,
            };
            let written = commands::predict(
                &cfg,
                &required(&cfg.checkpoint, "checkpoint")?,
                &required(&cfg.data, "data")?,
                &req,
                &required(&cfg.out, "out")?,
                &exec,
            )?;
            println!("wrote {} files", written.len());
        }
    }
    Ok(())
}
