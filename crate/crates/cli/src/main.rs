use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mwt_core::harness::{self, RunConfig};

/// Meta-learned SIREN fitting with weight-space classification.
#[derive(Parser)]
#[command(name = "mwt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train θ, α and (optionally) the classifier.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=value`, applied after the config file. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Fit and classify held-out images with a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        k_test: usize,
        #[arg(long, default_value_t = 1.0)]
        s_eval: f64,
        /// Evaluate at most this many images (0: all).
        #[arg(long, default_value_t = 0)]
        limit: usize,
    },
    /// Write the reconstruction after every inner step.
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        /// Glob pattern, e.g. 'imgs/*.png'.
        #[arg(long)]
        images: String,
        #[arg(long)]
        k_test: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// One training run per value of an ablation axis.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

fn load_config(path: Option<&PathBuf>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::parse(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    for kv in overrides {
        cfg.apply_override(kv)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("MWT_THREADS") {
        let n: usize = v.parse().with_context(|| format!("MWT_THREADS={v:?} is not a number"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    init_threads()?;
    match Cli::parse().command {
        Command::Train { config, set } => {
            let cfg = load_config(config.as_ref(), &set)?;
            let out = harness::train(&cfg)?;
            if let Some(r) = out.final_val() {
                println!(
                    "final val: accuracy {} psnr {:.2} dB",
                    r.accuracy.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into()),
                    r.psnr_db
                );
            }
            println!("metrics: {}", out.metrics_path.display());
            println!("checkpoints: {} {}", out.final_checkpoint.display(), out.best_checkpoint.display());
        }
        Command::Eval { ckpt, data, k_test, s_eval, limit } => {
            let r = harness::cmd_eval(&ckpt, &data, k_test, s_eval, limit)?;
            println!("accuracy,psnr_db,psnr_is_subsampled");
            println!(
                "{},{},{}",
                r.accuracy.map(|a| a.to_string()).unwrap_or_default(),
                harness::metrics::format_psnr(r.psnr_db),
                r.psnr_is_subsampled
            );
        }
        Command::Reconstruct { ckpt, images, k_test, out } => {
            let mut paths =
                glob::glob(&images).with_context(|| format!("bad glob {images:?}"))?.collect::<std::result::Result<Vec<_>, _>>()?;
            paths.sort();
            if paths.is_empty() {
                bail!("no images match {images:?}");
            }
            let rows = harness::cmd_reconstruct(&ckpt, &paths, k_test, &out)?;
            println!("wrote {} reconstructions and psnr.csv to {}", rows.len(), out.display());
        }
        Command::Ablate { config, axis, values, set } => {
            let cfg = load_config(config.as_ref(), &set)?;
            let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
            let rows = harness::ablate(&cfg, &axis, &values)?;
            println!("value,accuracy,psnr_db");
            for r in rows {
                println!(
                    "{},{},{}",
                    r.value,
                    r.accuracy.map(|a| a.to_string()).unwrap_or_default(),
                    harness::metrics::format_psnr(r.psnr_db)
                );
            }
        }
    }
    Ok(())
}
