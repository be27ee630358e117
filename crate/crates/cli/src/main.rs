//! `sscf` command-line driver.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "sscf",
    about = "Spiking self-cross feature network: few-shot training, evaluation, energy profiling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set lambda=0.7` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Random seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic glyph dataset as a PGM directory tree.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        classes: usize,
        #[arg(long = "per-class", default_value_t = 20)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Train a model episodically; writes checkpoint, metrics, run record.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint: mean accuracy with a 95% confidence interval.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluation episode count (config `eval_episodes` when omitted).
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate synaptic-operation counts and energy on probe episodes.
    ProfileEnergy {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export per-item embeddings (CSV) or spike rasters (PGM + JSON).
    Export {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// What to export: `embeddings` or `spike-raster`.
        #[arg(long)]
        what: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Train/evaluate across a parameter grid (lambda, noise, timesteps).
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Swept parameter: `lambda`, `noise`, or `timesteps`.
        #[arg(long)]
        parameter: String,
        /// Comma-separated values, e.g. `0.2,0.4,0.6`.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Resolves base config + overrides. For checkpoint-consuming commands the
/// sibling `run.json` of the checkpoint supplies the base when `--config`
/// is absent.
fn resolve_config(
    args: &ConfigArgs,
    checkpoint: Option<&PathBuf>,
) -> Result<RunConfig, String> {
    let mut config = if let Some(path) = &args.config {
        RunConfig::load(path)?
    } else if let Some(ckpt) = checkpoint {
        let sibling = ckpt.parent().map(|d| d.join("run.json"));
        match sibling {
            Some(p) if p.exists() => {
                #[derive(serde::Deserialize)]
                struct Record {
                    config: RunConfig,
                }
                let text = std::fs::read_to_string(&p)
                    .map_err(|e| format!("cannot read {}: {e}", p.display()))?;
                let record: Record = serde_json::from_str(&text)
                    .map_err(|e| format!("bad run record {}: {e}", p.display()))?;
                record.config
            }
            _ => RunConfig::default(),
        }
    } else {
        RunConfig::default()
    };
    for entry in &args.set {
        let (key, value) = entry
            .split_once('=')
            .ok_or_else(|| format!("--set expects KEY=VALUE, got {entry:?}"))?;
        config.set(key.trim(), value.trim())?;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config
        .validate()
        .map_err(|problems| format!("invalid config:\n  {}", problems.join("\n  ")))?;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::MakeSynthetic {
            out,
            classes,
            per_class,
            resolution,
            seed,
        } => {
            if resolution < 16 {
                return Err(format!("resolution must be at least 16, got {resolution}"));
            }
            commands::cmd_make_synthetic(&out, classes, per_class, resolution, seed)
        }
        Command::Train { config, out } => {
            let config = resolve_config(&config, None)?;
            commands::cmd_train(&config, &out)
        }
        Command::Eval {
            config,
            checkpoint,
            episodes,
            out,
        } => {
            let cfg = resolve_config(&config, Some(&checkpoint))?;
            let episodes = episodes.unwrap_or(cfg.eval_episodes);
            commands::cmd_eval(&cfg, &checkpoint, episodes, out.as_deref())
        }
        Command::ProfileEnergy {
            config,
            checkpoint,
            episodes,
            out,
        } => {
            let cfg = resolve_config(&config, checkpoint.as_ref())?;
            commands::cmd_profile_energy(&cfg, checkpoint.as_deref(), episodes, out.as_deref())
        }
        Command::Export {
            config,
            checkpoint,
            what,
            out,
        } => {
            let cfg = resolve_config(&config, Some(&checkpoint))?;
            match what.as_str() {
                "embeddings" => commands::cmd_export_embeddings(&cfg, &checkpoint, &out),
                "spike-raster" => commands::cmd_export_raster(&cfg, &checkpoint, &out),
                other => Err(format!(
                    "unknown export kind {other:?} (expected embeddings or spike-raster)"
                )),
            }
        }
        Command::Sweep {
            config,
            parameter,
            values,
            seeds,
            out,
        } => {
            let cfg = resolve_config(&config, None)?;
            commands::cmd_sweep(&cfg, &parameter, &values, seeds.max(1), out.as_deref())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(message) = run(cli) {
        let payload = serde_json::json!({ "error": message });
        eprintln!("{payload}");
        std::process::exit(1);
    }
}
