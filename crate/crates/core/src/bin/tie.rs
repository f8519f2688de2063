use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use tie_core::experiment::{self, load_run_config, ExperimentConfig};
use tie_core::oodscores::ScoreSettings;
use tie_core::tieloop::RunMode;

#[derive(Parser)]
#[command(name = "tie", version, about = "Train, evaluate and inspect garbage-class OOD detectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Tie,
    NoTieBaseline,
}

impl From<ModeArg> for RunMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Tie => RunMode::Tie,
            ModeArg::NoTieBaseline => RunMode::NoTieBaseline,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the training loop and write checkpoints, dumps and metric CSVs.
    Train {
        /// TOML config, or a run's manifest.json to replay it.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Evaluate a checkpoint on the test and OOD sets of a config.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write generator samples for every class as PGM grids (or CSV for vector data).
    InvertDump {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Image geometry is taken from this config's dataset.
        #[arg(long, conflicts_with = "shape")]
        config: Option<PathBuf>,
        /// Explicit geometry as HxW, e.g. 14x14.
        #[arg(long)]
        shape: Option<String>,
    },
    /// Score precomputed logits (and features) from a CSV.
    Score {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// CSV of `label` + `feat_*` columns used to fit the Mahalanobis model.
        #[arg(long)]
        fit: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        energy_temperature: f64,
    },
}

fn parse_shape(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s.split_once(['x', 'X']).context("shape must look like HxW")?;
    Ok((h.trim().parse()?, w.trim().parse()?))
}

fn config_geometry(path: &Path) -> Result<Option<(usize, usize)>> {
    let cfg = load_run_config(path)?;
    Ok(cfg.load_data()?.geometry())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out, seed, mode } => {
            let mut cfg: ExperimentConfig =
                load_run_config(&config).with_context(|| format!("loading {}", config.display()))?;
            if let Some(s) = seed {
                cfg.tie.seed = s;
            }
            if let Some(m) = mode {
                cfg.tie.mode = m.into();
            }
            let out = match out.or_else(|| cfg.output_dir.clone()) {
                Some(o) => o,
                None => bail!("no output directory: pass --out or set output_dir in the config"),
            };
            let art = experiment::train(&cfg, &out)?;
            for row in &art.evaluation.accuracy {
                println!(
                    "{:<8} {:<16} n={:<6} accuracy={:.4} argmax_accuracy={:.4} level1={:.4} level2={:.4}",
                    if row.is_ood { "ood" } else { "id" },
                    row.test,
                    row.count,
                    row.accuracy,
                    row.argmax_accuracy,
                    row.level1_rate,
                    row.level2_rate
                );
            }
            println!("artifacts in {}", art.dir.display());
        }
        Command::Eval { config, checkpoint, out } => {
            let cfg = load_run_config(&config)?;
            let ev = experiment::eval_checkpoint(&cfg, &checkpoint, &out)?;
            for d in &ev.detection {
                match d.summary {
                    Some(s) => println!(
                        "{:<16} {:<12} auroc={:.4} aupr={:.4} fpr95={:.4}",
                        d.ood_set,
                        d.score.name(),
                        s.auroc,
                        s.aupr,
                        s.fpr_at_95_tpr
                    ),
                    None => println!("{:<16} {:<12} N/A (empty population)", d.ood_set, d.score.name()),
                }
            }
        }
        Command::InvertDump {
            checkpoint,
            out,
            per_class,
            seed,
            config,
            shape,
        } => {
            let geometry = match (config, shape) {
                (Some(c), _) => config_geometry(&c)?,
                (None, Some(s)) => Some(parse_shape(&s)?),
                (None, None) => None,
            };
            let files = experiment::invert_dump(&checkpoint, per_class, seed, geometry, &out)?;
            println!("wrote {} file(s) to {}", files.len(), out.display());
        }
        Command::Score {
            input,
            out,
            fit,
            energy_temperature,
        } => {
            let settings = ScoreSettings {
                energy_temperature,
                ..ScoreSettings::default()
            };
            let rows = experiment::score_logits(&input, fit.as_deref(), &settings)?;
            experiment::write_logit_scores(&out, &rows)?;
            println!("scored {} rows into {}", rows.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
