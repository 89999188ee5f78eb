use std::path::PathBuf;
use std::process::ExitCode;

use biometry_cli::commands::{cmd_estimate, cmd_synth, cmd_train, load_models, TrainMode};
use biometry_cli::config::PipelineConfig;
use biometry_cli::evaluate::cmd_evaluate;
use biometry_cli::{CliError, Result};
use clap::{Parser, Subcommand};

/// Fetal biometry and gestational age from ultrasound planes.
#[derive(Debug, Parser)]
#[command(name = "biometry", version)]
struct Cli {
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
    },
    /// Train a segmentation or femur model.
    Train {
        #[arg(long, value_enum)]
        mode: TrainMode,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        ckpt_in: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate biometrics and GA for every study of a dataset.
    Estimate {
        #[arg(long, alias = "study")]
        data: Option<PathBuf>,
        #[arg(long)]
        seg_ckpt: Option<PathBuf>,
        #[arg(long)]
        femur_ckpt: Option<PathBuf>,
        /// Use the stored masks and annotations instead of the networks.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Error tables of a report against a dataset's ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        /// Dataset directory holding the ground truth.
        #[arg(long)]
        truth: PathBuf,
        /// Second report for a paired Wilcoxon test.
        #[arg(long)]
        compare: Option<PathBuf>,
        /// Also score segmentation (needs --femur-ckpt too).
        #[arg(long)]
        seg_ckpt: Option<PathBuf>,
        #[arg(long)]
        femur_ckpt: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) if !p.exists() => return Err(CliError::Config(format!("{} does not exist", p.display()))),
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    for s in &cli.set {
        cfg.apply(s)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = config(&cli)?;
    let paths = |cfg: &mut PipelineConfig, data: &Option<PathBuf>, out: &Option<PathBuf>| {
        if data.is_some() {
            cfg.data.clone_from(data);
        }
        if out.is_some() {
            cfg.out.clone_from(out);
        }
    };
    match &cli.command {
        Command::Synth { out, n } => {
            cmd_synth(out, *n, cfg.seed)?;
        }
        Command::Train { mode, data, ckpt_in, out } => {
            paths(&mut cfg, data, out);
            cmd_train(&cfg, *mode, ckpt_in.as_deref())?;
        }
        Command::Estimate {
            data,
            seg_ckpt,
            femur_ckpt,
            oracle,
            out,
        } => {
            paths(&mut cfg, data, out);
            if seg_ckpt.is_some() {
                cfg.seg_ckpt.clone_from(seg_ckpt);
            }
            if femur_ckpt.is_some() {
                cfg.femur_ckpt.clone_from(femur_ckpt);
            }
            cmd_estimate(&cfg, *oracle)?;
        }
        Command::Evaluate {
            pred,
            truth,
            compare,
            seg_ckpt,
            femur_ckpt,
            out,
        } => {
            let models = match (seg_ckpt, femur_ckpt) {
                (None, None) => None,
                (Some(_), Some(_)) => {
                    cfg.seg_ckpt.clone_from(seg_ckpt);
                    cfg.femur_ckpt.clone_from(femur_ckpt);
                    cfg.validate()?;
                    Some(load_models(&cfg)?)
                }
                _ => return Err(CliError::Config("--seg-ckpt and --femur-ckpt go together".into())),
            };
            let eval = cmd_evaluate(pred, truth, out, compare.as_deref(), models.as_ref())?;
            print!("{}", eval.render());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ CliError::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
