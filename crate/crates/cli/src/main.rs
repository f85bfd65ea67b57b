mod commands;
mod config;
mod manifest;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use amil_core::{ErrorClass, Variant};
use clap::{Args, Parser, Subcommand};

use crate::config::{Explicit, UsageError};
use crate::manifest::{Job, RunManifest};

/// Anomaly-aware multiple instance learning experiments.
///
/// Every command writes a manifest.json into its output directory that
/// records the resolved configuration; `amil replay` re-runs it.
#[derive(Parser, Debug)]
#[command(name = "amil", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// TOML configuration file with [generator], [model], [train] and
    /// [experiment] tables.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Set the generator, model and training seeds at once.
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for `--set train.epochs=N`.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a synthetic bag dataset.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train one ablation variant.
    Train {
        #[arg(short, long)]
        data: PathBuf,
        #[arg(long, default_value = "anomaly-att-sic")]
        variant: Variant,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Cross-validate every variant and tabulate mean and std per metric.
    Ablation {
        #[arg(short, long)]
        data: PathBuf,
        /// Shorthand for `--set train.repeats=N`.
        #[arg(long)]
        repeats: Option<usize>,
        /// Shorthand for `--set train.folds=N`.
        #[arg(long)]
        folds: Option<usize>,
        /// Restrict to these variants (comma separated).
        #[arg(long, value_delimiter = ',')]
        variants: Vec<Variant>,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Export per-instance attention, anomaly and pooling scores.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(short, long)]
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train without one class, then score its instances against controls.
    Holdout {
        #[arg(short, long)]
        data: PathBuf,
        #[arg(long)]
        class: usize,
        #[arg(long, default_value = "anomaly-att-sic")]
        variant: Variant,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Re-run the command recorded in a manifest.
    Replay {
        manifest: PathBuf,
        /// Output directory; defaults to the one recorded in the manifest.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn resolve(args: &ConfigArgs, extra: &[String]) -> anyhow::Result<(config::RunConfig, Explicit)> {
    let mut table = config::read_table(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config::set_seed(&mut table, seed)?;
    }
    if let Some(e) = args.epochs {
        config::apply_override(&mut table, &format!("train.epochs={e}"))?;
    }
    for o in extra.iter().chain(&args.overrides) {
        config::apply_override(&mut table, o)?;
    }
    config::resolve(table)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let (job, args, extra, out) = match cli.command {
        Command::Generate { config, out } => (Job::Generate, config, vec![], out),
        Command::Train { data, variant, config, out } => (Job::Train { data, variant }, config, vec![], out),
        Command::Ablation { data, repeats, folds, variants, config, out } => {
            let mut extra = Vec::new();
            if let Some(r) = repeats {
                extra.push(format!("train.repeats={r}"));
            }
            if let Some(f) = folds {
                extra.push(format!("train.folds={f}"));
            }
            let variants = if variants.is_empty() { Variant::ALL.to_vec() } else { variants };
            (Job::Ablation { data, variants }, config, extra, out)
        }
        Command::Score { checkpoint, data, config, out } => (Job::Score { checkpoint, data }, config, vec![], out),
        Command::Holdout { data, class, variant, config, out } => {
            (Job::Holdout { data, class, variant }, config, vec![], out)
        }
        Command::Replay { manifest, out } => {
            let m = RunManifest::read(&manifest)?;
            let out = out.unwrap_or(m.output_dir.clone());
            let explicit = Explicit {
                input_dim: true,
                n_classes: true,
            };
            commands::execute(&m.job, m.config, explicit, &out)?;
            return Ok(());
        }
    };
    let (cfg, explicit) = resolve(&args, &extra)?;
    let manifest = commands::execute(&job, cfg, explicit, &out)?;
    log::info!("wrote {} files to {}", manifest.outputs.len(), out.display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<amil_core::Error>() {
            return match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numeric => 3,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<csv::Error>().is_some() {
            return 2;
        }
    }
    2
}

fn init_workers() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("AMIL_WORKERS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| config::usage(format!("AMIL_WORKERS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| config::usage(format!("worker pool: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match init_workers().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
