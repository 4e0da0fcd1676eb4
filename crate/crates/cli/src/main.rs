use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hno_core::pipeline::{self, PipelineConfig};
use hno_core::{Error, Result};

/// Env var for the worker-pool size.
const WORKERS_ENV: &str = "HNO_WORKERS";

#[derive(Parser)]
#[command(
    name = "hno",
    version,
    about = "Hybrid neural operator pipeline for two-player differential games"
)]
struct Cli {
    /// Override a config entry, e.g. `--override train.learning_rate=1e-4`.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a config file and print it fully resolved.
    ValidateConfig { config: PathBuf },
    /// Solve ground-truth trajectories (and sample the PDE-point pool).
    Datagen { config: PathBuf },
    /// Train on a dataset; resumes from the latest checkpoint.
    Train {
        config: PathBuf,
        /// Defaults to `<output_dir>/dataset`.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Closed-loop collision rates over the type grid.
    Eval {
        config: PathBuf,
        /// `[NAME=]PATH` of a checkpoint; repeat for several models.
        #[arg(long = "model", required = true)]
        models: Vec<String>,
    },
    /// NTK condition numbers, one checkpoint per activation.
    Ntk {
        config: PathBuf,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        /// Defaults to `<output_dir>/dataset`.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Render heatmaps from a report file.
    Plot {
        report: PathBuf,
        /// Defaults to the report's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_model(s: &str) -> (String, PathBuf) {
    match s.split_once('=') {
        Some((n, p)) if !n.is_empty() => (n.to_string(), PathBuf::from(p)),
        _ => {
            let p = PathBuf::from(s);
            (pipeline::model_name(&p), p)
        }
    }
}

fn configure_workers() -> Result<()> {
    let Ok(v) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("{WORKERS_ENV} must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

fn load(path: &Path, overrides: &[String]) -> Result<PipelineConfig> {
    PipelineConfig::load(path, overrides)
}

fn run(cli: Cli) -> Result<()> {
    configure_workers()?;
    let ov = &cli.overrides;
    match cli.command {
        Command::ValidateConfig { config } => {
            let cfg = load(&config, ov)?;
            println!("{}", serde_json::to_string_pretty(&cfg)?);
            println!("config hash {}", cfg.hash());
        }
        Command::Datagen { config } => {
            let cfg = load(&config, ov)?;
            println!("{}", pipeline::cmd_datagen(&cfg)?.display());
        }
        Command::Train { config, dataset } => {
            let cfg = load(&config, ov)?;
            let data = dataset.unwrap_or_else(|| cfg.output_dir.join("dataset"));
            println!("{}", pipeline::cmd_train(&cfg, &data)?.display());
        }
        Command::Eval { config, models } => {
            let cfg = load(&config, ov)?;
            let models: Vec<_> = models.iter().map(|m| parse_model(m)).collect();
            println!("{}", pipeline::cmd_eval(&cfg, &models)?.display());
        }
        Command::Ntk {
            config,
            checkpoints,
            dataset,
        } => {
            let cfg = load(&config, ov)?;
            let data = dataset.unwrap_or_else(|| cfg.output_dir.join("dataset"));
            println!("{}", pipeline::cmd_ntk(&cfg, &checkpoints, &data)?.display());
        }
        Command::Plot { report, out } => {
            let out = out.unwrap_or_else(|| report.parent().map(Path::to_path_buf).unwrap_or_default());
            for p in pipeline::cmd_plot(&report, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
