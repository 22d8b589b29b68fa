//! `triclip`: generate synthetic multimodal chips, pretrain the three-tower
//! contrastive model, and run the probing/visualization protocol.

mod config;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;
use stages::{run_all, run_stage, Paths};
use triclip_core::Error;

#[derive(Parser)]
#[command(name = "triclip", version, about)]
struct Cli {
    /// Run directory holding all pipeline artifacts.
    #[arg(long, global = true, default_value = "triclip-run")]
    out: PathBuf,

    /// Config JSON; falls back to <out>/config.json, then to defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (also settable via TRICLIP_THREADS). 0 = automatic.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic chips and the label table.
    Gen,
    /// Assign banded train/val/test splits.
    Split,
    /// Pretrain the three towers with the pairwise contrastive objective.
    Pretrain,
    /// Embed every chip with the best checkpoint.
    Embed,
    /// Random Forest few-shot ablation over modalities, tasks, and sizes.
    Ablate,
    /// t-SNE projection of test-split embeddings.
    Project,
    /// Label-colored scatter SVGs from the projection.
    Plot,
    /// Aggregate results into report.json / report.md.
    Report,
    /// Run every stage in order, resuming from cached artifacts.
    Run {
        /// Re-run all stages even when cached artifacts look current.
        #[arg(long)]
        force: bool,
    },
    /// Print the default config JSON to stdout.
    InitConfig,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_) => 2,
        Error::MissingData { .. } | Error::Io { .. } | Error::Format { .. } => 3,
        Error::Numeric(_) | Error::DegenerateDistribution(_) => 4,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = if let Some(path) = &cli.config {
        RunConfig::load(path)?
    } else {
        let fallback = cli.out.join("config.json");
        if fallback.exists() {
            RunConfig::load(&fallback)?
        } else {
            RunConfig::default()
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads(cli: &Cli) {
    let threads = if cli.threads > 0 {
        cli.threads
    } else {
        std::env::var("TRICLIP_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(0)
    };
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    init_threads(cli);
    if matches!(cli.command, Command::InitConfig) {
        let text =
            serde_json::to_string_pretty(&RunConfig::default()).expect("serializable default");
        println!("{text}");
        return Ok(());
    }
    let cfg = load_config(cli)?;
    let paths = Paths::new(&cli.out);
    match &cli.command {
        Command::Run { force } => run_all(&cfg, &paths, *force),
        other => {
            std::fs::create_dir_all(&paths.root).map_err(|e| Error::io(&paths.root, e))?;
            let stage = match other {
                Command::Gen => "gen",
                Command::Split => "split",
                Command::Pretrain => "pretrain",
                Command::Embed => "embed",
                Command::Ablate => "ablate",
                Command::Project => "project",
                Command::Plot => "plot",
                Command::Report => "report",
                Command::Run { .. } | Command::InitConfig => unreachable!(),
            };
            run_stage(&cfg, &paths, stage).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
