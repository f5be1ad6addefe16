mod config;
mod error;
mod manifest;
mod stages;

use clap::{Parser, Subcommand};
use config::PipelineConfig;
use error::{CliError, CliResult};
use stages::Stage;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "rarefy", version, about = "Refine satellite NDVI with a UAV-trained network and validate vigor classes")]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Restricts per-period stages to one period (I, II, ...); for extract,
    /// train, lr-find and hyper-search it selects the training period.
    #[arg(long, global = true)]
    period: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate the synthetic multi-period field.
    SynthGen,
    /// NDVI from UAV red and NIR bands.
    Ndvi,
    /// Canopy-only reference on the satellite grid.
    Downsample,
    /// Build, split and augment the training samples.
    Extract,
    /// Train the network and write a checkpoint.
    Train,
    /// Learning-rate range test.
    LrFind,
    /// Two-stage hyperparameter search.
    HyperSearch,
    /// Refine satellite maps with the trained checkpoint.
    Refine,
    /// K-means vigor classes of reference and refined maps.
    Cluster,
    /// Per-parcel ANOVA and agreement with the reference.
    Validate,
    /// Run summary and artifact manifest.
    Report,
    /// Every stage in order.
    Run,
    /// Print the default configuration.
    DefaultConfig,
}

const RUN_ORDER: [Command; 11] = [
    Command::SynthGen,
    Command::Ndvi,
    Command::Downsample,
    Command::Extract,
    Command::LrFind,
    Command::HyperSearch,
    Command::Train,
    Command::Refine,
    Command::Cluster,
    Command::Validate,
    Command::Report,
];

fn execute(stage: &Stage, command: Command) -> CliResult<()> {
    match command {
        Command::SynthGen => stage.synth_gen(),
        Command::Ndvi => stage.ndvi(),
        Command::Downsample => stage.downsample(),
        Command::Extract => stage.extract(),
        Command::Train => stage.train().map(|_| ()),
        Command::LrFind => stage.lr_find(),
        Command::HyperSearch => stage.hyper_search(),
        Command::Refine => stage.refine(),
        Command::Cluster => stage.cluster(),
        Command::Validate => stage.validate().map(|_| ()),
        Command::Report => stage.report(),
        Command::Run => RUN_ORDER.iter().try_for_each(|&c| execute(stage, c)),
        Command::DefaultConfig => Ok(()),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if cli.command == Command::DefaultConfig {
        print!("{}", PipelineConfig::default().to_toml()?);
        return Ok(());
    }
    let path = cli.config.ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut cfg = PipelineConfig::load(&path)?;
    cfg.apply(cli.seed, cli.out);
    let (periods, train_period) = match cli.period {
        Some(p) => {
            cfg.period_index(&p)?;
            (vec![p.clone()], p)
        }
        None => (cfg.periods.clone(), cfg.train_period.clone()),
    };
    let stage = Stage { cfg: &cfg, periods, train_period };
    execute(&stage, cli.command)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
