use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use neo_core::pipeline::{Pipeline, PipelineConfig, Stage};

#[derive(Parser)]
#[command(name = "neo", about = "FOV extrapolation experiments on a procedural indoor scene")]
struct Cli {
    /// Pipeline config (JSON). Without it the built-in preset is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the global seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Accept upstream artifacts produced under a different config.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Tiny,
}

#[derive(Subcommand)]
enum Command {
    /// Write the effective config to a file and exit.
    InitConfig { path: PathBuf },
    SceneGen,
    RenderTrain,
    FitField,
    SamplePoses,
    GenDataset,
    TrainOutpainter,
    TrainNaive,
    RunBaselines,
    Eval,
    Ablate {
        #[command(subcommand)]
        which: Ablation,
    },
    RunAll,
}

#[derive(Subcommand)]
enum Ablation {
    Density {
        /// Comma-separated grid intervals in meters; defaults to the config's list.
        #[arg(long, value_delimiter = ',')]
        intervals: Option<Vec<f64>>,
    },
    Fov,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => match cli.preset {
            Preset::Desk => PipelineConfig::desk(),
            Preset::Tiny => PipelineConfig::tiny(),
        },
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate().context("invalid config")?;
    Ok(cfg)
}

fn stage_of(c: &Command) -> Option<Stage> {
    Some(match c {
        Command::SceneGen => Stage::SceneGen,
        Command::RenderTrain => Stage::RenderTrain,
        Command::FitField => Stage::FitField,
        Command::SamplePoses => Stage::SamplePoses,
        Command::GenDataset => Stage::GenDataset,
        Command::TrainOutpainter => Stage::TrainOutpainter,
        Command::TrainNaive => Stage::TrainNaive,
        Command::RunBaselines => Stage::RunBaselines,
        Command::Eval => Stage::Eval,
        _ => return None,
    })
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring thread pool")?;
    }
    let cfg = load_config(&cli)?;
    if let Command::InitConfig { path } = &cli.command {
        return cfg.save(path).with_context(|| format!("writing {}", path.display()));
    }
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let pipe = Pipeline::new(cfg, &cli.out, cli.force)?;
    if let Some(stage) = stage_of(&cli.command) {
        let outcome = pipe.run_stage(stage).with_context(|| format!("stage {} failed", stage.name()))?;
        info!("{}: {:?}", stage.name(), outcome);
        return Ok(());
    }
    match &cli.command {
        Command::RunAll => {
            let report = pipe.run_all()?;
            println!("{}", report.to_markdown("FOV extrapolation on held-out test paths"));
        }
        Command::Ablate { which: Ablation::Density { intervals } } => {
            let intervals = intervals.clone().unwrap_or_else(|| pipe.config().ablation.intervals.clone());
            let report = pipe.ablate_density(&intervals).context("stage ablate-density failed")?;
            println!("{}", report.to_markdown("Sampling density ablation"));
        }
        Command::Ablate { which: Ablation::Fov } => {
            let report = pipe.ablate_fov().context("stage ablate-fov failed")?;
            println!("{}", report.to_markdown("Training FOV ablation"));
        }
        _ => unreachable!("stage commands handled above"),
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
