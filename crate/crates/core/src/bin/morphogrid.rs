use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use morphogrid::pipeline::{
    cmd_run, cmd_train, exit_code, stage_analyze, stage_classify, stage_fit, stage_grid, stage_indices, stage_ingest, stage_render,
    stage_vitality, AnalyzeOptions, Backend, ClassifyOptions, GroupBy, PipelineConfig,
};
use morphogrid::{Error, Result};

#[derive(Parser)]
#[command(name = "morphogrid", version, about = "Urban morphology and vitality pipeline")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for per-cell work.
    #[arg(short, long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Overrides the configured output directory.
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Cnn,
    Heuristic,
    External,
}

#[derive(Clone, Copy, ValueEnum)]
enum GroupArg {
    None,
    Cluster,
}

#[derive(Subcommand)]
enum Command {
    /// Every stage in order, then the manifest.
    Run,
    /// Trains the CNN on synthetic road networks.
    Train,
    Ingest,
    Grid,
    Render {
        /// Only this cell, as `col,row`.
        #[arg(long)]
        cell: Option<String>,
    },
    Classify {
        #[arg(long, value_enum)]
        backend: Option<BackendArg>,
        /// Probability CSV for the external backend.
        #[arg(long)]
        probs: Option<PathBuf>,
        /// CNN checkpoint.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    Indices {
        /// Lowest road tier counted for intersection density.
        #[arg(long)]
        min_tier: Option<String>,
    },
    Vitality,
    Fit,
    Analyze {
        /// Stage directories to pool (repeatable).
        #[arg(long)]
        input: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "none")]
        group_by: GroupArg,
    },
}

fn parse_cell(s: &str) -> Result<(i64, i64)> {
    let bad = || Error::argument(format!("cell must be `col,row`, got `{s}`"));
    let (c, r) = s.split_once(',').ok_or_else(bad)?;
    Ok((c.trim().parse().map_err(|_| bad())?, r.trim().parse().map_err(|_| bad())?))
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::parse("", &std::env::current_dir().map_err(|e| Error::io(".", e))?)?,
    };
    cfg.jobs = cli.jobs;
    if let Some(out) = cli.out {
        cfg.output = std::path::absolute(&out).map_err(|e| Error::io(&out, e))?;
    }
    match cli.command {
        Command::Run => {
            let m = cmd_run(&cfg)?;
            println!("{} artifacts in {}", m.artifacts.len(), cfg.out_dir().display());
        }
        Command::Train => {
            let s = cmd_train(&cfg)?;
            print!("{}", s.report.to_text());
            println!("best epoch {}", s.best_epoch);
            println!("{}  {}", s.sha256, s.checkpoint.display());
        }
        Command::Ingest => println!("{}", stage_ingest(&cfg)?.display()),
        Command::Grid => println!("{}", stage_grid(&cfg)?.display()),
        Command::Render { cell } => {
            let only = cell.as_deref().map(parse_cell).transpose()?;
            for p in stage_render(&cfg, only)? {
                println!("{}", p.display());
            }
        }
        Command::Classify { backend, probs, model } => {
            let backend = backend.map(|b| match b {
                BackendArg::Cnn => Backend::Cnn,
                BackendArg::Heuristic => Backend::Heuristic,
                BackendArg::External => Backend::External,
            });
            let (p, c) = stage_classify(&cfg, &ClassifyOptions { backend, probs, model })?;
            println!("{}\n{}", p.display(), c.display());
        }
        Command::Indices { min_tier } => {
            if let Some(t) = min_tier {
                cfg.min_tier = t.parse()?;
            }
            println!("{}", stage_indices(&cfg)?.display());
        }
        Command::Vitality => println!("{}", stage_vitality(&cfg)?.display()),
        Command::Fit => println!("{}", stage_fit(&cfg)?.display()),
        Command::Analyze { input, group_by } => {
            let group_by = match group_by {
                GroupArg::None => GroupBy::None,
                GroupArg::Cluster => GroupBy::Cluster,
            };
            println!("{}", stage_analyze(&cfg, &AnalyzeOptions { inputs: input, group_by })?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("morphogrid: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
