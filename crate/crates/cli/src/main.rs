//! `sat`: track, evaluate, synthesise and train from the command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "sat", version, about = "Segmentation-assisted video object tracking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML file overriding the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Caps worker threads (also capped by SAT_NUM_THREADS).
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Propagates the first-frame annotation through a sequence.
    Track {
        /// Frame directory, e.g. `JPEGImages/<seq>`.
        #[arg(long)]
        sequence: PathBuf,
        /// Annotation directory holding at least `00000.png`.
        #[arg(long)]
        annotations: PathBuf,
        /// Output root; masks go to `<out>/<seq>/`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write colour overlays.
        #[arg(long)]
        overlay: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Scores predicted label maps against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// JSON summary; per-sequence rows go next to it as CSV.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Renders a scene script to a DAVIS-layout directory.
    Synth {
        #[arg(long)]
        script: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Trains a network and writes a checkpoint plus loss curves.
    Train {
        /// DAVIS-layout root; synthetic sequences are generated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut config = RunConfig::load(self.config.as_deref())?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        Ok(config)
    }
}

fn thread_cap(jobs: Option<usize>) -> Result<Option<usize>> {
    let env = match std::env::var("SAT_NUM_THREADS") {
        Ok(v) => Some(v.trim().parse::<usize>().with_context(|| format!("SAT_NUM_THREADS={v} is not a count"))?),
        Err(_) => None,
    };
    Ok(match (jobs, env) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    }
    .map(|n| n.max(1)))
}

fn output_dir(flag: Option<PathBuf>, config: &RunConfig) -> Result<PathBuf> {
    flag.or_else(|| config.output_dir.clone())
        .context("no output directory: pass --out or set output_dir")
}

fn run(cli: Cli) -> Result<()> {
    let common = match &cli.command {
        Command::Track { common, .. }
        | Command::Eval { common, .. }
        | Command::Synth { common, .. }
        | Command::Train { common, .. } => common,
    };
    if let Some(n) = thread_cap(common.jobs)? {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let config = common.run_config()?;
    match cli.command {
        Command::Track {
            sequence,
            annotations,
            out,
            overlay,
            ..
        } => commands::track(&config, &sequence, &annotations, &output_dir(out, &config)?, overlay),
        Command::Eval { pred, gt, out, .. } => commands::eval(&pred, &gt, &out),
        Command::Synth { script, out, common } => commands::synth(&script, &out, common.seed),
        Command::Train { data, out, .. } => commands::train(&config, data.as_deref(), &output_dir(out, &config)?),
    }
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
