mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use evdet::protocol::Approach;
use evdet::simgen::Split;
use serde_json::json;

use config::{parse_recall_levels, Overrides, RecallLevels, RunConfig};
use manifest::{write_json, RunClock};

#[derive(Parser)]
#[command(name = "evdet", version, about = "Event detection in 1D signals: simulate, train, predict, evaluate, sweep")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML file with [sim], [train], [decode], [postproc], [predict], [evaluate] and [sweep] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides both the simulation and the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    iou_threshold: Option<f64>,
    /// Comma-separated recall levels, e.g. 0.1,0.5,0.9.
    #[arg(long, global = true, value_parser = parse_recall_levels)]
    recall_levels: Option<RecallLevels>,
    #[arg(long, global = true, value_enum)]
    scheme: Option<SchemeArg>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a simulated dataset.
    Simulate {
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        /// Directory of recordings to use as background instead of synthetic ECG.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the event model (default) or, with an epoch scheme, the epoch baseline.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Decode events for every record in a directory.
    Predict {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint written by `train`.
        #[arg(long)]
        model: PathBuf,
    },
    /// Score prediction annotations against truth annotations.
    Evaluate {
        /// Truth annotation file or record directory.
        #[arg(long)]
        data: PathBuf,
        /// Prediction annotation file or directory.
        #[arg(long)]
        pred: PathBuf,
    },
    /// Generate data, train both approaches and report best F1 per IoU threshold.
    Sweep,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Event,
    EpochNone,
    EpochMedian,
    EpochMorph,
}

impl From<SchemeArg> for Approach {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Event => Approach::Event,
            SchemeArg::EpochNone => Approach::EpochNone,
            SchemeArg::EpochMedian => Approach::EpochMedian,
            SchemeArg::EpochMorph => Approach::EpochMorph,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate { .. } => "simulate",
            Command::Train { .. } => "train",
            Command::Predict { .. } => "predict",
            Command::Evaluate { .. } => "evaluate",
            Command::Sweep => "sweep",
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    let mut cfg = RunConfig::load(c.config.as_deref())?;
    cfg.apply(&Overrides {
        seed: c.seed,
        iou_threshold: c.iou_threshold,
        recall_levels: c.recall_levels.clone().map(|r| r.0),
        scheme: c.scheme.map(Approach::from),
    })?;
    let clock = RunClock::start();
    let out = &c.out;
    let (outputs, seed) = match &cli.command {
        Command::Simulate { split, data } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            (commands::simulate(&cfg, split, data.as_deref(), out)?, cfg.sim.seed)
        }
        Command::Train { data } => {
            let scheme = cfg.predict.scheme.unwrap_or(Approach::Event);
            (commands::train(&cfg, scheme, data, out)?, cfg.train.seed)
        }
        Command::Predict { data, model } => (commands::predict_cmd(&cfg, model, data, out)?, cfg.train.seed),
        Command::Evaluate { data, pred } => (commands::evaluate(&cfg, pred, data, out)?, cfg.sim.seed),
        Command::Sweep => (commands::sweep(&cfg, out)?, cfg.sim.seed),
    };
    let name = cli.command.name();
    let manifest = clock.finish(name, &cfg, seed, outputs);
    write_json(&out.join(format!("{name}_manifest.json")), &manifest).context("writing run manifest")
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    e.chain().find_map(|c| c.downcast_ref::<evdet::Error>().map(evdet::Error::kind)).unwrap_or("error")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => return fail(None, "usage", e.to_string().trim()),
    };
    let command = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(Some(command), error_kind(&e), &format!("{e:#}")),
    }
}

fn fail(command: Option<&str>, kind: &str, message: &str) -> ExitCode {
    let report = json!({ "error": { "command": command, "kind": kind, "message": message } });
    eprintln!("{report}");
    ExitCode::FAILURE
}
