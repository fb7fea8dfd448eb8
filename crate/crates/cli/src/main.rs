//! `scenecast`: generate scenes, train the staged models, predict, evaluate
//! and render.
//!
//! Paths default to files inside `$SCENECAST_DATA_DIR` (or `./data`).

mod commands;
mod config;
mod render;

use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use scenecast::pipeline::PredictMode;

use commands::{Checkpoints, HeatmapInput, Stage};
use config::{Overrides, RunConfig};

const DATA_DIR_ENV: &str = "SCENECAST_DATA_DIR";

#[derive(Parser)]
#[command(name = "scenecast", version, about = "Joint multi-agent endpoint forecasting")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Modalities per agent (also the recombiner's L and K).
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Sampling radius, meters.
    #[arg(long, global = true)]
    radius: Option<f64>,
    /// Collision distance, meters.
    #[arg(long = "d-col", global = true)]
    d_col: Option<f64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Base learning rate of every training stage.
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// Output file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes.
    GenData {
        #[arg(long, default_value_t = 100)]
        count: usize,
    },
    /// Train one stage and write its checkpoint plus a loss log.
    Train {
        #[arg(long, value_enum)]
        stage: Stage,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Decoder checkpoint, required by the recombiner stage.
        #[arg(long)]
        decoder: Option<PathBuf>,
    },
    /// Write per-scene modality sets.
    Predict {
        #[arg(long, value_parser = parse_mode)]
        mode: PredictMode,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        decoder: Option<PathBuf>,
        #[arg(long)]
        trajectory: Option<PathBuf>,
        #[arg(long)]
        recombiner: Option<PathBuf>,
    },
    /// Score one or more prediction files and print the comparison table.
    Evaluate {
        #[arg(long = "predictions", required = true, num_args = 1..)]
        predictions: Vec<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Draw one scene as SVG.
    Render {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        scene: u64,
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Heatmap dump to overlay.
        #[arg(long, conflicts_with = "decoder")]
        heatmaps: Option<PathBuf>,
        /// Decode heatmaps with this checkpoint and overlay them.
        #[arg(long)]
        decoder: Option<PathBuf>,
    },
}

fn parse_mode(s: &str) -> Result<PredictMode, String> {
    match s {
        "marginal" => Ok(PredictMode::Marginal),
        "joint-algo" => Ok(PredictMode::JointAlgo),
        "joint-recombined" => Ok(PredictMode::JointRecombined),
        _ => Err(format!("unknown mode `{s}` (expected marginal, joint-algo or joint-recombined)")),
    }
}

fn data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from)
}

fn or_default(p: Option<PathBuf>, name: &str) -> PathBuf {
    p.unwrap_or_else(|| data_dir().join(name))
}

fn ensure_parent(p: &Path) -> Result<()> {
    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let c = cli.common;
    let mut cfg = RunConfig::load(c.config.as_deref())?;
    cfg.apply(&Overrides { seed: c.seed, k: c.k, radius: c.radius, d_col: c.d_col, epochs: c.epochs, lr: c.lr });
    commands::validate(&cfg)?;
    match cli.command {
        Command::GenData { count } => {
            let out = or_default(c.out, "scenes.jsonl");
            ensure_parent(&out)?;
            commands::gen_data(&cfg, count, &out)
        }
        Command::Train { stage, data, decoder } => {
            let data = or_default(data, "scenes.jsonl");
            let name = match stage {
                Stage::Decoder => "decoder.ckpt",
                Stage::Trajectory => "trajectory.ckpt",
                Stage::Recombiner => "recombiner.ckpt",
            };
            let out = or_default(c.out, name);
            ensure_parent(&out)?;
            commands::train(&mut cfg, stage, &data, &or_default(decoder, "decoder.ckpt"), &out)
        }
        Command::Predict { mode, data, decoder, trajectory, recombiner } => {
            let data = or_default(data, "scenes.jsonl");
            let out = or_default(c.out, &format!("predictions-{}.jsonl", mode.name()));
            ensure_parent(&out)?;
            let decoder = or_default(decoder, "decoder.ckpt");
            let recombiner = recombiner.or_else(|| (mode == PredictMode::JointRecombined).then(|| data_dir().join("recombiner.ckpt")));
            let ckpt = Checkpoints { decoder: &decoder, trajectory: trajectory.as_deref(), recombiner: recombiner.as_deref() };
            commands::predict(&cfg, &data, &ckpt, mode, &out)
        }
        Command::Evaluate { predictions, data } => {
            let out = or_default(c.out, "report.json");
            ensure_parent(&out)?;
            commands::evaluate(&cfg, &or_default(data, "scenes.jsonl"), &predictions, &out).map(drop)
        }
        Command::Render { data, scene, predictions, heatmaps, decoder } => {
            let out = or_default(c.out, &format!("scene-{scene}.svg"));
            ensure_parent(&out)?;
            let hm = match (&heatmaps, &decoder) {
                (Some(p), _) => HeatmapInput::File(p),
                (None, Some(p)) => HeatmapInput::Decode(p),
                (None, None) => HeatmapInput::None,
            };
            commands::render(&cfg, &or_default(data, "scenes.jsonl"), scene, predictions.as_deref(), hm, &out)
        }
    }
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
