//! Command implementations. Every output goes through [`write_atomic`] so a
//! failing command never leaves a partial file behind.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use scenecast::metrics::{evaluate_scene, EvalReport};
use scenecast::model::hier::{read_heatmaps, write_heatmaps, HeatmapDump};
use scenecast::model::{train_decoder, train_trajectory, HeatmapModel, TrajectoryModel};
use scenecast::pipeline::{recombiner_dataset, scene_heatmaps, HeatmapSource, PredictMode, Predictor};
use scenecast::recombiner::{train_recombiner, Recombiner, RecombinerConfig};
use scenecast::sampler::{read_predictions, write_predictions, ScenePrediction};
use scenecast::scene::io::{read_scenes, write_scenes};
use scenecast::scene::{generate_scene, normalize_scene, select_reference, ReferenceMode, Scene};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::render::render_svg;

/// Writes `path` through a sibling temporary file that is renamed into place
/// only after `body` succeeds.
pub fn write_atomic(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let name = path.file_name().ok_or_else(|| anyhow!("output path {} has no file name", path.display()))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let res = (|| {
        let mut w = BufWriter::new(File::create(&tmp).with_context(|| format!("creating {}", path.display()))?);
        body(&mut w)?;
        w.flush()?;
        w.get_ref().sync_all()?;
        drop(w);
        std::fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))
    })();
    if res.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    res
}

/// Sidecar holding the resolved configuration of the run that wrote `out`.
pub fn config_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".config.toml");
    PathBuf::from(s)
}

fn echo_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    let text = cfg.to_toml()?;
    eprintln!("# resolved config\n{text}");
    write_atomic(&config_path(out), |w| Ok(w.write_all(text.as_bytes())?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

pub fn load_scenes(path: &Path) -> Result<Vec<Scene>> {
    let scenes = read_scenes(open(path)?).with_context(|| format!("reading scenes from {}", path.display()))?;
    scenes.into_iter().map(in_scene_frame).collect()
}

/// World-frame records are normalized around the barycenter agent.
fn in_scene_frame(s: Scene) -> Result<Scene> {
    if s.reference.is_some() {
        return Ok(s);
    }
    let r = select_reference(&s, ReferenceMode::Barycenter)?;
    Ok(normalize_scene(&s, r)?)
}

/// Seed of the `i`-th generated scene.
pub fn scene_seed(base: u64, i: u64) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i)
}

pub fn gen_data(cfg: &RunConfig, count: usize, out: &Path) -> Result<()> {
    let scenes = (0..count as u64)
        .into_par_iter()
        .map(|i| generate_scene(scene_seed(cfg.seed, i), &cfg.generator))
        .collect::<scenecast::Result<Vec<_>>>()?;
    write_atomic(out, |w| Ok(write_scenes(w, &scenes)?))?;
    echo_config(cfg, out)?;
    eprintln!("wrote {} scenes to {}", scenes.len(), out.display());
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Decoder,
    Trajectory,
    Recombiner,
}

fn load_decoder(path: &Path) -> Result<HeatmapModel> {
    if !path.exists() {
        bail!("decoder stage checkpoint {} is missing; run `train --stage decoder` first", path.display());
    }
    HeatmapModel::load(open(path)?).with_context(|| format!("loading decoder checkpoint {}", path.display()))
}

fn write_loss_log(out: &Path, losses: &[f64]) -> Result<()> {
    let mut s = out.as_os_str().to_owned();
    s.push(".loss.csv");
    write_atomic(Path::new(&s), |w| {
        writeln!(w, "epoch,loss")?;
        for (e, l) in losses.iter().enumerate() {
            writeln!(w, "{e},{l:?}")?;
        }
        Ok(())
    })
}

fn log_epoch(stage: Stage) -> impl FnMut(usize, f64) {
    move |e, l| eprintln!("{stage:?} epoch {e}: loss {l:.6}")
}

pub fn train(cfg: &mut RunConfig, stage: Stage, data: &Path, decoder: &Path, out: &Path) -> Result<()> {
    let scenes = load_scenes(data)?;
    if scenes.is_empty() {
        bail!("no training scenes in {}", data.display());
    }
    let losses = match stage {
        Stage::Decoder => {
            let mut model = HeatmapModel::new(cfg.model.clone())?;
            let r = train_decoder(&mut model, &scenes, &cfg.decoder_train, log_epoch(stage))?;
            write_atomic(out, |w| Ok(model.save(w)?))?;
            r.epoch_losses
        }
        Stage::Trajectory => {
            let mut model = TrajectoryModel::new(cfg.trajectory.clone());
            let r = train_trajectory(&mut model, &scenes, &cfg.trajectory_train, log_epoch(stage))?;
            write_atomic(out, |w| Ok(model.save(w)?))?;
            r.epoch_losses
        }
        Stage::Recombiner => {
            let model = load_decoder(decoder)?;
            check_grid(cfg, &model)?;
            cfg.recombiner.enc_dim = model.config.dim;
            let source = heatmap_source(cfg, &model);
            let (inputs, gts) = recombiner_dataset(&scenes, source, &model, &recombiner_sampler(cfg))?;
            let mut rec = Recombiner::new(cfg.recombiner.clone())?;
            let r = train_recombiner(&mut rec, &inputs, &gts, &cfg.recombiner_train, log_epoch(stage))?;
            write_atomic(out, |w| Ok(rec.save(w)?))?;
            r.epoch_losses
        }
    };
    write_loss_log(out, &losses)?;
    echo_config(cfg, out)?;
    eprintln!("wrote {stage:?} checkpoint to {}", out.display());
    Ok(())
}

fn recombiner_sampler(cfg: &RunConfig) -> scenecast::sampler::SamplerConfig {
    scenecast::sampler::SamplerConfig { k: cfg.recombiner.k, ..cfg.sampler }
}

fn check_grid(cfg: &RunConfig, model: &HeatmapModel) -> Result<()> {
    if model.config.hier != cfg.model.hier {
        bail!(
            "grid mismatch: checkpoint was trained with {:?} but the run config uses {:?}",
            model.config.hier,
            cfg.model.hier
        );
    }
    Ok(())
}

/// Heatmap producer selected by the config.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapKind {
    /// The trained decoder.
    #[default]
    Learned,
    /// The lane-following analytic prior decoded on the same grid.
    Prior,
}

fn heatmap_source<'a>(cfg: &RunConfig, model: &'a HeatmapModel) -> HeatmapSource<'a> {
    match cfg.heatmaps {
        HeatmapKind::Learned => HeatmapSource::Learned(model),
        HeatmapKind::Prior => HeatmapSource::Prior(model.config.hier),
    }
}

pub struct Checkpoints<'a> {
    pub decoder: &'a Path,
    pub trajectory: Option<&'a Path>,
    pub recombiner: Option<&'a Path>,
}

pub fn predict(cfg: &RunConfig, data: &Path, ckpt: &Checkpoints, mode: PredictMode, out: &Path) -> Result<()> {
    let scenes = load_scenes(data)?;
    let model = load_decoder(ckpt.decoder)?;
    check_grid(cfg, &model)?;
    let trajectory = match ckpt.trajectory {
        Some(p) => Some(TrajectoryModel::load(open(p)?).with_context(|| format!("loading trajectory checkpoint {}", p.display()))?),
        None => None,
    };
    let recombiner = match (mode, ckpt.recombiner) {
        (PredictMode::JointRecombined, None) => bail!("mode joint-recombined needs a recombiner stage checkpoint"),
        (PredictMode::JointRecombined, Some(p)) => {
            let r = Recombiner::load(open(p)?).with_context(|| format!("loading recombiner checkpoint {}", p.display()))?;
            if r.config.enc_dim != model.config.dim {
                bail!("recombiner expects {}-wide encodings but the decoder produces {}", r.config.enc_dim, model.config.dim);
            }
            Some(r)
        }
        _ => None,
    };
    let predictor = Predictor {
        source: heatmap_source(cfg, &model),
        encoder: Some(&model),
        recombiner: recombiner.as_ref(),
        trajectory: trajectory.as_ref(),
        sampler: cfg.sampler,
    };
    let preds = scenes
        .par_iter()
        .map(|s| Ok(ScenePrediction { scene: s.id, mode: mode.name().to_string(), set: predictor.predict_scene(s, mode)? }))
        .collect::<scenecast::Result<Vec<_>>>()?;
    write_atomic(out, |w| Ok(write_predictions(w, &preds)?))?;
    echo_config(cfg, out)?;
    eprintln!("wrote {} {} predictions to {}", preds.len(), mode.name(), out.display());
    Ok(())
}

/// Reports keyed by prediction mode, in input order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub d_col: f64,
    pub reports: Vec<(String, EvalReport)>,
}

pub fn evaluate(cfg: &RunConfig, data: &Path, predictions: &[PathBuf], out: &Path) -> Result<ReportFile> {
    let scenes = load_scenes(data)?;
    let mut reports = Vec::new();
    for path in predictions {
        let preds = read_predictions(open(path)?).with_context(|| format!("reading predictions {}", path.display()))?;
        let mode = preds.first().map_or_else(|| path.display().to_string(), |p| p.mode.clone());
        let per_scene = preds
            .par_iter()
            .map(|p| {
                let s = scenes.iter().find(|s| s.id == p.scene).ok_or_else(|| anyhow!("scene {} is not in {}", p.scene, data.display()))?;
                Ok(evaluate_scene(s, &p.set, &cfg.metrics)?)
            })
            .collect::<Result<Vec<_>>>()?;
        reports.push((mode, EvalReport::from_scenes(per_scene)));
    }
    let file = ReportFile { d_col: cfg.metrics.d_col, reports };
    write_atomic(out, |w| {
        serde_json::to_writer_pretty(&mut *w, &file)?;
        Ok(writeln!(w)?)
    })?;
    echo_config(cfg, out)?;
    let rows: Vec<(&str, &EvalReport)> = file.reports.iter().map(|(n, r)| (n.as_str(), r)).collect();
    println!("{}", EvalReport::table(&rows));
    Ok(file)
}

/// Heatmaps drawn by `render`: a dump file, or decoded on the fly.
pub enum HeatmapInput<'a> {
    None,
    File(&'a Path),
    Decode(&'a Path),
}

pub fn render(cfg: &RunConfig, data: &Path, scene_id: u64, predictions: Option<&Path>, heatmaps: HeatmapInput, out: &Path) -> Result<()> {
    let scenes = load_scenes(data)?;
    let scene = scenes.iter().find(|s| s.id == scene_id).ok_or_else(|| anyhow!("scene {scene_id} is not in {}", data.display()))?;
    let set = match predictions {
        Some(p) => {
            let preds = read_predictions(open(p)?)?;
            Some(preds.into_iter().find(|x| x.scene == scene_id).ok_or_else(|| anyhow!("no prediction for scene {scene_id} in {}", p.display()))?.set)
        }
        None => None,
    };
    let maps: Vec<HeatmapDump> = match heatmaps {
        HeatmapInput::None => Vec::new(),
        HeatmapInput::File(p) => read_heatmaps(open(p)?)?,
        HeatmapInput::Decode(p) => {
            let model = load_decoder(p)?;
            let decoded = scene_heatmaps(scene, heatmap_source(cfg, &model))?;
            let mut buf = Vec::new();
            write_heatmaps(&mut buf, &decoded)?;
            read_heatmaps(buf.as_slice())?
        }
    };
    let svg = render_svg(scene, &maps, set.as_ref());
    write_atomic(out, |w| Ok(w.write_all(svg.as_bytes())?))?;
    echo_config(cfg, out)?;
    Ok(())
}

/// Rejects invalid configs before any work is done.
pub fn validate(cfg: &RunConfig) -> Result<()> {
    cfg.sampler.validate()?;
    cfg.generator.validate()?;
    cfg.model.hier.validate()?;
    RecombinerConfig::validate(&cfg.recombiner)?;
    if cfg.metrics.d_col.is_nan() || cfg.metrics.d_col < 0.0 {
        bail!("d_col must be non-negative");
    }
    Ok(())
}
