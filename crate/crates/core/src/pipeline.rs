//! Scene-level glue: heatmaps to modality sets to metrics.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::field::kinematic_prior;
use crate::metrics::{evaluate_scene, EvalReport, MetricsConfig};
use crate::model::hier::decode_oracle;
use crate::model::{HeatmapModel, HierConfig, SparseHeatmap, TrajectoryModel};
use crate::recombiner::{rank_joint_modalities, reorder_modalities, Recombiner, RecombinerInput};
use crate::sampler::{sample_joint, sample_marginal_set, ModalitySet, SamplerConfig};
use crate::scene::geometry::Point;
use crate::scene::{AgentTrack, Scene};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictMode {
    /// Independent greedy sampling per agent.
    Marginal,
    /// Collision-aware joint sampling.
    JointAlgo,
    /// Marginal sampling followed by learned recombination.
    JointRecombined,
}

impl PredictMode {
    pub fn name(&self) -> &'static str {
        match self {
            PredictMode::Marginal => "marginal",
            PredictMode::JointAlgo => "joint-algo",
            PredictMode::JointRecombined => "joint-recombined",
        }
    }
}

/// Where per-agent heatmaps come from.
#[derive(Clone, Copy, Debug)]
pub enum HeatmapSource<'a> {
    Learned(&'a HeatmapModel),
    /// Lane-following analytic prior decoded in oracle mode.
    Prior(HierConfig),
}

/// Agents predicted in a scene: those present at prediction time.
pub fn predicted_agents(scene: &Scene) -> Vec<usize> {
    scene.agents.iter().enumerate().filter(|(_, a)| a.is_present()).map(|(i, _)| i).collect()
}

pub fn scene_heatmaps(scene: &Scene, source: HeatmapSource) -> Result<Vec<SparseHeatmap>> {
    let idx = predicted_agents(scene);
    match source {
        HeatmapSource::Learned(m) => m.decode_agents(scene, &idx),
        HeatmapSource::Prior(cfg) => idx
            .iter()
            .map(|&i| {
                let a = &scene.agents[i];
                Ok(decode_oracle(&kinematic_prior(scene, a), &cfg, a.id)?.0)
            })
            .collect(),
    }
}

/// Recombiner input for a marginal set of `scene`.
pub fn recombiner_input(scene: &Scene, model: &HeatmapModel, marginal: ModalitySet) -> Result<RecombinerInput> {
    let enc = model.encode_scene(scene)?;
    let rows: Vec<usize> = marginal
        .agents
        .iter()
        .map(|id| scene.agents.iter().position(|a| a.id == *id).ok_or_else(|| invalid("recombiner_input", format!("agent {id} not in scene"))))
        .collect::<Result<_>>()?;
    let d = enc.agents.cols();
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in &rows {
        data.extend_from_slice(enc.agents.row(r));
    }
    let anchors = rows.iter().map(|&r| *scene.agents[r].current()).collect();
    Ok(RecombinerInput { marginal, encodings: crate::math::Tensor::new(vec![rows.len(), d], data)?, anchors })
}

/// Ground-truth endpoints aligned with a modality set's agents.
pub fn gt_endpoints(scene: &Scene, set: &ModalitySet) -> Vec<Option<Point>> {
    set.agents.iter().map(|id| scene.agent(*id).and_then(AgentTrack::endpoint)).collect()
}

/// Attaches trajectories completed from each endpoint.
pub fn attach_trajectories(scene: &Scene, set: &mut ModalitySet, model: &TrajectoryModel) -> Result<()> {
    let mut queries = Vec::new();
    for (a, id) in set.agents.iter().enumerate() {
        let track = scene.agent(*id).ok_or_else(|| invalid("attach_trajectories", format!("agent {id} not in scene")))?;
        for k in 0..set.k() {
            queries.push((track, set.endpoint(a, k)));
        }
    }
    let mut out = model.complete_batch(&queries)?.into_iter();
    set.trajectories = Some(set.agents.iter().map(|_| (0..set.k()).map(|_| out.next().unwrap()).collect()).collect());
    Ok(())
}

/// Models used by [`predict_scene`].
#[derive(Clone, Copy, Debug)]
pub struct Predictor<'a> {
    pub source: HeatmapSource<'a>,
    /// Encoder for the recombiner; required for [`PredictMode::JointRecombined`].
    pub encoder: Option<&'a HeatmapModel>,
    pub recombiner: Option<&'a Recombiner>,
    pub trajectory: Option<&'a TrajectoryModel>,
    pub sampler: SamplerConfig,
}

impl Predictor<'_> {
    pub fn predict_scene(&self, scene: &Scene, mode: PredictMode) -> Result<ModalitySet> {
        let maps = scene_heatmaps(scene, self.source)?;
        let mut set = match mode {
            PredictMode::Marginal => sample_marginal_set(&maps, &self.sampler)?,
            PredictMode::JointAlgo => sample_joint(&maps, Some(scene), &self.sampler)?,
            PredictMode::JointRecombined => {
                let (Some(enc), Some(rec)) = (self.encoder, self.recombiner) else {
                    return Err(invalid("predict", "recombined mode needs an encoder and a recombiner"));
                };
                let marginal = sample_marginal_set(&maps, &SamplerConfig { k: rec.config.k, ..self.sampler })?;
                let joint = rec.recombine(&recombiner_input(scene, enc, marginal)?)?;
                match &joint.confidence {
                    Some(c) => {
                        let order = rank_joint_modalities(c);
                        reorder_modalities(&joint, &order)
                    }
                    None => joint,
                }
            }
        };
        if let Some(t) = self.trajectory {
            attach_trajectories(scene, &mut set, t)?;
        }
        Ok(set)
    }
}

/// Marginal sets and recombiner inputs for training, with ground truth.
pub fn recombiner_dataset(
    scenes: &[Scene],
    source: HeatmapSource,
    encoder: &HeatmapModel,
    sampler: &SamplerConfig,
) -> Result<(Vec<RecombinerInput>, Vec<Vec<Option<Point>>>)> {
    let mut inputs = Vec::with_capacity(scenes.len());
    let mut gts = Vec::with_capacity(scenes.len());
    for s in scenes {
        let maps = scene_heatmaps(s, source)?;
        if maps.is_empty() {
            continue;
        }
        let marginal = sample_marginal_set(&maps, sampler)?;
        gts.push(gt_endpoints(s, &marginal));
        inputs.push(recombiner_input(s, encoder, marginal)?);
    }
    Ok((inputs, gts))
}

/// Evaluates predictions paired with their scenes, in order.
pub fn evaluate(pairs: &[(&Scene, &ModalitySet)], cfg: &MetricsConfig) -> Result<EvalReport> {
    let per_scene = pairs.iter().map(|(s, p)| evaluate_scene(s, p, cfg)).collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_scenes(per_scene))
}
