use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoder::SceneEncoder;
use super::features::point_features;
use super::hier::{coarse_cells, refine, top_n, CellIndex, HeatCell, HierConfig, SparseHeatmap};
use crate::error::{Error, Result};
use crate::field::{target_value_sigma, TARGET_SIGMA};
use crate::math::graph::logistic;
use crate::math::nn::{Attention, Linear, Mlp};
use crate::math::{Adam, Graph, LrSchedule, ParamId, ParamSet, Tensor, Var};
use crate::scene::{normalize_scene, select_reference, subsample_training_agents, ReferenceMode, Scene};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of encodings and decoder features.
    pub dim: usize,
    pub hier: HierConfig,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { dim: 64, hier: HierConfig::default(), seed: 0 }
    }
}

/// Probability every cell starts from, so early training is not dominated by
/// the many empty cells.
pub const INITIAL_PROB: f64 = 0.01;

/// Per-scene encoder output, reused by the recombiner.
#[derive(Clone, Debug)]
pub struct SceneEncoding {
    /// `[A, dim]`, scene agent order.
    pub agents: Tensor,
    /// `[L, dim]`.
    pub lanes: Tensor,
}

/// Scores query points for one refinement level.
#[derive(Clone, Debug)]
struct LevelScorer {
    point_mlp: Mlp,
    // Linear layer over concat(point features, agent encoding), stored as
    // two blocks so agent rows are projected once.
    w_point: ParamId,
    w_agent: ParamId,
    b_fuse: ParamId,
    attn: [Attention; 2],
    head: Linear,
}

impl LevelScorer {
    fn new(ps: &mut ParamSet, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let point_mlp = Mlp::new(ps, &format!("{name}.point"), &[4, dim, dim], true, rng);
        let fan = 2 * dim;
        let head = Linear::new(ps, &format!("{name}.head"), dim, 1, rng);
        let logit = (INITIAL_PROB / (1.0 - INITIAL_PROB)).ln();
        ps.get_mut(head.b).value.data_mut().fill(logit);
        LevelScorer {
            point_mlp,
            w_point: ps.add_uniform(format!("{name}.fuse.wp"), &[dim, dim], fan, rng),
            w_agent: ps.add_uniform(format!("{name}.fuse.wa"), &[dim, dim], fan, rng),
            b_fuse: ps.add_uniform(format!("{name}.fuse.b"), &[dim], fan, rng),
            attn: [
                Attention::new(ps, &format!("{name}.attn0"), dim, dim, rng),
                Attention::new(ps, &format!("{name}.attn1"), dim, dim, rng),
            ],
            head,
        }
    }

    /// Logits `[n, 1]` for `points` (`[n, 4]` features) owned by `owners`
    /// (rows of `agents`).
    fn forward(&self, g: &mut Graph, ps: &ParamSet, agents: Var, lanes: Var, points: Tensor, owners: &[usize]) -> Result<Var> {
        let p = g.constant(points);
        let h = self.point_mlp.forward(g, ps, p)?;
        let wp = g.param(ps, self.w_point);
        let hp = g.matmul(h, wp)?;
        let wa = g.param(ps, self.w_agent);
        let ha = g.matmul(agents, wa)?;
        let ha = g.gather(ha, owners)?;
        let x = g.add(hp, ha)?;
        let b = g.param(ps, self.b_fuse);
        let x = g.add_bias(x, b)?;
        let mut x = g.relu(x);
        if g.shape(lanes)[0] > 0 {
            for a in &self.attn {
                let (kt, v) = a.project_context(g, ps, lanes)?;
                x = a.attend(g, ps, x, kt, v)?;
            }
        }
        self.head.forward(g, ps, x)
    }
}

/// Output of one refinement level for a set of agents.
struct LevelPass {
    /// Cells per decoded agent, concatenated in `logits` row order.
    cells: Vec<Vec<CellIndex>>,
    logits: Var,
}

/// Scene encoder plus the three-level heatmap decoder.
#[derive(Clone, Debug)]
pub struct HeatmapModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    encoder: SceneEncoder,
    levels: Vec<LevelScorer>,
}

impl HeatmapModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.hier.validate()?;
        if config.dim == 0 {
            return Err(Error::Config("model dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let encoder = SceneEncoder::new(&mut params, config.dim, &mut rng);
        let levels = (0..3).map(|l| LevelScorer::new(&mut params, &format!("dec{l}"), config.dim, &mut rng)).collect();
        Ok(HeatmapModel { config, params, encoder, levels })
    }

    pub fn encoder(&self) -> &SceneEncoder {
        &self.encoder
    }

    pub fn encode_scene(&self, scene: &Scene) -> Result<SceneEncoding> {
        let (agents, lanes) = self.encoder.encode(&self.params, scene)?;
        Ok(SceneEncoding { agents, lanes })
    }

    fn forward_levels(&self, g: &mut Graph, scene: &Scene, decode: &[usize]) -> Result<Vec<LevelPass>> {
        let cfg = &self.config.hier;
        let (agents, lanes) = self.encoder.forward(g, &self.params, scene)?;
        let mut per_agent: Vec<Vec<CellIndex>> = vec![coarse_cells(cfg); decode.len()];
        let mut out = Vec::with_capacity(3);
        for (level, scorer) in self.levels.iter().enumerate() {
            let n: usize = per_agent.iter().map(Vec::len).sum();
            let mut feats = Vec::with_capacity(n * 4);
            let mut owners = Vec::with_capacity(n);
            for (cells, &a) in per_agent.iter().zip(decode) {
                let cur = scene.agents[a].current();
                for c in cells {
                    feats.extend_from_slice(&point_features(cur, c.center(cfg)));
                    owners.push(a);
                }
            }
            let points = Tensor::new(vec![n, 4], feats)?;
            let logits = scorer.forward(g, &self.params, agents, lanes, points, &owners)?;
            let next = if level < 2 {
                let vals = g.value(logits).data();
                let mut offset = 0;
                per_agent
                    .iter()
                    .map(|cells| {
                        let keep = top_n(cells, &vals[offset..offset + cells.len()], cfg.keep(level));
                        offset += cells.len();
                        refine(cells, &keep, cfg)
                    })
                    .collect()
            } else {
                Vec::new()
            };
            out.push(LevelPass { cells: std::mem::replace(&mut per_agent, next), logits });
        }
        Ok(out)
    }

    /// Decodes every agent of a normalized scene in one batched pass.
    pub fn decode_heatmaps(&self, scene: &Scene) -> Result<Vec<SparseHeatmap>> {
        let idx: Vec<usize> = (0..scene.agents.len()).collect();
        self.decode_agents(scene, &idx)
    }

    /// Decodes the agents at the given scene indices.
    pub fn decode_agents(&self, scene: &Scene, idx: &[usize]) -> Result<Vec<SparseHeatmap>> {
        let mut g = Graph::new();
        let passes = self.forward_levels(&mut g, scene, idx)?;
        let cfg = self.config.hier;
        let mut maps: Vec<SparseHeatmap> = idx
            .iter()
            .map(|&a| SparseHeatmap { agent: scene.agents[a].id, config: cfg, cells: Vec::new() })
            .collect();
        for pass in &passes {
            let vals = g.value(pass.logits).data();
            let mut offset = 0;
            for (m, cells) in maps.iter_mut().zip(&pass.cells) {
                for (c, v) in cells.iter().zip(&vals[offset..]) {
                    m.cells.push(HeatCell { cell: *c, center: c.center(&cfg), prob: logistic(*v) });
                }
                offset += cells.len();
            }
        }
        Ok(maps)
    }

    /// Mean focal loss over all evaluated cells of the given agents, which
    /// must have endpoints inside the grid.
    fn scene_loss(&self, g: &mut Graph, scene: &Scene, idx: &[usize]) -> Result<Var> {
        let cfg = self.config.hier;
        let passes = self.forward_levels(g, scene, idx)?;
        let mut targets = Vec::new();
        let mut logits = Vec::new();
        for (level, pass) in passes.iter().enumerate() {
            let sigma = TARGET_SIGMA * cfg.cell_size(level) / cfg.r2;
            for (cells, &a) in pass.cells.iter().zip(idx) {
                let end = scene.agents[a].endpoint().expect("training agents have futures");
                for c in cells {
                    let (lo, hi) = c.bounds(&cfg);
                    let inside = end[0] >= lo[0] && end[0] < hi[0] && end[1] >= lo[1] && end[1] < hi[1];
                    targets.push(if inside { 1.0 } else { target_value_sigma(end, c.center(&cfg), sigma) });
                }
            }
            logits.push(pass.logits);
        }
        let all = g.concat(&logits, 0)?;
        let prob = g.sigmoid(all);
        let n = targets.len();
        g.focal_loss(prob, &Tensor::new(vec![n, 1], targets)?)
    }

    /// Checkpoint with the model config in the metadata line.
    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        let meta = serde_json::json!({ "kind": "heatmap", "config": self.config });
        self.params.write_checkpoint_with_meta(w, &meta)
    }

    pub fn load<R: BufRead>(r: R) -> Result<Self> {
        let (params, meta) = ParamSet::read_checkpoint_with_meta(r)?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("heatmap") {
            return Err(Error::Format("not a heatmap checkpoint".into()));
        }
        let config: ModelConfig = serde_json::from_value(meta["config"].clone())?;
        let mut model = HeatmapModel::new(config)?;
        model.params.load_values(&params)?;
        Ok(model)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Agents supervised per scene.
    pub max_agents: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 16, batch_size: 32, max_agents: 8, schedule: LrSchedule::halving(), seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-scene loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

/// Trains encoder and decoder jointly with the focal loss on every level.
///
/// Each epoch re-normalizes every scene around a uniformly drawn agent and
/// supervises up to `max_agents` agents whose endpoint falls inside the grid.
/// `on_epoch(epoch, mean_loss)` is called after each epoch.
pub fn train_decoder(
    model: &mut HeatmapModel,
    scenes: &[Scene],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    if cfg.batch_size == 0 || cfg.max_agents == 0 {
        return Err(Error::Config("batch_size and max_agents must be positive".into()));
    }
    let grid = model.config.hier.final_grid();
    let mut adam = Adam::new(&model.params, cfg.schedule.clone());
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    for epoch in 0..cfg.epochs {
        adam.set_epoch(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, 1));
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            model.params.zero_grad();
            let mut used = 0usize;
            let mut batch_loss = 0.0;
            for &si in batch {
                let s = &scenes[si];
                let key = mix(cfg.seed, epoch as u64, s.id.wrapping_add(2));
                let reference = select_reference(s, ReferenceMode::Random(key))?;
                let scene = normalize_scene(s, reference)?;
                let ids = subsample_training_agents(&scene, cfg.max_agents, key);
                let idx: Vec<usize> = scene
                    .agents
                    .iter()
                    .enumerate()
                    .filter(|(_, a)| ids.contains(&a.id) && a.endpoint().is_some_and(|e| grid.contains(e)))
                    .map(|(i, _)| i)
                    .collect();
                if idx.is_empty() {
                    continue;
                }
                let mut g = Graph::new();
                let loss = model.scene_loss(&mut g, &scene, &idx)?;
                let v = g.value(loss).item();
                if !v.is_finite() {
                    return Err(Error::Diverged { epoch, step, loss: v });
                }
                g.backward(loss, &mut model.params)?;
                batch_loss += v;
                used += 1;
            }
            if used == 0 {
                continue;
            }
            model.params.scale_grads(1.0 / used as f64);
            adam.step_allow_missing(&mut model.params)?;
            total += batch_loss;
            count += used;
        }
        let mean = total / count.max(1) as f64;
        report.epoch_losses.push(mean);
        on_epoch(epoch, mean);
    }
    report.steps = adam.steps();
    Ok(report)
}
