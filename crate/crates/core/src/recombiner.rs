//! Learned recombination of per-agent modalities into scene modalities.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::math::nn::{Attention, Mlp};
use crate::math::{Adam, Graph, LrSchedule, ParamId, ParamSet, Tensor, Var};
use crate::model::features::point_features;
use crate::model::TrainReport;
use crate::sampler::{ModalitySet, Orientation};
use crate::scene::geometry::Point;
use crate::scene::Frame;

/// Per agent modality: scene and agent-frame coordinates plus the share of
/// the agent's sampled mass.
const POINT_INPUTS: usize = 5;

/// Confidences of agent `a` normalized to sum to 1; uniform when absent.
fn relative_confidence(set: &ModalitySet, a: usize) -> Vec<f64> {
    let k = set.k();
    match &set.confidence {
        Some(c) => {
            let total: f64 = c[a].iter().map(|v| v.max(0.0)).sum();
            if total > 0.0 {
                c[a].iter().map(|v| v.max(0.0) / total).collect()
            } else {
                vec![1.0 / k as f64; k]
            }
        }
        None => vec![1.0 / k as f64; k],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecombinerConfig {
    /// Scene modalities produced.
    pub l: usize,
    /// Agent modalities consumed.
    pub k: usize,
    pub dim: usize,
    /// Width of the stored agent encodings.
    pub enc_dim: usize,
    pub layers: usize,
    pub temperature: f64,
    /// Replace the soft argmax by a one-hot argmax at inference.
    pub hard: bool,
    pub seed: u64,
}

impl Default for RecombinerConfig {
    fn default() -> Self {
        RecombinerConfig { l: 6, k: 6, dim: 64, enc_dim: 64, layers: 2, temperature: 1.0, hard: false, seed: 0 }
    }
}

impl RecombinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l == 0 || self.k == 0 || self.dim == 0 || self.enc_dim == 0 || !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "recombiner needs L, K, D >= 1 and temperature > 0 (L = {}, K = {}, D = {}, tau = {})",
                self.l, self.k, self.dim, self.temperature
            )));
        }
        Ok(())
    }
}

/// Everything the recombiner reads for one scene.
#[derive(Clone, Debug)]
pub struct RecombinerInput {
    /// Marginal `A x K` endpoints.
    pub marginal: ModalitySet,
    /// `[A, enc_dim]` frozen agent encodings, rows in `marginal.agents` order.
    pub encodings: Tensor,
    /// Current state of each agent, for agent-frame coordinates.
    pub anchors: Vec<Frame>,
}

#[derive(Clone, Debug)]
pub struct Recombiner {
    pub config: RecombinerConfig,
    pub params: ParamSet,
    scene_modes: ParamId,
    point_mlp: Mlp,
    w_point: ParamId,
    w_agent: ParamId,
    b_fuse: ParamId,
    attn: Vec<Attention>,
}

/// Graph outputs of one forward pass.
struct Forward {
    /// `[L * A, 2]` recombined endpoints, row `l * A + a`.
    out: Var,
    /// `[L * A, K]` selection weights.
    weights: Var,
}

impl Recombiner {
    pub fn new(config: RecombinerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParamSet::new();
        let d = config.dim;
        let scene_modes = ps.add_uniform("rec.scene_modes", &[config.l, d], d, &mut rng);
        let point_mlp = Mlp::new(&mut ps, "rec.point", &[POINT_INPUTS, d, d], true, &mut rng);
        let fan = d + config.enc_dim;
        let w_point = ps.add_uniform("rec.fuse.wp", &[d, d], fan, &mut rng);
        let w_agent = ps.add_uniform("rec.fuse.wa", &[config.enc_dim, d], fan, &mut rng);
        let b_fuse = ps.add_uniform("rec.fuse.b", &[d], fan, &mut rng);
        let attn = (0..config.layers).map(|i| Attention::new(&mut ps, &format!("rec.attn{i}"), d, d, &mut rng)).collect();
        Ok(Recombiner { config, params: ps, scene_modes, point_mlp, w_point, w_agent, b_fuse, attn })
    }

    fn check_input(&self, input: &RecombinerInput) -> Result<()> {
        let a = input.marginal.num_agents();
        if input.marginal.k() != self.config.k {
            return Err(invalid("recombine", format!("expected K = {}, got {}", self.config.k, input.marginal.k())));
        }
        if input.encodings.shape() != [a, self.config.enc_dim] || input.anchors.len() != a {
            return Err(Error::Shape { op: "recombine", left: vec![a, self.config.enc_dim], right: input.encodings.shape().to_vec() });
        }
        Ok(())
    }

    fn forward(&self, g: &mut Graph, input: &RecombinerInput, hard: bool) -> Result<Forward> {
        self.check_input(input)?;
        let (a, k, l) = (input.marginal.num_agents(), self.config.k, self.config.l);
        let ps = &self.params;
        // Agent modality encodings, row a * K + k.
        let mut feats = Vec::with_capacity(a * k * POINT_INPUTS);
        for (ai, ends) in input.marginal.endpoints.iter().enumerate() {
            let conf = relative_confidence(&input.marginal, ai);
            for (p, c) in ends.iter().zip(conf) {
                feats.extend_from_slice(&point_features(&input.anchors[ai], *p));
                feats.push(c);
            }
        }
        let x = g.constant(Tensor::new(vec![a * k, POINT_INPUTS], feats)?);
        let h = self.point_mlp.forward(g, ps, x)?;
        let wp = g.param(ps, self.w_point);
        let hp = g.matmul(h, wp)?;
        let enc = g.constant(input.encodings.clone());
        let wa = g.param(ps, self.w_agent);
        let ha = g.matmul(enc, wa)?;
        let owners: Vec<usize> = (0..a * k).map(|r| r / k).collect();
        let ha = g.gather(ha, &owners)?;
        let fused = g.add(hp, ha)?;
        let b = g.param(ps, self.b_fuse);
        let fused = g.add_bias(fused, b)?;
        let modes = g.relu(fused);

        let mut s = g.param(ps, self.scene_modes);
        if !self.attn.is_empty() {
            for att in &self.attn {
                let (kt, v) = att.project_context(g, ps, modes)?;
                s = att.attend(g, ps, s, kt, v)?;
            }
        }
        let modes_t = g.transpose(modes)?;
        let scores = g.matmul(s, modes_t)?;
        let scores = g.reshape(scores, &[l * a, k])?;
        let scores = g.scale(scores, 1.0 / self.config.temperature);
        let weights = if hard {
            let sv = g.value(scores);
            let mut onehot = vec![0.0; l * a * k];
            for r in 0..l * a {
                let row = sv.row(r);
                let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                onehot[r * k + best] = 1.0;
            }
            g.constant(Tensor::new(vec![l * a, k], onehot)?)
        } else {
            g.softmax(scores, 1)?
        };
        // Endpoint coordinates broadcast to every scene modality.
        let mut px = Vec::with_capacity(l * a * k);
        let mut py = Vec::with_capacity(l * a * k);
        for _ in 0..l {
            for ends in &input.marginal.endpoints {
                px.extend(ends.iter().map(|p| p[0]));
                py.extend(ends.iter().map(|p| p[1]));
            }
        }
        let ones = g.constant(Tensor::new(vec![k, 1], vec![1.0; k])?);
        let mut cols = Vec::with_capacity(2);
        for coords in [px, py] {
            let c = g.constant(Tensor::new(vec![l * a, k], coords)?);
            let wc = g.mul(weights, c)?;
            cols.push(g.matmul(wc, ones)?);
        }
        let out = g.concat(&cols, 1)?;
        Ok(Forward { out, weights })
    }

    /// Joint `A x L` set from a marginal set; confidences are the
    /// selection-weighted marginal confidences when those are present.
    pub fn recombine(&self, input: &RecombinerInput) -> Result<ModalitySet> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, input, self.config.hard)?;
        let (a, l, k) = (input.marginal.num_agents(), self.config.l, self.config.k);
        let out = g.value(f.out);
        let w = g.value(f.weights);
        let mut endpoints = vec![Vec::with_capacity(l); a];
        for li in 0..l {
            for (ai, e) in endpoints.iter_mut().enumerate() {
                let r = out.row(li * a + ai);
                e.push([r[0], r[1]]);
            }
        }
        let mut set = ModalitySet::new(Orientation::Joint, input.marginal.agents.clone(), endpoints)?;
        if let Some(conf) = &input.marginal.confidence {
            let mut c = vec![vec![0.0; l]; a];
            for li in 0..l {
                for ai in 0..a {
                    let row = w.row(li * a + ai);
                    c[ai][li] = (0..k).map(|j| row[j] * conf[ai][j]).sum();
                }
            }
            set.confidence = Some(c);
        }
        Ok(set)
    }

    /// Selection weights `[L][A][K]`.
    pub fn selection_weights(&self, input: &RecombinerInput) -> Result<Vec<Vec<Vec<f64>>>> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, input, self.config.hard)?;
        let (a, l) = (input.marginal.num_agents(), self.config.l);
        let w = g.value(f.weights);
        Ok((0..l).map(|li| (0..a).map(|ai| w.row(li * a + ai).to_vec()).collect()).collect())
    }

    /// Winner-take-all joint loss: min over scene modalities of the mean
    /// endpoint distance over agents with ground truth.
    fn loss(&self, g: &mut Graph, input: &RecombinerInput, gt: &[Option<Point>]) -> Result<Option<Var>> {
        let f = self.forward(g, input, false)?;
        let (a, l) = (input.marginal.num_agents(), self.config.l);
        let scored: Vec<usize> = (0..a).filter(|i| gt[*i].is_some()).collect();
        if scored.is_empty() {
            return Ok(None);
        }
        let n = scored.len();
        let rows: Vec<usize> = (0..l).flat_map(|li| scored.iter().map(move |ai| li * a + ai)).collect();
        let pred = g.gather(f.out, &rows)?;
        let target: Vec<f64> = (0..l).flat_map(|_| scored.iter().flat_map(|ai| gt[*ai].unwrap())).collect();
        let target = g.constant(Tensor::new(vec![l * n, 2], target)?);
        let diff = g.sub(pred, target)?;
        let dist = g.row_norm(diff)?;
        let dist = g.reshape(dist, &[l, n])?;
        let per_mode = g.mean_axis(dist, 1)?;
        Ok(Some(g.min(per_mode)?))
    }

    /// Loss value only.
    pub fn scene_loss(&self, input: &RecombinerInput, gt: &[Option<Point>]) -> Result<Option<f64>> {
        let mut g = Graph::new();
        Ok(self.loss(&mut g, input, gt)?.map(|v| g.value(v).item()))
    }

    /// Loss value with gradients accumulated into the parameters.
    pub fn scene_loss_backward(&mut self, input: &RecombinerInput, gt: &[Option<Point>]) -> Result<Option<f64>> {
        let mut g = Graph::new();
        let Some(loss) = self.loss(&mut g, input, gt)? else {
            return Ok(None);
        };
        g.backward(loss, &mut self.params)?;
        Ok(Some(g.value(loss).item()))
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        let meta = serde_json::json!({ "kind": "recombiner", "config": self.config });
        self.params.write_checkpoint_with_meta(w, &meta)
    }

    pub fn load<R: BufRead>(r: R) -> Result<Self> {
        let (params, meta) = ParamSet::read_checkpoint_with_meta(r)?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("recombiner") {
            return Err(Error::Format("not a recombiner checkpoint".into()));
        }
        let mut model = Recombiner::new(serde_json::from_value(meta["config"].clone())?)?;
        model.params.load_values(&params)?;
        Ok(model)
    }
}

/// Scene modality order, best first: descending mean over agents of the
/// selection-weighted marginal confidences, ties by index.
pub fn rank_joint_modalities(joint_confidence: &[Vec<f64>]) -> Vec<usize> {
    let l = joint_confidence.first().map_or(0, Vec::len);
    let a = joint_confidence.len().max(1) as f64;
    let score: Vec<f64> = (0..l).map(|li| joint_confidence.iter().map(|c| c[li]).sum::<f64>() / a).collect();
    let mut idx: Vec<usize> = (0..l).collect();
    idx.sort_by(|&x, &y| score[y].total_cmp(&score[x]).then(x.cmp(&y)));
    idx
}

/// Reorders the scene modalities of a joint set.
pub fn reorder_modalities(set: &ModalitySet, order: &[usize]) -> ModalitySet {
    let pick = |row: &Vec<Point>| order.iter().map(|&i| row[i]).collect::<Vec<_>>();
    let mut out = set.clone();
    out.endpoints = set.endpoints.iter().map(pick).collect();
    out.confidence = set.confidence.as_ref().map(|c| c.iter().map(|r| order.iter().map(|&i| r[i]).collect()).collect());
    out.trajectories = set.trajectories.as_ref().map(|t| t.iter().map(|r| order.iter().map(|&i| r[i].clone()).collect()).collect());
    out.degenerate = set.degenerate.iter().map(|r| order.iter().map(|&i| r.get(i).copied().unwrap_or(false)).collect()).collect();
    out.collision_possible = order.iter().map(|&i| set.collision_possible.get(i).copied().unwrap_or(false)).collect();
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecombinerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for RecombinerTrainConfig {
    fn default() -> Self {
        RecombinerTrainConfig { epochs: 16, batch_size: 32, schedule: LrSchedule::halving(), seed: 0 }
    }
}

/// Trains on precomputed marginal sets and frozen encodings; `gt[i][a]` is
/// the ground-truth endpoint of agent `a` in example `i`.
pub fn train_recombiner(
    model: &mut Recombiner,
    inputs: &[RecombinerInput],
    gt: &[Vec<Option<Point>>],
    cfg: &RecombinerTrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    if inputs.len() != gt.len() || cfg.batch_size == 0 {
        return Err(Error::Config("one ground-truth row per input and a positive batch size are required".into()));
    }
    let mut adam = Adam::new(&model.params, cfg.schedule.clone());
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        adam.set_epoch(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            model.params.zero_grad();
            let mut used = 0;
            for &i in batch {
                if let Some(v) = model.scene_loss_backward(&inputs[i], &gt[i])? {
                    if !v.is_finite() {
                        return Err(Error::Diverged { epoch, step, loss: v });
                    }
                    total += v;
                    used += 1;
                }
            }
            if used == 0 {
                continue;
            }
            count += used;
            model.params.scale_grads(1.0 / used as f64);
            adam.step_allow_missing(&mut model.params)?;
        }
        let mean = total / count.max(1) as f64;
        report.epoch_losses.push(mean);
        on_epoch(epoch, mean);
    }
    report.steps = adam.steps();
    Ok(report)
}
