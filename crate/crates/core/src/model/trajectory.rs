use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::decoder::TrainReport;
use super::features::{COORD_SCALE, SPEED_SCALE};
use crate::error::{Error, Result};
use crate::math::nn::Mlp;
use crate::math::{Adam, Graph, LrSchedule, ParamSet, Tensor};
use crate::scene::geometry::{self, Point};
use crate::scene::{AgentTrack, Frame, Scene, FUTURE_LEN, HISTORY_LEN};

const INPUTS: usize = HISTORY_LEN * 6 + 2;
const OUTPUTS: usize = FUTURE_LEN * 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub hidden: usize,
    pub seed: u64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig { hidden: 128, seed: 0 }
    }
}

/// MLP from (history, endpoint) to the full future, all expressed in the
/// agent's current heading frame.
#[derive(Clone, Debug)]
pub struct TrajectoryModel {
    pub config: TrajectoryConfig,
    pub params: ParamSet,
    mlp: Mlp,
}

fn to_local(cur: &Frame, p: Point) -> Point {
    geometry::rotate(geometry::sub(p, cur.pos), -cur.yaw)
}

/// Network input for one agent.
fn inputs(agent: &AgentTrack, endpoint: Point) -> Vec<f64> {
    let cur = *agent.current();
    let mut x = Vec::with_capacity(INPUTS);
    let skip = agent.history.len().saturating_sub(HISTORY_LEN);
    for _ in agent.history.len()..HISTORY_LEN {
        x.extend_from_slice(&[0.0; 6]);
    }
    for f in agent.history.iter().skip(skip) {
        if f.present {
            let p = to_local(&cur, f.pos);
            let (s, c) = (f.yaw - cur.yaw).sin_cos();
            x.extend_from_slice(&[p[0] * COORD_SCALE, p[1] * COORD_SCALE, c, s, f.speed * SPEED_SCALE, 1.0]);
        } else {
            x.extend_from_slice(&[0.0; 6]);
        }
    }
    let e = to_local(&cur, endpoint);
    x.extend_from_slice(&[e[0] * COORD_SCALE, e[1] * COORD_SCALE]);
    x
}

impl TrajectoryModel {
    pub fn new(config: TrajectoryConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let h = config.hidden;
        let mlp = Mlp::new(&mut params, "traj", &[INPUTS, h, h, OUTPUTS], false, &mut rng);
        TrajectoryModel { config, params, mlp }
    }

    /// Future positions for each `(agent, endpoint)` pair, in the scene frame.
    pub fn complete_batch(&self, queries: &[(&AgentTrack, Point)]) -> Result<Vec<Vec<Point>>> {
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let rows: Vec<Vec<f64>> = queries.iter().map(|(a, e)| inputs(a, *e)).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&rows)?);
        let y = self.mlp.forward(&mut g, &self.params, x)?;
        let out = g.value(y);
        Ok(queries
            .iter()
            .enumerate()
            .map(|(i, (a, _))| {
                let cur = a.current();
                out.row(i)
                    .chunks(2)
                    .map(|c| geometry::add(cur.pos, geometry::rotate([c[0] / COORD_SCALE, c[1] / COORD_SCALE], cur.yaw)))
                    .collect()
            })
            .collect())
    }

    /// `FUTURE_LEN` positions ending near `endpoint`.
    pub fn complete_trajectory(&self, agent: &AgentTrack, endpoint: Point) -> Result<Vec<Point>> {
        Ok(self.complete_batch(&[(agent, endpoint)])?.remove(0))
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        let meta = serde_json::json!({ "kind": "trajectory", "config": self.config });
        self.params.write_checkpoint_with_meta(w, &meta)
    }

    pub fn load<R: BufRead>(r: R) -> Result<Self> {
        let (params, meta) = ParamSet::read_checkpoint_with_meta(r)?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("trajectory") {
            return Err(Error::Format("not a trajectory checkpoint".into()));
        }
        let mut model = TrajectoryModel::new(serde_json::from_value(meta["config"].clone())?);
        model.params.load_values(&params)?;
        Ok(model)
    }
}

/// Agents with a full future, as `(scene index, agent index)`.
fn supervised(scenes: &[Scene]) -> Vec<(usize, usize)> {
    scenes
        .iter()
        .enumerate()
        .flat_map(|(si, s)| {
            s.agents
                .iter()
                .enumerate()
                .filter(|(_, a)| a.is_present() && a.future.as_ref().is_some_and(|f| f.len() == FUTURE_LEN))
                .map(move |(ai, _)| (si, ai))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectoryTrainConfig {
    pub epochs: usize,
    /// Agents per optimizer step.
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for TrajectoryTrainConfig {
    fn default() -> Self {
        TrajectoryTrainConfig { epochs: 16, batch_size: 32, schedule: LrSchedule::halving(), seed: 0 }
    }
}

/// Fits the MLP to ground-truth futures given ground-truth endpoints (MSE in
/// scaled agent-frame coordinates).
pub fn train_trajectory(
    model: &mut TrajectoryModel,
    scenes: &[Scene],
    cfg: &TrajectoryTrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut items = supervised(scenes);
    let mut adam = Adam::new(&model.params, cfg.schedule.clone());
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        adam.set_epoch(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        items.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for (step, batch) in items.chunks(cfg.batch_size).enumerate() {
            let mut xs = Vec::with_capacity(batch.len());
            let mut ys = Vec::with_capacity(batch.len());
            for &(si, ai) in batch {
                let a = &scenes[si].agents[ai];
                let fut = a.future.as_ref().unwrap();
                xs.push(inputs(a, fut[FUTURE_LEN - 1]));
                let cur = a.current();
                ys.push(fut.iter().flat_map(|p| {
                    let l = to_local(cur, *p);
                    [l[0] * COORD_SCALE, l[1] * COORD_SCALE]
                }).collect::<Vec<f64>>());
            }
            let mut g = Graph::new();
            let x = g.constant(Tensor::from_rows(&xs)?);
            let y = g.constant(Tensor::from_rows(&ys)?);
            let pred = model.mlp.forward(&mut g, &model.params, x)?;
            let loss = g.mse(pred, y)?;
            let v = g.value(loss).item();
            if !v.is_finite() {
                return Err(Error::Diverged { epoch, step, loss: v });
            }
            model.params.zero_grad();
            g.backward(loss, &mut model.params)?;
            adam.step(&mut model.params)?;
            total += v;
            batches += 1;
        }
        let mean = total / batches.max(1) as f64;
        report.epoch_losses.push(mean);
        on_epoch(epoch, mean);
    }
    report.steps = adam.steps();
    Ok(report)
}

/// Mean ground-truth-endpoint trajectory MSE (meters squared per coordinate)
/// and mean endpoint drift `|out[T-1] - endpoint|` over all supervised agents.
pub fn evaluate_trajectory(model: &TrajectoryModel, scenes: &[Scene]) -> Result<(f64, f64)> {
    let items = supervised(scenes);
    let (mut se, mut drift) = (0.0, 0.0);
    for chunk in items.chunks(256) {
        let queries: Vec<(&AgentTrack, Point)> = chunk
            .iter()
            .map(|&(si, ai)| {
                let a = &scenes[si].agents[ai];
                (a, a.endpoint().unwrap())
            })
            .collect();
        let outs = model.complete_batch(&queries)?;
        for ((a, e), out) in queries.iter().zip(&outs) {
            let fut = a.future.as_ref().unwrap();
            se += out.iter().zip(fut).map(|(p, q)| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sum::<f64>()
                / (2 * FUTURE_LEN) as f64;
            drift += geometry::dist(out[FUTURE_LEN - 1], *e);
        }
    }
    let n = items.len().max(1) as f64;
    Ok((se / n, drift / n))
}
