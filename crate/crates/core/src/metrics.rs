//! Marginal, joint and collision metrics over endpoint predictions.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::sampler::ModalitySet;
use crate::scene::geometry::{self, Point};
use crate::scene::Scene;

pub const LATERAL_THRESHOLD: f64 = 1.0;

/// Longitudinal miss threshold for ground-truth speed `v` (m/s).
pub fn longitudinal_threshold(v: f64) -> Result<f64> {
    if !(v >= 0.0) {
        return Err(invalid("longitudinal_threshold", format!("speed must be >= 0, got {v}")));
    }
    Ok(if v < 1.4 {
        1.0
    } else if v <= 11.0 {
        1.0 + (v - 1.4) / (11.0 - 1.4)
    } else {
        2.0
    })
}

/// Miss test in the ground-truth heading frame.
pub fn is_miss(pred: Point, gt: Point, heading: f64, speed: f64) -> Result<bool> {
    let e = geometry::rotate(geometry::sub(pred, gt), -heading);
    Ok(e[1].abs() > LATERAL_THRESHOLD || e[0].abs() > longitudinal_threshold(speed)?)
}

/// Ground truth needed to score one agent.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub endpoint: Point,
    /// Final heading, radians.
    pub heading: f64,
    /// Speed over the last future step, m/s.
    pub speed: f64,
    pub future: Vec<Point>,
}

impl GroundTruth {
    pub fn new(future: Vec<Point>, heading: f64, speed: f64) -> Self {
        GroundTruth { endpoint: *future.last().expect("non-empty future"), heading, speed, future }
    }
}

/// Ground truth for each agent of `pred`, `None` where unavailable.
pub fn ground_truth(scene: &Scene, agents: &[u32]) -> Vec<Option<GroundTruth>> {
    agents
        .iter()
        .map(|id| {
            let a = scene.agent(*id)?;
            let fut = a.future.clone().filter(|f| !f.is_empty())?;
            let (heading, speed) = a.final_heading_speed()?;
            Some(GroundTruth::new(fut, heading, speed))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MarginalMetrics {
    pub ade: Option<f64>,
    pub fde: f64,
    /// Percent.
    pub mr: f64,
    pub agents: usize,
    /// Agents skipped for lack of ground truth.
    pub excluded: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct JointMetrics {
    pub ade: Option<f64>,
    pub fde: f64,
    /// Percent.
    pub mr: f64,
    pub agents: usize,
    pub excluded: usize,
}

/// Per-(agent, modality) errors for the agents that have ground truth.
struct ErrorTable {
    fde: Vec<Vec<f64>>,
    ade: Option<Vec<Vec<f64>>>,
    miss: Vec<Vec<bool>>,
    /// Row of `pred` for each table row.
    rows: Vec<usize>,
    excluded: usize,
}

fn error_table(pred: &ModalitySet, gt: &[Option<GroundTruth>]) -> Result<ErrorTable> {
    if gt.len() != pred.num_agents() {
        return Err(invalid("metrics", format!("{} ground-truth entries for {} agents", gt.len(), pred.num_agents())));
    }
    let k = pred.k();
    let mut t = ErrorTable { fde: vec![], ade: pred.trajectories.as_ref().map(|_| vec![]), miss: vec![], rows: vec![], excluded: 0 };
    for (a, g) in gt.iter().enumerate() {
        let Some(g) = g else {
            t.excluded += 1;
            continue;
        };
        t.rows.push(a);
        t.fde.push((0..k).map(|j| geometry::dist(pred.endpoint(a, j), g.endpoint)).collect());
        t.miss.push((0..k).map(|j| is_miss(pred.endpoint(a, j), g.endpoint, g.heading, g.speed)).collect::<Result<_>>()?);
        if let (Some(ade), Some(trajs)) = (t.ade.as_mut(), pred.trajectories.as_ref()) {
            ade.push(
                (0..k)
                    .map(|j| {
                        let tr = &trajs[a][j];
                        let n = tr.len().min(g.future.len()).max(1);
                        tr.iter().zip(&g.future).map(|(p, q)| geometry::dist(*p, *q)).sum::<f64>() / n as f64
                    })
                    .collect(),
            );
        }
    }
    Ok(t)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 { 0.0 } else { s / n as f64 }
}

fn min(v: impl Iterator<Item = f64>) -> f64 {
    v.fold(f64::INFINITY, f64::min)
}

/// Per-agent best modality, then averaged over agents.
pub fn marginal_metrics(pred: &ModalitySet, gt: &[Option<GroundTruth>]) -> Result<MarginalMetrics> {
    let t = error_table(pred, gt)?;
    let mr = mean(t.miss.iter().map(|m| if m.iter().all(|x| *x) { 100.0 } else { 0.0 }));
    Ok(MarginalMetrics {
        ade: t.ade.as_ref().map(|a| mean(a.iter().map(|r| min(r.iter().copied())))),
        fde: mean(t.fde.iter().map(|r| min(r.iter().copied()))),
        mr,
        agents: t.rows.len(),
        excluded: t.excluded,
    })
}

fn joint_from_table(t: &ErrorTable, k: usize, forced_miss: &[bool]) -> JointMetrics {
    let col_mean = |m: &Vec<Vec<f64>>, j: usize| mean(m.iter().map(|r| r[j]));
    let per_k_miss = |j: usize| {
        if forced_miss[j] {
            100.0
        } else {
            mean(t.miss.iter().map(|r| if r[j] { 100.0 } else { 0.0 }))
        }
    };
    let empty = t.rows.is_empty();
    JointMetrics {
        ade: t.ade.as_ref().map(|a| if empty { 0.0 } else { min((0..k).map(|j| col_mean(a, j))) }),
        fde: if empty { 0.0 } else { min((0..k).map(|j| col_mean(&t.fde, j))) },
        mr: if empty { 0.0 } else { min((0..k).map(per_k_miss)) },
        agents: t.rows.len(),
        excluded: t.excluded,
    }
}

/// Agent average per scene modality, then the best modality.
pub fn joint_metrics(pred: &ModalitySet, gt: &[Option<GroundTruth>]) -> Result<JointMetrics> {
    let t = error_table(pred, gt)?;
    Ok(joint_from_table(&t, pred.k(), &vec![false; pred.k()]))
}

/// Whether any two agents of modality `k` are closer than `d_col`.
pub fn modality_collides(pred: &ModalitySet, k: usize, d_col: f64) -> bool {
    let pts = pred.modality(k);
    (0..pts.len()).any(|i| (0..i).any(|j| geometry::dist(pts[i], pts[j]) < d_col))
}

/// Col (% of colliding modalities) and cMR (JointMR with colliding
/// modalities counted as full misses).
pub fn collision_metrics(pred: &ModalitySet, gt: &[Option<GroundTruth>], d_col: f64) -> Result<(f64, f64)> {
    let k = pred.k();
    let colliding: Vec<bool> = (0..k).map(|j| modality_collides(pred, j, d_col)).collect();
    let col = mean(colliding.iter().map(|c| if *c { 100.0 } else { 0.0 }));
    let t = error_table(pred, gt)?;
    Ok((col, joint_from_table(&t, k, &colliding).mr))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Collision distance between endpoints, meters.
    pub d_col: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { d_col: 2.0 }
    }
}

/// All metrics of one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene: u64,
    pub marginal: MarginalMetrics,
    pub joint: JointMetrics,
    /// Percent.
    pub col: f64,
    /// Percent.
    pub cmr: f64,
}

pub fn evaluate_scene(scene: &Scene, pred: &ModalitySet, cfg: &MetricsConfig) -> Result<SceneMetrics> {
    let gt = ground_truth(scene, &pred.agents);
    let (col, cmr) = collision_metrics(pred, &gt, cfg.d_col)?;
    Ok(SceneMetrics {
        scene: scene.id,
        marginal: marginal_metrics(pred, &gt)?,
        joint: joint_metrics(pred, &gt)?,
        col,
        cmr,
    })
}

/// Scene-averaged value of one metric.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub value: f64,
    pub scenes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub m_ade: Option<Summary>,
    pub m_fde: Summary,
    pub mr: Summary,
    pub joint_ade: Option<Summary>,
    pub joint_fde: Summary,
    pub joint_mr: Summary,
    pub col: Summary,
    pub cmr: Summary,
    /// Agents excluded for lack of ground truth, summed over scenes.
    pub excluded_agents: usize,
    pub scenes: Vec<SceneMetrics>,
}

impl EvalReport {
    /// Averages per-scene metrics in the given order; scenes without any
    /// scorable agent are left out.
    pub fn from_scenes(scenes: Vec<SceneMetrics>) -> Self {
        let used: Vec<&SceneMetrics> = scenes.iter().filter(|s| s.marginal.agents > 0).collect();
        let n = used.len();
        let avg = |f: &dyn Fn(&SceneMetrics) -> f64| Summary { value: mean(used.iter().map(|s| f(s))), scenes: n };
        let avg_opt = |f: &dyn Fn(&SceneMetrics) -> Option<f64>| {
            let vals: Option<Vec<f64>> = used.iter().map(|s| f(s)).collect();
            vals.filter(|v| !v.is_empty()).map(|v| Summary { value: mean(v.into_iter()), scenes: n })
        };
        EvalReport {
            m_ade: avg_opt(&|s| s.marginal.ade),
            m_fde: avg(&|s| s.marginal.fde),
            mr: avg(&|s| s.marginal.mr),
            joint_ade: avg_opt(&|s| s.joint.ade),
            joint_fde: avg(&|s| s.joint.fde),
            joint_mr: avg(&|s| s.joint.mr),
            col: avg(&|s| s.col),
            cmr: avg(&|s| s.cmr),
            excluded_agents: scenes.iter().map(|s| s.marginal.excluded).sum(),
            scenes,
        }
    }

    /// One row per report, columns `mADE mFDE MR | jointADE jointFDE JointMR Col cMR`.
    pub fn table(rows: &[(&str, &EvalReport)]) -> String {
        let fmt_opt = |v: Option<Summary>| v.map_or("-".to_string(), |s| format!("{:.2}", s.value));
        let mut out = String::new();
        let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
        let _ = writeln!(
            out,
            "{:<width$}  {:>6} {:>6} {:>6} | {:>8} {:>8} {:>8} {:>6} {:>6}",
            "model", "mADE", "mFDE", "MR", "jointADE", "jointFDE", "JointMR", "Col", "cMR"
        );
        for (name, r) in rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>6} {:>6.2} {:>6.1} | {:>8} {:>8.2} {:>8.1} {:>6.1} {:>6.1}",
                name,
                fmt_opt(r.m_ade),
                r.m_fde.value,
                r.mr.value,
                fmt_opt(r.joint_ade),
                r.joint_fde.value,
                r.joint_mr.value,
                r.col.value,
                r.cmr.value
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::Orientation;

    #[test]
    fn threshold_anchors() {
        assert_eq!(longitudinal_threshold(1.4).unwrap(), 1.0);
        assert_eq!(longitudinal_threshold(11.0).unwrap(), 2.0);
        assert!((longitudinal_threshold(6.2).unwrap() - 1.5).abs() < 1e-12);
        assert_eq!(longitudinal_threshold(0.0).unwrap(), 1.0);
        assert_eq!(longitudinal_threshold(30.0).unwrap(), 2.0);
        assert!(longitudinal_threshold(-0.1).is_err());
    }

    #[test]
    fn miss_examples() {
        assert!(!is_miss([3.0, 4.0], [3.0, 4.0], 0.3, 5.0).unwrap());
        assert!(is_miss([0.0, 1.5], [0.0, 0.0], 0.0, 5.0).unwrap());
        assert!(!is_miss([0.9, 0.0], [0.0, 0.0], 0.0, 0.0).unwrap());
        // Heading north: a 1.5 m error along x is lateral.
        assert!(is_miss([1.5, 0.0], [0.0, 0.0], std::f64::consts::FRAC_PI_2, 11.0).unwrap());
        assert!(!is_miss([0.0, 1.5], [0.0, 0.0], std::f64::consts::FRAC_PI_2, 11.0).unwrap());
    }

    fn gt_at(p: Point) -> Option<GroundTruth> {
        Some(GroundTruth::new(vec![p], 0.0, 5.0))
    }

    #[test]
    fn two_by_two_fixture() {
        // Agent 0 FDEs [1, 3]; agent 1 FDEs [3, 1].
        let set = ModalitySet::new(
            Orientation::Joint,
            vec![0, 1],
            vec![vec![[1.0, 0.0], [3.0, 0.0]], vec![[103.0, 0.0], [101.0, 0.0]]],
        )
        .unwrap();
        let gt = vec![gt_at([0.0, 0.0]), gt_at([100.0, 0.0])];
        assert_eq!(marginal_metrics(&set, &gt).unwrap().fde, 1.0);
        assert_eq!(joint_metrics(&set, &gt).unwrap().fde, 2.0);
    }

    #[test]
    fn one_collision_in_six() {
        let mut ends = vec![vec![], vec![]];
        for k in 0..6 {
            ends[0].push([k as f64 * 10.0, 0.0]);
            ends[1].push(if k == 2 { [20.0, 0.0] } else { [k as f64 * 10.0, 50.0] });
        }
        let set = ModalitySet::new(Orientation::Joint, vec![0, 1], ends).unwrap();
        let gt = vec![gt_at([0.0, 0.0]), gt_at([0.0, 50.0])];
        let (col, cmr) = collision_metrics(&set, &gt, 2.0).unwrap();
        assert!((col - 100.0 / 6.0).abs() < 1e-9);
        assert!(cmr >= joint_metrics(&set, &gt).unwrap().mr);
    }
}
