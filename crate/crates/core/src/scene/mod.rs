//! Lane graphs, agent tracks and scenes.
//!
//! Normalized frames use x forward, y left, with the reference agent at the
//! origin facing +x.

pub mod generator;
pub mod geometry;
pub mod io;

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use generator::{generate_scene, GeneratorConfig, Template};
pub use geometry::Point;

/// History length in frames (1 s at 10 Hz).
pub const HISTORY_LEN: usize = 10;
/// Future length in frames (3 s at 10 Hz).
pub const FUTURE_LEN: usize = 30;
/// Seconds between frames.
pub const FRAME_DT: f64 = 0.1;
pub const MAX_LANE_POINTS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanePolyline {
    pub id: u32,
    pub pts: Vec<Point>,
    #[serde(default)]
    pub pred: Vec<u32>,
    #[serde(default)]
    pub succ: Vec<u32>,
    #[serde(default)]
    pub left: Vec<u32>,
    #[serde(default)]
    pub right: Vec<u32>,
}

/// One observed frame. Absent frames carry an all-zero payload.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 5]", into = "[f64; 5]")]
pub struct Frame {
    pub pos: Point,
    pub yaw: f64,
    pub speed: f64,
    pub present: bool,
}

impl Frame {
    pub const ABSENT: Frame = Frame { pos: [0.0, 0.0], yaw: 0.0, speed: 0.0, present: false };

    pub fn to_array(self) -> [f64; 5] {
        [self.pos[0], self.pos[1], self.yaw, self.speed, if self.present { 1.0 } else { 0.0 }]
    }
}

impl From<[f64; 5]> for Frame {
    fn from(a: [f64; 5]) -> Self {
        Frame { pos: [a[0], a[1]], yaw: a[2], speed: a[3], present: a[4] != 0.0 }
    }
}

impl From<Frame> for [f64; 5] {
    fn from(f: Frame) -> Self {
        f.to_array()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub id: u32,
    #[serde(rename = "hist")]
    pub history: Vec<Frame>,
    #[serde(rename = "fut", default, skip_serializing_if = "Option::is_none")]
    pub future: Option<Vec<Point>>,
}

impl AgentTrack {
    /// Frame at prediction time (last history frame).
    pub fn current(&self) -> &Frame {
        self.history.last().expect("history is never empty")
    }

    pub fn is_present(&self) -> bool {
        self.history.last().is_some_and(|f| f.present)
    }

    pub fn endpoint(&self) -> Option<Point> {
        self.future.as_ref().and_then(|f| f.last().copied())
    }

    /// Heading and speed over the last future step.
    pub fn final_heading_speed(&self) -> Option<(f64, f64)> {
        let fut = self.future.as_ref()?;
        let n = fut.len();
        if n < 2 {
            return None;
        }
        let d = geometry::sub(fut[n - 1], fut[n - 2]);
        let speed = geometry::norm(d) / FRAME_DT;
        let heading = if speed > 1e-3 {
            d[1].atan2(d[0])
        } else {
            let to_end = geometry::sub(fut[n - 1], self.current().pos);
            if geometry::norm(to_end) > 1e-3 {
                to_end[1].atan2(to_end[0])
            } else {
                self.current().yaw
            }
        };
        Some((heading, speed))
    }
}

/// Rigid transform from world coordinates into a scene frame:
/// `p_frame = R(-heading) (p_world - origin)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub origin: Point,
    pub heading: f64,
}

impl Default for RigidTransform {
    fn default() -> Self {
        RigidTransform { origin: [0.0, 0.0], heading: 0.0 }
    }
}

impl RigidTransform {
    pub fn apply(&self, p: Point) -> Point {
        geometry::rotate(geometry::sub(p, self.origin), -self.heading)
    }

    pub fn invert(&self, p: Point) -> Point {
        geometry::add(geometry::rotate(p, self.heading), self.origin)
    }

    pub fn apply_yaw(&self, yaw: f64) -> f64 {
        geometry::wrap_angle(yaw - self.heading)
    }

    pub fn invert_yaw(&self, yaw: f64) -> f64 {
        geometry::wrap_angle(yaw + self.heading)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub lanes: Vec<LanePolyline>,
    pub agents: Vec<AgentTrack>,
    #[serde(rename = "ref", default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<u32>,
    /// World-to-scene transform; identity for world-frame scenes.
    #[serde(rename = "tf", default)]
    pub transform: RigidTransform,
}

#[derive(Clone, Copy, Debug)]
pub enum ReferenceMode {
    /// Agent closest to the barycenter of current positions; ties go to the lowest id.
    Barycenter,
    /// Uniform draw among present agents.
    Random(u64),
}

impl Scene {
    pub fn agent(&self, id: u32) -> Option<&AgentTrack> {
        self.agents.iter().find(|a| a.id == id)
    }

    pub fn lane(&self, id: u32) -> Option<&LanePolyline> {
        self.lanes.iter().find(|l| l.id == id)
    }

    /// Checks structural invariants.
    pub fn validate(&self) -> Result<()> {
        let ids: BTreeSet<u32> = self.lanes.iter().map(|l| l.id).collect();
        if ids.len() != self.lanes.len() {
            return Err(Error::Format(format!("scene {}: duplicate lanelet ids", self.id)));
        }
        for l in &self.lanes {
            if l.pts.is_empty() || l.pts.len() > MAX_LANE_POINTS {
                return Err(Error::Format(format!("lanelet {} has {} points", l.id, l.pts.len())));
            }
            for r in l.pred.iter().chain(&l.succ).chain(&l.left).chain(&l.right) {
                if !ids.contains(r) {
                    return Err(Error::Format(format!("lanelet {} references missing {}", l.id, r)));
                }
            }
            for s in &l.succ {
                if !self.lane(*s).is_some_and(|o| o.pred.contains(&l.id)) {
                    return Err(Error::Format(format!("lanelet {} -> {} lacks inverse", l.id, s)));
                }
            }
            for p in &l.pred {
                if !self.lane(*p).is_some_and(|o| o.succ.contains(&l.id)) {
                    return Err(Error::Format(format!("lanelet {} <- {} lacks inverse", l.id, p)));
                }
            }
        }
        let agent_ids: BTreeSet<u32> = self.agents.iter().map(|a| a.id).collect();
        if agent_ids.len() != self.agents.len() {
            return Err(Error::Format(format!("scene {}: duplicate agent ids", self.id)));
        }
        for a in &self.agents {
            if a.history.len() != HISTORY_LEN {
                return Err(Error::Format(format!("agent {} has {} history frames", a.id, a.history.len())));
            }
            if let Some(f) = &a.future {
                if f.len() != FUTURE_LEN {
                    return Err(Error::Format(format!("agent {} has {} future frames", a.id, f.len())));
                }
            }
            for f in &a.history {
                if !f.present && *f != Frame::ABSENT {
                    return Err(Error::Format(format!("agent {}: absent frame with payload", a.id)));
                }
                if f.speed < 0.0 {
                    return Err(Error::Format(format!("agent {}: negative speed", a.id)));
                }
            }
        }
        Ok(())
    }

    /// Applies `tf` (expressed in this scene's frame) to every coordinate.
    fn map_coords(&self, tf: &RigidTransform) -> Scene {
        let mut out = self.clone();
        for l in &mut out.lanes {
            l.pts.iter_mut().for_each(|p| *p = tf.apply(*p));
        }
        for a in &mut out.agents {
            for f in &mut a.history {
                if f.present {
                    f.pos = tf.apply(f.pos);
                    f.yaw = tf.apply_yaw(f.yaw);
                }
            }
            if let Some(fut) = &mut a.future {
                fut.iter_mut().for_each(|p| *p = tf.apply(*p));
            }
        }
        out
    }

    /// Returns the scene in world coordinates.
    pub fn denormalize(&self) -> Scene {
        let t = self.transform;
        let inverse = RigidTransform { origin: geometry::scale(geometry::rotate(t.origin, -t.heading), -1.0), heading: -t.heading };
        let mut out = self.map_coords(&inverse);
        out.transform = RigidTransform::default();
        out
    }
}

/// Picks the scene reference agent among agents present at prediction time.
pub fn select_reference(scene: &Scene, mode: ReferenceMode) -> Result<u32> {
    let present: Vec<&AgentTrack> = scene.agents.iter().filter(|a| a.is_present()).collect();
    if present.is_empty() {
        return Err(Error::EmptyScene);
    }
    match mode {
        ReferenceMode::Barycenter => {
            let n = present.len() as f64;
            let c = present.iter().fold([0.0, 0.0], |acc, a| geometry::add(acc, a.current().pos));
            let c = geometry::scale(c, 1.0 / n);
            let best = present
                .iter()
                .min_by(|a, b| {
                    let (da, db) = (geometry::dist(a.current().pos, c), geometry::dist(b.current().pos, c));
                    da.partial_cmp(&db).unwrap().then(a.id.cmp(&b.id))
                })
                .unwrap();
            Ok(best.id)
        }
        ReferenceMode::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(present[rng.gen_range(0..present.len())].id)
        }
    }
}

/// Re-expresses the scene in the frame of `reference`: its current position
/// becomes the origin and its current heading becomes zero.
pub fn normalize_scene(scene: &Scene, reference: u32) -> Result<Scene> {
    let agent = scene.agent(reference).ok_or(Error::AgentAbsent(reference))?;
    if !agent.is_present() {
        return Err(Error::AgentAbsent(reference));
    }
    let cur = agent.current();
    let local = RigidTransform { origin: cur.pos, heading: cur.yaw };
    let mut out = scene.map_coords(&local);
    // Compose with the existing world transform.
    let prev = scene.transform;
    out.transform = RigidTransform {
        origin: prev.invert(cur.pos),
        heading: geometry::wrap_angle(prev.heading + cur.yaw),
    };
    out.reference = Some(reference);
    Ok(out)
}

/// Agents used for training: all with a future when at most `max`, else a
/// uniform random subset of size `max`. Returned in ascending id order.
pub fn subsample_training_agents(scene: &Scene, max: usize, seed: u64) -> Vec<u32> {
    let eligible: Vec<u32> = scene.agents.iter().filter(|a| a.future.is_some() && a.is_present()).map(|a| a.id).collect();
    if eligible.len() <= max {
        return eligible;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<u32> = sample(&mut rng, eligible.len(), max).into_iter().map(|i| eligible[i]).collect();
    picked.sort_unstable();
    picked
}
