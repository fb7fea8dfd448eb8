//! Seeded synthetic scenes on parametric maps.
//!
//! Agents follow lane routes at constant speed. A route is fixed per agent,
//! so agents that have not yet reached a junction at prediction time carry a
//! branching future. When two future paths cross within 2 s of each other,
//! the later arrival (ties: lower id first) slows down uniformly so it reaches
//! the conflict point 2 s after the other agent.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geometry::{self, bezier, dist, Point, Polyline};
use super::{
    normalize_scene, select_reference, AgentTrack, Frame, LanePolyline, ReferenceMode, RigidTransform, Scene,
    FRAME_DT, FUTURE_LEN, HISTORY_LEN, MAX_LANE_POINTS,
};
use crate::error::{Error, Result};

pub const LANE_WIDTH: f64 = 3.5;
/// Gap enforced at the conflict point between a yielding agent and the agent it yields to.
pub const YIELD_GAP: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    Straight,
    ThreeWay,
    FourWay,
    Roundabout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub min_agents: usize,
    pub max_agents: usize,
    pub templates: Vec<Template>,
    /// Length of each road arm, meters.
    pub arm_length: f64,
    pub lane_width: f64,
    pub min_speed: f64,
    pub max_speed: f64,
    /// Std-dev of Gaussian noise on observed history positions, meters.
    pub position_noise: f64,
    /// Std-dev of noise on observed yaw, radians.
    pub yaw_noise: f64,
    /// Probability that an agent is untracked for a prefix of its history.
    pub dropout: f64,
    /// Fraction of scenes that get a forced crossing interaction.
    pub interaction_fraction: f64,
    /// Endpoints must stay this far inside the half-range of the output grid.
    pub grid_half_range: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            min_agents: 2,
            max_agents: 6,
            templates: vec![Template::Straight, Template::ThreeWay, Template::FourWay, Template::Roundabout],
            arm_length: 45.0,
            lane_width: LANE_WIDTH,
            min_speed: 3.0,
            max_speed: 10.0,
            position_noise: 0.03,
            yaw_noise: 0.01,
            dropout: 0.1,
            interaction_fraction: 0.5,
            grid_half_range: 96.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.min_agents == 0 || self.min_agents > self.max_agents || self.max_agents > 40 {
            return bad("agent range must satisfy 1 <= min <= max <= 40");
        }
        if self.templates.is_empty() {
            return bad("at least one map template is required");
        }
        if !(self.arm_length >= 20.0 && self.arm_length <= 80.0) {
            return bad("arm_length must lie in [20, 80] m");
        }
        if !(self.lane_width > 1.0 && self.lane_width < 10.0) {
            return bad("lane_width must lie in (1, 10) m");
        }
        if !(self.min_speed > 0.0 && self.min_speed <= self.max_speed && self.max_speed <= 20.0) {
            return bad("speeds must satisfy 0 < min <= max <= 20 m/s");
        }
        if !(self.position_noise >= 0.0 && self.yaw_noise >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.dropout) || !(0.0..=1.0).contains(&self.interaction_fraction) {
            return bad("probabilities must lie in [0, 1]");
        }
        if self.grid_half_range <= 10.0 {
            return bad("grid_half_range must exceed 10 m");
        }
        Ok(())
    }
}

/// Lane graph under construction.
#[derive(Default)]
struct MapBuilder {
    lanes: Vec<LanePolyline>,
}

impl MapBuilder {
    /// Splits a dense path into chained lanelets of at most `MAX_LANE_POINTS`
    /// points spaced about 2 m apart. Returns (first, last) lanelet ids.
    fn add_path(&mut self, path: &[Point]) -> (u32, u32) {
        let dense = Polyline::new(path.to_vec()).resample(2.0);
        let mut first = None;
        let mut prev: Option<u32> = None;
        let mut start = 0;
        while start + 1 < dense.len() {
            let end = (start + MAX_LANE_POINTS - 1).min(dense.len() - 1);
            let id = self.lanes.len() as u32;
            self.lanes.push(LanePolyline {
                id,
                pts: dense[start..=end].to_vec(),
                pred: vec![],
                succ: vec![],
                left: vec![],
                right: vec![],
            });
            if let Some(p) = prev {
                self.link(p, id);
            }
            first.get_or_insert(id);
            prev = Some(id);
            start = end;
        }
        (first.unwrap(), prev.unwrap())
    }

    fn link(&mut self, from: u32, to: u32) {
        if !self.lanes[from as usize].succ.contains(&to) {
            self.lanes[from as usize].succ.push(to);
            self.lanes[to as usize].pred.push(from);
        }
    }

    /// Marks `b` as the left neighbour of `a` (and `a` as the right of `b`).
    fn side_by_side(&mut self, a: u32, b: u32) {
        self.lanes[a as usize].left.push(b);
        self.lanes[b as usize].right.push(a);
    }

    fn polyline(&self, ids: &[u32]) -> Polyline {
        let mut pts: Vec<Point> = Vec::new();
        for id in ids {
            for p in &self.lanes[*id as usize].pts {
                if pts.last().is_none_or(|q| dist(*q, *p) > 1e-9) {
                    pts.push(*p);
                }
            }
        }
        Polyline::new(pts)
    }

    /// Every simple lanelet path from `source` to a lanelet without successors.
    fn routes_from(&self, source: u32) -> Vec<Vec<u32>> {
        let mut out = Vec::new();
        let mut stack = vec![vec![source]];
        while let Some(path) = stack.pop() {
            let last = *path.last().unwrap();
            let succ = &self.lanes[last as usize].succ;
            if succ.is_empty() {
                out.push(path);
                continue;
            }
            for s in succ.iter().rev() {
                if !path.contains(s) {
                    let mut p = path.clone();
                    p.push(*s);
                    stack.push(p);
                }
            }
        }
        out
    }
}

fn connector(p: Point, dir_in: Point, q: Point, dir_out: Point, reach: f64) -> Vec<Point> {
    let c1 = geometry::add(p, geometry::scale(dir_in, reach));
    let c2 = geometry::sub(q, geometry::scale(dir_out, reach));
    (0..=16).map(|i| bezier(p, c1, c2, q, i as f64 / 16.0)).collect()
}

fn unit(angle: f64) -> Point {
    [angle.cos(), angle.sin()]
}

/// Arms radiating from the origin at the given angles; one lane each way,
/// connectors for every turn except U-turns.
fn build_junction(cfg: &GeneratorConfig, arm_angles: &[f64]) -> MapBuilder {
    let mut m = MapBuilder::default();
    let (w, l) = (cfg.lane_width, cfg.arm_length);
    let box_half = 2.0 * w;
    let mut incoming = Vec::new();
    let mut outgoing = Vec::new();
    for &a in arm_angles {
        let u = unit(a);
        let n = unit(a + FRAC_PI_2);
        let off_in = geometry::scale(n, w / 2.0);
        let inc = [geometry::add(geometry::scale(u, l), off_in), geometry::add(geometry::scale(u, box_half), off_in)];
        let out = [
            geometry::sub(geometry::scale(u, box_half), off_in),
            geometry::sub(geometry::scale(u, l), off_in),
        ];
        let (_, inc_last) = m.add_path(&inc);
        let (out_first, _) = m.add_path(&out);
        incoming.push((inc_last, inc[1], geometry::scale(u, -1.0)));
        outgoing.push((out_first, out[0], u));
    }
    for (i, &(inc_id, p, din)) in incoming.iter().enumerate() {
        for (j, &(out_id, q, dout)) in outgoing.iter().enumerate() {
            if i == j {
                continue;
            }
            let path = connector(p, din, q, dout, box_half * 0.6);
            let (f, last) = m.add_path(&path);
            m.link(inc_id, f);
            m.link(last, out_id);
        }
    }
    m
}

fn build_straight(cfg: &GeneratorConfig) -> MapBuilder {
    let mut m = MapBuilder::default();
    let (w, l) = (cfg.lane_width, cfg.arm_length);
    let split = 10.0;
    // direction +1: eastbound lanes at y = -w/2, -3w/2; -1: westbound mirrored.
    for dir in [1.0, -1.0] {
        let mut lanes = Vec::new();
        for k in 0..2 {
            let y = -dir * (w / 2.0 + k as f64 * w);
            let seg = |a: f64, b: f64| [[dir * a, y], [dir * b, y]];
            let (a0, a1) = m.add_path(&seg(-l, -split));
            let (b0, b1) = m.add_path(&seg(-split, split));
            let (c0, c1) = m.add_path(&seg(split, l));
            m.link(a1, b0);
            m.link(b1, c0);
            lanes.push(((a0, a1), (b0, b1), (c0, c1), y));
        }
        // inner lane k=0, outer lane k=1; in both directions the inner lane
        // is to the left of the outer one.
        let (inner, outer) = (&lanes[0], &lanes[1]);
        for (inner_id, outer_id) in [(inner.0 .0, outer.0 .0), (inner.1 .0, outer.1 .0), (inner.2 .0, outer.2 .0)] {
            m.side_by_side(outer_id, inner_id);
        }
        // lane changes across the middle section
        for (from, to) in [(inner, outer), (outer, inner)] {
            let p = [dir * -split, from.3];
            let q = [dir * split, to.3];
            let d = [dir, 0.0];
            let path = connector(p, d, q, d, split * 0.8);
            let (f, last) = m.add_path(&path);
            m.link(from.0 .1, f);
            m.link(last, to.2 .0);
        }
    }
    m
}

fn build_roundabout(cfg: &GeneratorConfig) -> MapBuilder {
    let mut m = MapBuilder::default();
    let (w, l) = (cfg.lane_width, cfg.arm_length);
    let radius = 14.0;
    let delta = 0.4;
    let arms = [0.0, FRAC_PI_2, PI, -FRAC_PI_2];
    let ring_pt = |a: f64| geometry::scale(unit(a), radius);
    let tangent = |a: f64| unit(a + FRAC_PI_2);
    // Ring nodes counter-clockwise: for each arm, exit at a - delta then entry at a + delta.
    let mut nodes = Vec::new();
    for &a in &arms {
        nodes.push(a - delta);
        nodes.push(a + delta);
    }
    let mut arcs = Vec::new();
    for i in 0..nodes.len() {
        let a0 = nodes[i];
        let mut a1 = nodes[(i + 1) % nodes.len()];
        while a1 <= a0 {
            a1 += 2.0 * PI;
        }
        let steps = 12;
        let path: Vec<Point> = (0..=steps).map(|k| ring_pt(a0 + (a1 - a0) * k as f64 / steps as f64)).collect();
        arcs.push(m.add_path(&path));
    }
    for i in 0..arcs.len() {
        let next = (i + 1) % arcs.len();
        m.link(arcs[i].1, arcs[next].0);
    }
    let start = radius + 2.0 * w;
    for (k, &a) in arms.iter().enumerate() {
        let u = unit(a);
        let n = unit(a + FRAC_PI_2);
        let off = geometry::scale(n, w / 2.0);
        let inc = [geometry::add(geometry::scale(u, l), off), geometry::add(geometry::scale(u, start), off)];
        let out = [geometry::sub(geometry::scale(u, start), off), geometry::sub(geometry::scale(u, l), off)];
        let (_, inc_last) = m.add_path(&inc);
        let (out_first, _) = m.add_path(&out);
        let entry_angle = a + delta;
        let exit_angle = a - delta;
        let enter = connector(inc[1], geometry::scale(u, -1.0), ring_pt(entry_angle), tangent(entry_angle), 4.0);
        let (ef, el) = m.add_path(&enter);
        m.link(inc_last, ef);
        // entry node starts arc 2k+1; exit node starts arc 2k, i.e. arc 2k-1 ends there
        m.link(el, arcs[2 * k + 1].0);
        let leave = connector(ring_pt(exit_angle), tangent(exit_angle), out[0], u, 4.0);
        let (xf, xl) = m.add_path(&leave);
        let before_exit = (2 * k + arcs.len() - 1) % arcs.len();
        m.link(arcs[before_exit].1, xf);
        m.link(xl, out_first);
    }
    m
}

fn build_map(cfg: &GeneratorConfig, template: Template) -> MapBuilder {
    match template {
        Template::Straight => build_straight(cfg),
        Template::ThreeWay => build_junction(cfg, &[0.0, PI, -FRAC_PI_2]),
        Template::FourWay => build_junction(cfg, &[0.0, FRAC_PI_2, PI, -FRAC_PI_2]),
        Template::Roundabout => build_roundabout(cfg),
    }
}

struct Plan {
    route: Polyline,
    s0: f64,
    speed: f64,
    /// Fraction of nominal speed over the future (1 = no yielding).
    factor: f64,
}

impl Plan {
    fn pos_at(&self, t: f64) -> Point {
        let f = if t > 0.0 { self.factor } else { 1.0 };
        self.route.at(self.s0 + self.speed * f * t)
    }

    fn arrival(&self, s: f64) -> f64 {
        (s - self.s0) / (self.speed * self.factor)
    }
}

/// First point where `a` (from arc length `from_a`) comes within 1.5 m of
/// `b` (at or beyond `from_b`) at an angle, so lane following is ignored.
fn crossing(a: &Polyline, from_a: f64, b: &Polyline, from_b: f64) -> Option<(f64, f64)> {
    let mut s = from_a;
    while s <= a.length() {
        let (sb, d) = b.project(a.at(s));
        if d < 1.5 && sb >= from_b {
            let angle = geometry::wrap_angle(a.heading_at(s) - b.heading_at(sb)).abs();
            if angle > 0.2 {
                return Some((s, sb));
            }
        }
        s += 0.5;
    }
    None
}

const HORIZON: f64 = FUTURE_LEN as f64 * FRAME_DT;

/// Slows later arrivals at crossing points until no two agents reach a
/// shared conflict point within `YIELD_GAP` seconds of each other.
fn resolve_yielding(plans: &mut [Plan]) {
    // Conflicts depend only on geometry; compute once.
    let mut conflicts = Vec::new();
    for i in 0..plans.len() {
        for j in i + 1..plans.len() {
            let (a, b) = (&plans[i], &plans[j]);
            let reach_a = a.s0 + a.speed * HORIZON;
            let c = crossing(&a.route, a.s0, &b.route, b.s0);
            if let Some((sa, sb)) = c {
                let reach_b = b.s0 + b.speed * HORIZON;
                // paths that merge from the same lane behind us are not crossings
                if sa <= reach_a && sb <= reach_b && dist(a.route.at(a.s0), b.route.at(b.s0)) > 4.0 {
                    conflicts.push((i, j, sa, sb));
                }
            }
        }
    }
    for _ in 0..plans.len() * 2 {
        let mut changed = false;
        for &(i, j, sa, sb) in &conflicts {
            let (ta, tb) = (plans[i].arrival(sa), plans[j].arrival(sb));
            if ta > HORIZON && tb > HORIZON {
                continue;
            }
            if (ta - tb).abs() >= YIELD_GAP - 1e-9 {
                continue;
            }
            // earlier arrival keeps priority; on exact ties the lower index (lower id) goes first
            let (winner_t, loser, s_loser) = if ta <= tb { (ta, j, sb) } else { (tb, i, sa) };
            let target = winner_t + YIELD_GAP;
            let p = &mut plans[loser];
            let needed = (s_loser - p.s0) / (p.speed * target);
            if needed < p.factor {
                p.factor = needed.max(0.0);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

fn make_track(id: u32, plan: &Plan, cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> AgentTrack {
    let dropped = if rng.gen_bool(cfg.dropout) { rng.gen_range(1..HISTORY_LEN / 2) } else { 0 };
    let history = (0..HISTORY_LEN)
        .map(|k| {
            if k < dropped {
                return Frame::ABSENT;
            }
            let t = -((HISTORY_LEN - 1 - k) as f64) * FRAME_DT;
            let s = plan.s0 + plan.speed * t;
            let p = plan.route.at(s);
            let noise = [gaussian(rng) * cfg.position_noise, gaussian(rng) * cfg.position_noise];
            Frame {
                pos: geometry::add(p, noise),
                yaw: geometry::wrap_angle(plan.route.heading_at(s) + gaussian(rng) * cfg.yaw_noise),
                speed: plan.speed,
                present: true,
            }
        })
        .collect();
    let future = (1..=FUTURE_LEN).map(|k| plan.pos_at(k as f64 * FRAME_DT)).collect();
    AgentTrack { id, history, future: Some(future) }
}

/// Routes with their lanelet sequence, grouped by source lanelet.
fn all_routes(m: &MapBuilder) -> Vec<Vec<u32>> {
    let sources: Vec<u32> = m.lanes.iter().filter(|l| l.pred.is_empty()).map(|l| l.id).collect();
    sources.iter().flat_map(|&s| m.routes_from(s)).collect()
}

fn try_generate(id: u64, cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Option<Scene> {
    let template = cfg.templates[rng.gen_range(0..cfg.templates.len())];
    let map = build_map(cfg, template);
    let routes = all_routes(&map);
    let lines: Vec<Polyline> = routes.iter().map(|r| map.polyline(r)).collect();
    let target = rng.gen_range(cfg.min_agents..=cfg.max_agents);

    let mut plans: Vec<Plan> = Vec::new();
    let spaced = |plans: &[Plan], cand: &Plan| {
        plans.iter().all(|p| {
            dist(p.route.at(p.s0), cand.route.at(cand.s0)) > 5.0
                && dist(p.route.at(p.s0 + p.speed * HORIZON), cand.route.at(cand.s0 + cand.speed * HORIZON)) > 4.0
        })
    };
    let draw_plan = |rng: &mut ChaCha8Rng| -> Option<Plan> {
        let r = rng.gen_range(0..lines.len());
        let speed = rng.gen_range(cfg.min_speed..=cfg.max_speed);
        let route = lines[r].clone();
        let lo = speed * 1.0;
        let hi = route.length() - speed * HORIZON - 2.0;
        if hi <= lo {
            return None;
        }
        let s0 = rng.gen_range(lo..hi);
        Some(Plan { route, s0, speed, factor: 1.0 })
    };

    let forced = template != Template::Straight && rng.gen_bool(cfg.interaction_fraction) && target >= 2;
    if forced {
        // Two agents timed to reach a shared crossing point within a second of each other.
        for _ in 0..60 {
            let Some(a) = draw_plan(rng) else { continue };
            let rb = rng.gen_range(0..lines.len());
            let Some((sa, sb)) = crossing(&a.route, a.s0 + 2.0, &lines[rb], 0.0) else { continue };
            let ta = a.arrival(sa);
            if !(0.3..2.5).contains(&ta) {
                continue;
            }
            let vb = rng.gen_range(cfg.min_speed..=cfg.max_speed);
            let tb = ta + rng.gen_range(-0.8..0.8);
            let s0b = sb - vb * tb.max(0.2);
            if s0b < vb || s0b > lines[rb].length() - vb * HORIZON - 2.0 {
                continue;
            }
            let b = Plan { route: lines[rb].clone(), s0: s0b, speed: vb, factor: 1.0 };
            if dist(a.route.at(a.s0), b.route.at(b.s0)) < 6.0 {
                continue;
            }
            plans.push(a);
            plans.push(b);
            break;
        }
    }
    let mut attempts = 0;
    while plans.len() < target && attempts < 100 * target {
        attempts += 1;
        if let Some(p) = draw_plan(rng) {
            if spaced(&plans, &p) {
                plans.push(p);
            }
        }
    }
    if plans.len() < cfg.min_agents {
        return None;
    }
    resolve_yielding(&mut plans);

    let agents: Vec<AgentTrack> = plans.iter().enumerate().map(|(i, p)| make_track(i as u32, p, cfg, rng)).collect();
    let lanes = map.lanes;

    // Random world placement so normalization is exercised.
    let world = RigidTransform { origin: [rng.gen_range(-500.0..500.0), rng.gen_range(-500.0..500.0)], heading: rng.gen_range(-PI..PI) };
    let mut scene = Scene { id, lanes, agents, reference: None, transform: RigidTransform::default() };
    let to_world = |p: Point| world.invert(p);
    for l in &mut scene.lanes {
        l.pts.iter_mut().for_each(|p| *p = to_world(*p));
    }
    for a in &mut scene.agents {
        for f in a.history.iter_mut().filter(|f| f.present) {
            f.pos = to_world(f.pos);
            f.yaw = world.invert_yaw(f.yaw);
        }
        if let Some(fut) = &mut a.future {
            fut.iter_mut().for_each(|p| *p = to_world(*p));
        }
    }

    let reference = select_reference(&scene, ReferenceMode::Barycenter).ok()?;
    let scene = normalize_scene(&scene, reference).ok()?;
    let limit = cfg.grid_half_range - 2.0;
    let inside = |p: Point| p[0].abs() < limit && p[1].abs() < limit;
    let ok = scene.agents.iter().all(|a| a.endpoint().is_some_and(inside) && a.history.iter().all(|f| inside(f.pos)));
    ok.then_some(scene)
}

/// Builds one normalized scene (reference chosen by barycenter) from `seed`.
pub fn generate_scene(seed: u64, cfg: &GeneratorConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..100 {
        if let Some(s) = try_generate(seed, cfg, &mut rng) {
            return Ok(s);
        }
    }
    Err(Error::Config(format!("could not place {} agents on the configured maps", cfg.min_agents)))
}

/// Per-template lane graph in the map's own frame, for inspection and tests.
pub fn template_lanes(cfg: &GeneratorConfig, template: Template) -> Vec<LanePolyline> {
    build_map(cfg, template).lanes
}

/// Count of distinct routes per source lanelet, keyed by source id.
pub fn route_counts(cfg: &GeneratorConfig, template: Template) -> BTreeMap<u32, usize> {
    let m = build_map(cfg, template);
    m.lanes.iter().filter(|l| l.pred.is_empty()).map(|l| (l.id, m.routes_from(l.id).len())).collect()
}
