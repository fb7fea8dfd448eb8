//! Greedy endpoint sampling from sparse heatmaps.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::field::GridSpec;
use crate::model::hier::{HeatCell, SparseHeatmap};
use crate::scene::geometry::{self, Point};
use crate::scene::io::{read_header, write_header};
use crate::scene::Scene;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentOrder {
    /// Descending current speed, ties by ascending id.
    #[default]
    SpeedDescending,
    /// Order of the heatmap list.
    Input,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub k: usize,
    /// Aggregation and suppression radius, meters.
    pub radius: f64,
    pub order: AgentOrder,
    /// Whether a pick also suppresses other agents within the same modality.
    pub cross_suppression: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { k: 6, radius: 2.0, order: AgentOrder::SpeedDescending, cross_suppression: true }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || !(self.radius > 0.0) {
            return Err(invalid("sampler", format!("need k >= 1 and radius > 0, got k = {}, r = {}", self.k, self.radius)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// Modality indices are independent per agent.
    Marginal,
    /// Modality `k` is one scene-level future shared by all agents.
    Joint,
}

/// `A x K` endpoints with optional per-entry extras. Storage is always
/// agent-major; `orientation` says how the modality index is to be read.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySet {
    pub orientation: Orientation,
    pub agents: Vec<u32>,
    pub endpoints: Vec<Vec<Point>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectories: Option<Vec<Vec<Vec<Point>>>>,
    /// Picks made after the agent's heatmap mass ran out.
    #[serde(default)]
    pub degenerate: Vec<Vec<bool>>,
    /// Per joint modality: some pick ignored suppression, so agents may overlap.
    #[serde(default)]
    pub collision_possible: Vec<bool>,
}

impl ModalitySet {
    pub fn new(orientation: Orientation, agents: Vec<u32>, endpoints: Vec<Vec<Point>>) -> Result<Self> {
        let k = endpoints.first().map_or(0, Vec::len);
        if agents.len() != endpoints.len() || endpoints.iter().any(|e| e.len() != k) {
            return Err(invalid("modality_set", "endpoints must form an A x K matrix matching the agent list"));
        }
        let a = agents.len();
        Ok(ModalitySet {
            orientation,
            agents,
            endpoints,
            confidence: None,
            trajectories: None,
            degenerate: vec![vec![false; k]; a],
            collision_possible: vec![false; k],
        })
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn k(&self) -> usize {
        self.endpoints.first().map_or(0, Vec::len)
    }

    pub fn endpoint(&self, a: usize, k: usize) -> Point {
        self.endpoints[a][k]
    }

    /// Endpoints of every agent for modality `k`.
    pub fn modality(&self, k: usize) -> Vec<Point> {
        self.endpoints.iter().map(|e| e[k]).collect()
    }

    pub fn agent_index(&self, id: u32) -> Option<usize> {
        self.agents.iter().position(|a| *a == id)
    }

    /// Same endpoints read with the other orientation.
    pub fn with_orientation(mut self, o: Orientation) -> Self {
        self.orientation = o;
        self
    }

    /// Whether modality `k` was flagged during sampling.
    pub fn flagged(&self, k: usize) -> bool {
        self.collision_possible.get(k).copied().unwrap_or(false) || self.degenerate.iter().any(|d| d.get(k).copied().unwrap_or(false))
    }
}

/// Final-level cells of a heatmap with their disk neighborhoods.
struct DiskIndex<'a> {
    cells: &'a [HeatCell],
    neighbors: Vec<Vec<usize>>,
    /// Lattice coordinates of every cell, for off-set lookups from picks.
    lookup: HashMap<(i64, i64), usize>,
    offsets: Vec<(i64, i64)>,
    grid: GridSpec,
}

impl<'a> DiskIndex<'a> {
    fn new(hm: &'a SparseHeatmap, radius: f64) -> Self {
        let grid = hm.config.final_grid();
        let cells = hm.final_cells();
        let res = grid.resolution;
        let span = (radius / res).floor() as i64;
        let mut offsets = Vec::new();
        for dx in -span..=span {
            for dy in -span..=span {
                if ((dx * dx + dy * dy) as f64).sqrt() * res <= radius + 1e-9 {
                    offsets.push((dx, dy));
                }
            }
        }
        let lookup: HashMap<(i64, i64), usize> =
            cells.iter().enumerate().map(|(i, c)| ((c.cell.ix as i64, c.cell.iy as i64), i)).collect();
        let mut index = DiskIndex { cells, neighbors: Vec::new(), lookup, offsets, grid };
        index.neighbors = (0..cells.len()).map(|i| index.disk(cells[i].center)).collect();
        index
    }

    /// Indices of cells whose centers lie within the radius of `p`, where `p`
    /// is a cell center of the same lattice.
    fn disk(&self, p: Point) -> Vec<usize> {
        let Some((ix, iy)) = self.grid.cell_of(p) else {
            return Vec::new();
        };
        let (ix, iy) = (ix as i64, iy as i64);
        self.offsets.iter().filter_map(|(dx, dy)| self.lookup.get(&(ix + dx, iy + dy)).copied()).collect()
    }
}

fn lex(a: Point, b: Point) -> Ordering {
    a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1]))
}

/// Outcome of one greedy pick.
struct Pick {
    cell: usize,
    score: f64,
    fallback: bool,
}

/// Chooses among cells with `allowed[i]`: the highest disk mass of `values`,
/// or, when that mass is zero, the allowed cell farthest from `previous`.
fn pick(index: &DiskIndex, values: &[f64], allowed: &[bool], previous: &[Point]) -> Pick {
    let cells = index.cells;
    let mut best: Option<(usize, f64)> = None;
    for i in 0..cells.len() {
        if !allowed[i] {
            continue;
        }
        let s: f64 = index.neighbors[i].iter().map(|&j| values[j]).sum();
        let better = match best {
            None => true,
            Some((b, bs)) => s > bs || (s == bs && lex(cells[i].center, cells[b].center) == Ordering::Less),
        };
        if better {
            best = Some((i, s));
        }
    }
    if let Some((i, s)) = best {
        if s > 0.0 {
            return Pick { cell: i, score: s, fallback: false };
        }
    }
    // Exhausted: farthest allowed cell, or any cell if none are allowed.
    let any_allowed = allowed.iter().any(|a| *a);
    let far = |i: usize| previous.iter().map(|p| geometry::dist(*p, cells[i].center)).fold(f64::INFINITY, f64::min);
    let mut best: Option<(usize, f64)> = None;
    for i in 0..cells.len() {
        if any_allowed && !allowed[i] {
            continue;
        }
        let d = far(i);
        let better = match best {
            None => true,
            Some((b, bd)) => d > bd || (d == bd && lex(cells[i].center, cells[b].center) == Ordering::Less),
        };
        if better {
            best = Some((i, d));
        }
    }
    let (cell, _) = best.expect("heatmap has final cells");
    let score = index.neighbors[cell].iter().map(|&j| values[j]).sum();
    Pick { cell, score, fallback: true }
}

/// Per-agent sampling state: heatmap values after self-suppression.
struct AgentState<'a> {
    index: DiskIndex<'a>,
    values: Vec<f64>,
    suppressed: Vec<bool>,
    picks: Vec<Point>,
}

impl<'a> AgentState<'a> {
    fn new(hm: &'a SparseHeatmap, radius: f64) -> Result<Self> {
        let index = DiskIndex::new(hm, radius);
        if index.cells.is_empty() {
            return Err(invalid("sample", format!("heatmap of agent {} has no final-level cells", hm.agent)));
        }
        let values = index.cells.iter().map(|c| c.prob).collect();
        let n = index.cells.len();
        Ok(AgentState { index, values, suppressed: vec![false; n], picks: Vec::new() })
    }

    fn suppress(&mut self, p: Point) {
        for j in self.index.disk(p) {
            self.values[j] = 0.0;
            self.suppressed[j] = true;
        }
    }
}

/// Marginal greedy sampling: `K` endpoints, their confidences and
/// degenerate flags.
pub fn sample_marginal(hm: &SparseHeatmap, cfg: &SamplerConfig) -> Result<(Vec<Point>, Vec<f64>, Vec<bool>)> {
    cfg.validate()?;
    let mut st = AgentState::new(hm, cfg.radius)?;
    let (mut ends, mut conf, mut degen) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..cfg.k {
        let allowed: Vec<bool> = st.suppressed.iter().map(|s| !s).collect();
        let p = pick(&st.index, &st.values, &allowed, &st.picks);
        let c = st.index.cells[p.cell].center;
        st.suppress(c);
        st.picks.push(c);
        ends.push(c);
        conf.push(p.score);
        degen.push(p.fallback);
    }
    Ok((ends, conf, degen))
}

/// Marginal sampling for every heatmap, as an `A x K` marginal set.
pub fn sample_marginal_set(maps: &[SparseHeatmap], cfg: &SamplerConfig) -> Result<ModalitySet> {
    let mut endpoints = Vec::new();
    let mut conf = Vec::new();
    let mut degen = Vec::new();
    for hm in maps {
        let (e, c, d) = sample_marginal(hm, cfg)?;
        endpoints.push(e);
        conf.push(c);
        degen.push(d);
    }
    let mut set = ModalitySet::new(Orientation::Marginal, maps.iter().map(|m| m.agent).collect(), endpoints)?;
    set.confidence = Some(conf);
    set.degenerate = degen;
    Ok(set)
}

/// Order in which agents pick within each modality.
pub fn agent_order(maps: &[SparseHeatmap], scene: Option<&Scene>, order: AgentOrder) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..maps.len()).collect();
    if let (AgentOrder::SpeedDescending, Some(scene)) = (order, scene) {
        let speed = |i: usize| scene.agent(maps[i].agent).map_or(0.0, |a| a.current().speed);
        idx.sort_by(|&a, &b| speed(b).total_cmp(&speed(a)).then(maps[a].agent.cmp(&maps[b].agent)));
    }
    idx
}

/// Joint collision-aware sampling. Agents pick in turn within each modality;
/// a pick suppresses its disk for the same agent in later modalities and,
/// with `cross_suppression`, for the other agents in the same modality.
/// `scene` supplies speeds for [`AgentOrder::SpeedDescending`].
pub fn sample_joint(maps: &[SparseHeatmap], scene: Option<&Scene>, cfg: &SamplerConfig) -> Result<ModalitySet> {
    cfg.validate()?;
    if let Some(first) = maps.first() {
        if maps.iter().any(|m| m.config.final_grid() != first.config.final_grid()) {
            return Err(invalid("sample_joint", "heatmaps must share the grid"));
        }
    }
    let mut states: Vec<AgentState> = maps.iter().map(|m| AgentState::new(m, cfg.radius)).collect::<Result<_>>()?;
    let order = agent_order(maps, scene, cfg.order);
    let a = maps.len();
    let mut endpoints = vec![Vec::with_capacity(cfg.k); a];
    let mut conf = vec![Vec::with_capacity(cfg.k); a];
    let mut degen = vec![Vec::with_capacity(cfg.k); a];
    let mut collision = Vec::with_capacity(cfg.k);
    for _ in 0..cfg.k {
        let mut placed: Vec<Point> = Vec::new();
        let mut flag = false;
        for &i in &order {
            let st = &mut states[i];
            let mut values = st.values.clone();
            let mut allowed: Vec<bool> = st.suppressed.iter().map(|s| !s).collect();
            if cfg.cross_suppression {
                for p in &placed {
                    for j in st.index.disk(*p) {
                        values[j] = 0.0;
                        allowed[j] = false;
                    }
                }
            }
            let p = pick(&st.index, &values, &allowed, &st.picks);
            let c = st.index.cells[p.cell].center;
            st.suppress(c);
            st.picks.push(c);
            placed.push(c);
            endpoints[i].push(c);
            conf[i].push(p.score);
            degen[i].push(p.fallback);
            flag |= p.fallback;
        }
        collision.push(flag);
    }
    let mut set = ModalitySet::new(Orientation::Joint, maps.iter().map(|m| m.agent).collect(), endpoints)?;
    set.confidence = Some(conf);
    set.degenerate = degen;
    set.collision_possible = collision;
    Ok(set)
}

/// Heatmap mass within `radius` of `endpoint`, over final-level cells.
pub fn sampled_confidence(hm: &SparseHeatmap, endpoint: Point, radius: f64) -> f64 {
    hm.final_cells().iter().filter(|c| geometry::dist(c.center, endpoint) <= radius + 1e-9).map(|c| c.prob).sum()
}

/// Dense reference for [`sample_marginal`]: greedy disk-mass picks over a
/// full row-major `side x side` grid of values (index `ix * side + iy`).
pub fn greedy_dense(grid: &GridSpec, values: &[f64], k: usize, radius: f64) -> Vec<Point> {
    let side = grid.side();
    assert_eq!(values.len(), side * side, "dense grid size");
    let mut v = values.to_vec();
    let mut alive = vec![true; v.len()];
    let span = (radius / grid.resolution).floor() as i64;
    let mut disk = Vec::new();
    for dx in -span..=span {
        for dy in -span..=span {
            if ((dx * dx + dy * dy) as f64).sqrt() * grid.resolution <= radius + 1e-9 {
                disk.push((dx, dy));
            }
        }
    }
    let around = |ix: usize, iy: usize| {
        disk.iter().filter_map(move |(dx, dy)| {
            let (x, y) = (ix as i64 + dx, iy as i64 + dy);
            (x >= 0 && y >= 0 && (x as usize) < side && (y as usize) < side).then(|| x as usize * side + y as usize)
        })
    };
    let mut out = Vec::new();
    for _ in 0..k {
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for ix in 0..side {
            for iy in 0..side {
                let i = ix * side + iy;
                if !alive[i] {
                    continue;
                }
                let s: f64 = around(ix, iy).map(|j| v[j]).sum();
                if s > best.1 {
                    best = (i, s);
                }
            }
        }
        let (ix, iy) = (best.0 / side, best.0 % side);
        for j in around(ix, iy) {
            v[j] = 0.0;
            alive[j] = false;
        }
        out.push(grid.center(ix, iy));
    }
    out
}

pub const PREDICTION_FORMAT: &str = "scenecast-predictions";
pub const PREDICTION_VERSION: u32 = 1;

/// One line of a prediction file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePrediction {
    pub scene: u64,
    pub mode: String,
    pub set: ModalitySet,
}

pub fn write_predictions<W: Write>(mut w: W, preds: &[ScenePrediction]) -> Result<()> {
    write_header(&mut w, PREDICTION_FORMAT, PREDICTION_VERSION)?;
    for p in preds {
        serde_json::to_writer(&mut w, p)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_predictions<R: BufRead>(r: R) -> Result<Vec<ScenePrediction>> {
    let mut out = Vec::new();
    for line in read_header(r, PREDICTION_FORMAT, PREDICTION_VERSION)? {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: ScenePrediction = serde_json::from_str(&line)?;
        if p.set.endpoints.len() != p.set.agents.len() {
            return Err(Error::Format(format!("scene {}: endpoint rows do not match agents", p.scene)));
        }
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{AnalyticField, GaussianComponent};
    use crate::model::hier::{decode_oracle, HierConfig};

    fn oracle(comps: Vec<GaussianComponent>, agent: u32) -> SparseHeatmap {
        decode_oracle(&AnalyticField::new(comps).unwrap(), &HierConfig::default(), agent).unwrap().0
    }

    #[test]
    fn picks_are_separated_and_confidences_fall() {
        let hm = oracle(vec![GaussianComponent::isotropic(1.0, [3.0, 4.0], 2.0)], 0);
        let (e, c, d) = sample_marginal(&hm, &SamplerConfig::default()).unwrap();
        assert_eq!(e.len(), 6);
        for i in 0..6 {
            for j in 0..i {
                assert!(geometry::dist(e[i], e[j]) > 2.0);
            }
        }
        assert!(c.windows(2).all(|w| w[1] <= w[0]));
        assert!(d.iter().all(|x| !x));
        assert!(geometry::dist(e[0], [3.0, 4.0]) <= 0.5);
    }

    #[test]
    fn confidence_matches_disk_mass() {
        let hm = oracle(vec![GaussianComponent::isotropic(1.0, [0.0, 0.0], 2.0)], 0);
        let (e, c, _) = sample_marginal(&hm, &SamplerConfig { k: 1, ..Default::default() }).unwrap();
        assert!((sampled_confidence(&hm, e[0], 2.0) - c[0]).abs() < 1e-12);
    }

    #[test]
    fn exhausted_mass_falls_back_and_flags() {
        let mut hm = oracle(vec![GaussianComponent::isotropic(1.0, [0.0, 0.0], 2.0)], 0);
        for c in hm.cells.iter_mut() {
            if geometry::dist(c.center, [0.25, 0.25]) > 0.1 {
                c.prob = 0.0;
            }
        }
        let (e, _, d) = sample_marginal(&hm, &SamplerConfig { k: 3, ..Default::default() }).unwrap();
        assert!(!d[0] && d[1] && d[2]);
        assert!(geometry::dist(e[1], e[0]) > 2.0 && geometry::dist(e[2], e[1]) > 2.0);
    }

    #[test]
    fn prediction_file_round_trip() {
        let mut set = ModalitySet::new(Orientation::Joint, vec![4, 9], vec![vec![[0.1, 0.2]], vec![[1.0 / 3.0, -2.0]]]).unwrap();
        set.confidence = Some(vec![vec![0.5], vec![0.25]]);
        let preds = vec![ScenePrediction { scene: 12, mode: "joint-algo".into(), set }];
        let mut buf = Vec::new();
        write_predictions(&mut buf, &preds).unwrap();
        assert_eq!(read_predictions(&buf[..]).unwrap(), preds);
    }
}
