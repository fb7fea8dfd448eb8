//! Coarse-to-fine sparse grid evaluation.

use std::cmp::Ordering;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::field::{AnalyticField, GridSpec};
use crate::scene::geometry::Point;

/// Grid side `W` and the three cell sizes with the per-level keep counts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HierConfig {
    pub w: f64,
    pub r0: f64,
    pub n1: usize,
    pub r1: f64,
    pub n2: usize,
    pub r2: f64,
}

impl Default for HierConfig {
    fn default() -> Self {
        HierConfig { w: 192.0, r0: 8.0, n1: 16, r1: 2.0, n2: 64, r2: 0.5 }
    }
}

fn integer_ratio(a: f64, b: f64) -> Option<usize> {
    let q = a / b;
    (b > 0.0 && (q - q.round()).abs() < 1e-9 && q.round() >= 1.0).then_some(q.round() as usize)
}

impl HierConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(invalid("hier_config", m));
        let Some(side0) = integer_ratio(self.w, self.r0) else {
            return err(format!("W = {} is not a multiple of R0 = {}", self.w, self.r0));
        };
        let f1 = integer_ratio(self.r0, self.r1).filter(|f| *f >= 2);
        let f2 = integer_ratio(self.r1, self.r2).filter(|f| *f >= 2);
        let (Some(f1), Some(_)) = (f1, f2) else {
            return err(format!(
                "R0/R1 = {}/{} and R1/R2 = {}/{} must be integers >= 2",
                self.r0, self.r1, self.r1, self.r2
            ));
        };
        if self.n1 > side0 * side0 {
            return err(format!("N1 = {} exceeds {} coarse cells", self.n1, side0 * side0));
        }
        if self.n2 > self.n1 * f1 * f1 {
            return err(format!("N2 = {} exceeds {} intermediate cells", self.n2, self.n1 * f1 * f1));
        }
        Ok(())
    }

    /// Cells per side at the coarse level.
    pub fn coarse_side(&self) -> usize {
        (self.w / self.r0).round() as usize
    }

    /// Subdivision factor from level `l` to `l + 1`.
    pub fn factor(&self, level: usize) -> usize {
        match level {
            0 => (self.r0 / self.r1).round() as usize,
            _ => (self.r1 / self.r2).round() as usize,
        }
    }

    pub fn cell_size(&self, level: usize) -> f64 {
        [self.r0, self.r1, self.r2][level]
    }

    /// Number of cells kept from `level` for refinement.
    pub fn keep(&self, level: usize) -> usize {
        [self.n1, self.n2][level]
    }

    pub fn final_grid(&self) -> GridSpec {
        GridSpec { range: self.w, resolution: self.r2 }
    }

    /// Cells per level: coarse grid, then `N1 f1^2`, then `N2 f2^2`.
    pub fn level_counts(&self) -> [usize; 3] {
        let s = self.coarse_side();
        let (f1, f2) = (self.factor(0), self.factor(1));
        [s * s, self.n1 * f1 * f1, self.n2 * f2 * f2]
    }

    /// Cells of the full grid at the final resolution.
    pub fn dense_count(&self) -> usize {
        let s = (self.w / self.r2).round() as usize;
        s * s
    }
}

/// Total number of evaluated grid points across the three levels.
pub fn grid_point_budget(config: &HierConfig) -> Result<usize> {
    config.validate()?;
    Ok(config.level_counts().iter().sum())
}

/// Integer cell index at a given level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellIndex {
    pub level: u8,
    pub ix: u32,
    pub iy: u32,
}

impl CellIndex {
    pub fn center(&self, cfg: &HierConfig) -> Point {
        let r = cfg.cell_size(self.level as usize);
        [-cfg.w / 2.0 + (self.ix as f64 + 0.5) * r, -cfg.w / 2.0 + (self.iy as f64 + 0.5) * r]
    }

    /// Axis-aligned bounds `(min, max)`.
    pub fn bounds(&self, cfg: &HierConfig) -> (Point, Point) {
        let r = cfg.cell_size(self.level as usize);
        let lo = [-cfg.w / 2.0 + self.ix as f64 * r, -cfg.w / 2.0 + self.iy as f64 * r];
        (lo, [lo[0] + r, lo[1] + r])
    }

    pub fn children(&self, cfg: &HierConfig) -> impl Iterator<Item = CellIndex> {
        let f = cfg.factor(self.level as usize) as u32;
        let (bx, by, level) = (self.ix * f, self.iy * f, self.level + 1);
        (0..f).flat_map(move |a| (0..f).map(move |b| CellIndex { level, ix: bx + a, iy: by + b }))
    }
}

pub fn coarse_cells(cfg: &HierConfig) -> Vec<CellIndex> {
    let s = cfg.coarse_side() as u32;
    (0..s).flat_map(|ix| (0..s).map(move |iy| CellIndex { level: 0, ix, iy })).collect()
}

/// Indices of the `n` highest scores; ties go to the smaller cell index.
pub fn top_n(cells: &[CellIndex], scores: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cells.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(cells[a].cmp(&cells[b]))
    });
    order.truncate(n);
    order
}

/// Children of the selected cells, in selection order.
pub fn refine(cells: &[CellIndex], selected: &[usize], cfg: &HierConfig) -> Vec<CellIndex> {
    selected.iter().flat_map(|&i| cells[i].children(cfg)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatCell {
    pub cell: CellIndex,
    pub center: Point,
    pub prob: f64,
}

/// Every cell evaluated during decoding, grouped by level in ascending order.
/// The final-resolution cells form the heatmap proper.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseHeatmap {
    pub agent: u32,
    pub config: HierConfig,
    pub cells: Vec<HeatCell>,
}

impl SparseHeatmap {
    /// Cells at resolution `R2`.
    pub fn final_cells(&self) -> &[HeatCell] {
        let start = self.cells.partition_point(|c| (c.cell.level as usize) < 2);
        &self.cells[start..]
    }

    pub fn level(&self, level: u8) -> impl Iterator<Item = &HeatCell> {
        self.cells.iter().filter(move |c| c.cell.level == level)
    }

    /// Final cell with the highest probability, ties to the smaller index.
    pub fn argmax(&self) -> Option<&HeatCell> {
        self.final_cells().iter().min_by(|a, b| {
            b.prob.partial_cmp(&a.prob).unwrap_or(Ordering::Equal).then(a.cell.cmp(&b.cell))
        })
    }

    /// Probability of the final cell containing `p`, if it was evaluated.
    pub fn prob_at(&self, p: Point) -> Option<f64> {
        let (ix, iy) = self.config.final_grid().cell_of(p)?;
        let key = CellIndex { level: 2, ix: ix as u32, iy: iy as u32 };
        self.final_cells().iter().find(|c| c.cell == key).map(|c| c.prob)
    }
}

/// Runs the three-level refinement with an arbitrary batched scorer.
///
/// `score(level, centers)` returns one `(rank_score, probability)` per center;
/// ranking uses the first value.
pub fn refine_with<F>(cfg: &HierConfig, agent: u32, mut score: F) -> Result<SparseHeatmap>
where
    F: FnMut(usize, &[Point]) -> Result<Vec<(f64, f64)>>,
{
    cfg.validate()?;
    let mut cells = Vec::with_capacity(cfg.level_counts().iter().sum());
    let mut level_cells = coarse_cells(cfg);
    for level in 0..3 {
        let centers: Vec<Point> = level_cells.iter().map(|c| c.center(cfg)).collect();
        let scored = score(level, &centers)?;
        if scored.len() != centers.len() {
            return Err(invalid("refine", format!("scorer returned {} values for {} cells", scored.len(), centers.len())));
        }
        for ((c, p), s) in level_cells.iter().zip(&centers).zip(&scored) {
            cells.push(HeatCell { cell: *c, center: *p, prob: s.1 });
        }
        if level < 2 {
            let ranks: Vec<f64> = scored.iter().map(|s| s.0).collect();
            let keep = top_n(&level_cells, &ranks, cfg.keep(level));
            level_cells = refine(&level_cells, &keep, cfg);
        }
    }
    Ok(SparseHeatmap { agent, config: *cfg, cells })
}

/// Oracle decoding: cells scored directly by an analytic field. Returns the
/// heatmap and the number of field evaluations performed.
pub fn decode_oracle(field: &AnalyticField, cfg: &HierConfig, agent: u32) -> Result<(SparseHeatmap, usize)> {
    let mut evaluated = 0;
    let hm = refine_with(cfg, agent, |_, pts| {
        evaluated += pts.len();
        Ok(pts.iter().map(|p| {
            let v = field.eval(*p);
            (v, v)
        }).collect())
    })?;
    Ok((hm, evaluated))
}

/// Magic first token of a heatmap dump.
pub const HEATMAP_MAGIC: &str = "#scenecast-heatmap";

/// Writes `agent`/config header lines then `x y p` per final cell.
pub fn write_heatmaps<W: Write>(mut w: W, maps: &[SparseHeatmap]) -> Result<()> {
    writeln!(w, "{HEATMAP_MAGIC} v1")?;
    for m in maps {
        let c = &m.config;
        writeln!(w, "agent {} W {} R0 {} N1 {} R1 {} N2 {} R2 {}", m.agent, c.w, c.r0, c.n1, c.r1, c.n2, c.r2)?;
        for cell in m.final_cells() {
            writeln!(w, "{} {} {}", cell.center[0], cell.center[1], cell.prob)?;
        }
    }
    Ok(())
}

/// Parsed dump entry: agent, config and final `(x, y, p)` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapDump {
    pub agent: u32,
    pub config: HierConfig,
    pub rows: Vec<[f64; 3]>,
}

pub fn read_heatmaps<R: BufRead>(r: R) -> Result<Vec<HeatmapDump>> {
    let mut lines = r.lines();
    match lines.next() {
        Some(Ok(h)) if h.starts_with(HEATMAP_MAGIC) => {}
        _ => return Err(Error::Format("missing heatmap header".into())),
    }
    let mut out: Vec<HeatmapDump> = Vec::new();
    for line in lines {
        let line = line?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks[0] == "agent" {
            let num = |i: usize| -> Result<f64> {
                toks.get(i).and_then(|t| t.parse().ok()).ok_or_else(|| Error::Format(format!("bad heatmap header `{line}`")))
            };
            let config = HierConfig {
                w: num(3)?,
                r0: num(5)?,
                n1: num(7)? as usize,
                r1: num(9)?,
                n2: num(11)? as usize,
                r2: num(13)?,
            };
            out.push(HeatmapDump { agent: num(1)? as u32, config, rows: Vec::new() });
            continue;
        }
        let cur = out.last_mut().ok_or_else(|| Error::Format("heatmap row before agent header".into()))?;
        let vals: Vec<f64> = toks.iter().map(|t| t.parse()).collect::<std::result::Result<_, _>>().map_err(|_| Error::Format(format!("bad heatmap row `{line}`")))?;
        if vals.len() != 3 {
            return Err(Error::Format(format!("bad heatmap row `{line}`")));
        }
        cur.rows.push([vals[0], vals[1], vals[2]]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::GaussianComponent;

    #[test]
    fn budget_defaults() {
        let c = HierConfig::default();
        assert_eq!(grid_point_budget(&c).unwrap(), 1856);
        assert_eq!(c.level_counts(), [576, 256, 1024]);
        assert_eq!(c.dense_count(), 147_456);
        let coarse = HierConfig { n1: 0, n2: 0, ..c };
        assert_eq!(grid_point_budget(&coarse).unwrap(), 576);
    }

    #[test]
    fn budget_rejects_bad_configs() {
        let c = HierConfig::default();
        assert!(grid_point_budget(&HierConfig { r1: 3.0, ..c }).is_err());
        assert!(grid_point_budget(&HierConfig { r1: 8.0, ..c }).is_err());
        assert!(grid_point_budget(&HierConfig { n1: 577, ..c }).is_err());
        assert!(grid_point_budget(&HierConfig { n2: 257, ..c }).is_err());
        assert!(grid_point_budget(&HierConfig { w: 190.0, ..c }).is_err());
    }

    #[test]
    fn children_tile_parent() {
        let c = HierConfig::default();
        let p = CellIndex { level: 0, ix: 3, iy: 5 };
        let (lo, hi) = p.bounds(&c);
        let kids: Vec<_> = p.children(&c).collect();
        assert_eq!(kids.len(), 16);
        for k in &kids {
            let (a, b) = k.bounds(&c);
            assert!(a[0] >= lo[0] && a[1] >= lo[1] && b[0] <= hi[0] && b[1] <= hi[1]);
        }
    }

    #[test]
    fn top_n_breaks_ties_by_index() {
        let cells: Vec<_> = (0..4).map(|i| CellIndex { level: 0, ix: 3 - i, iy: 0 }).collect();
        assert_eq!(top_n(&cells, &[1.0, 2.0, 2.0, 0.5], 2), vec![2, 1]);
    }

    #[test]
    fn oracle_touches_budget_and_finds_peak() {
        let c = HierConfig::default();
        let f = AnalyticField::new(vec![GaussianComponent::isotropic(1.0, [12.3, -40.1], 2.0)]).unwrap();
        let (hm, n) = decode_oracle(&f, &c, 7).unwrap();
        assert_eq!(n, 1856);
        assert_eq!(hm.cells.len(), 1856);
        assert_eq!(hm.final_cells().len(), 1024);
        let top = hm.argmax().unwrap();
        assert!((top.center[0] - 12.25).abs() < 1e-9 && (top.center[1] + 40.25).abs() < 1e-9);
    }

    #[test]
    fn dump_round_trip() {
        let c = HierConfig::default();
        let f = AnalyticField::new(vec![GaussianComponent::isotropic(1.0, [0.0, 0.0], 2.0)]).unwrap();
        let (hm, _) = decode_oracle(&f, &c, 3).unwrap();
        let mut buf = Vec::new();
        write_heatmaps(&mut buf, std::slice::from_ref(&hm)).unwrap();
        let back = read_heatmaps(&buf[..]).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].agent, 3);
        assert_eq!(back[0].config, c);
        assert_eq!(back[0].rows.len(), 1024);
        assert_eq!(back[0].rows[5][2], hm.final_cells()[5].prob);
    }
}
