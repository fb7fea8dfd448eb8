//! Probability fields over the plane: the output grid, Gaussian training
//! targets, the focal loss, and analytic mixture fields.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::math::graph::focal_term;
use crate::math::graph::FOCAL_EPS;
use crate::scene::geometry::{self, Point, Polyline};
use crate::scene::{AgentTrack, Scene, FRAME_DT, FUTURE_LEN};

/// Standard deviation of the endpoint target, meters.
pub const TARGET_SIGMA: f64 = 2.0;

/// Square output grid centered on the scene reference point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Side length, meters.
    pub range: f64,
    /// Cell size, meters.
    pub resolution: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { range: 192.0, resolution: 0.5 }
    }
}

impl GridSpec {
    pub fn new(range: f64, resolution: f64) -> Result<Self> {
        let n = range / resolution;
        if !(range > 0.0 && resolution > 0.0) || (n - n.round()).abs() > 1e-9 {
            return Err(invalid("grid", format!("range {range} is not a multiple of resolution {resolution}")));
        }
        Ok(GridSpec { range, resolution })
    }

    /// Cells per side.
    pub fn side(&self) -> usize {
        (self.range / self.resolution).round() as usize
    }

    pub fn cell_count(&self) -> usize {
        self.side() * self.side()
    }

    pub fn half(&self) -> f64 {
        self.range / 2.0
    }

    /// Center of cell `(ix, iy)`.
    pub fn center(&self, ix: usize, iy: usize) -> Point {
        [
            -self.half() + (ix as f64 + 0.5) * self.resolution,
            -self.half() + (iy as f64 + 0.5) * self.resolution,
        ]
    }

    /// Cell containing `p`, if inside the grid.
    pub fn cell_of(&self, p: Point) -> Option<(usize, usize)> {
        let ix = ((p[0] + self.half()) / self.resolution).floor();
        let iy = ((p[1] + self.half()) / self.resolution).floor();
        let n = self.side() as f64;
        (ix >= 0.0 && iy >= 0.0 && ix < n && iy < n).then_some((ix as usize, iy as usize))
    }

    pub fn contains(&self, p: Point) -> bool {
        self.cell_of(p).is_some()
    }
}

/// Gaussian target `exp(-|q - e|^2 / (2 sigma^2))` with the default sigma.
pub fn target_value(endpoint: Point, query: Point) -> f64 {
    target_value_sigma(endpoint, query, TARGET_SIGMA)
}

pub fn target_value_sigma(endpoint: Point, query: Point, sigma: f64) -> f64 {
    let d2 = (query[0] - endpoint[0]).powi(2) + (query[1] - endpoint[1]).powi(2);
    (-d2 / (2.0 * sigma * sigma)).exp()
}

/// Mean focal loss over cells, without gradient tracking.
///
/// Cells with target exactly 1 take the `log(p)` branch. Predictions must
/// lie in [0, 1] and are clamped away from the ends.
pub fn focal_loss(target: &[f64], pred: &[f64]) -> Result<f64> {
    if target.len() != pred.len() {
        return Err(crate::error::Error::Shape { op: "focal_loss", left: vec![target.len()], right: vec![pred.len()] });
    }
    let mut total = 0.0;
    for (&y, &p) in target.iter().zip(pred) {
        if !(0.0..=1.0).contains(&p) {
            return Err(invalid("focal_loss", format!("prediction {p} outside [0, 1]")));
        }
        total -= focal_term(y, p.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS)).0;
    }
    Ok(total / target.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Point,
    /// Row-major 2x2 covariance.
    pub cov: [f64; 4],
}

impl GaussianComponent {
    pub fn isotropic(weight: f64, mean: Point, sigma: f64) -> Self {
        GaussianComponent { weight, mean, cov: [sigma * sigma, 0.0, 0.0, sigma * sigma] }
    }

    /// Weighted, peak-normalized density: `weight` at the mean.
    pub fn eval(&self, p: Point) -> f64 {
        let [a, b, c, d] = self.cov;
        let det = a * d - b * c;
        let (dx, dy) = (p[0] - self.mean[0], p[1] - self.mean[1]);
        // inverse = [d, -b; -c, a] / det
        let q = (d * dx * dx - (b + c) * dx * dy + a * dy * dy) / det;
        self.weight * (-0.5 * q).exp()
    }
}

/// Mixture of peak-normalized Gaussians; an oracle stand-in for a trained decoder.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalyticField {
    pub components: Vec<GaussianComponent>,
}

impl AnalyticField {
    pub fn new(components: Vec<GaussianComponent>) -> Result<Self> {
        for c in &components {
            let [a, b, cc, d] = c.cov;
            if !(c.weight >= 0.0) || !(a > 0.0 && d > 0.0 && a * d - b * cc > 0.0) {
                return Err(invalid("analytic_field", "weights must be >= 0 and covariances positive definite"));
            }
        }
        Ok(AnalyticField { components })
    }

    /// Rescales weights to sum to 1.
    pub fn normalized(mut self) -> Self {
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if total > 0.0 {
            self.components.iter_mut().for_each(|c| c.weight /= total);
        }
        self
    }

    pub fn eval(&self, p: Point) -> f64 {
        self.components.iter().map(|c| c.eval(p)).sum()
    }
}

pub fn eval_field(field: &AnalyticField, points: &[Point]) -> Vec<f64> {
    points.iter().map(|p| field.eval(*p)).collect()
}

/// Lane-following prior for one agent: a Gaussian at the constant-speed
/// horizon position along every lane route reachable from its current
/// lanelet, plus a weaker component at 60 % of that distance for possible
/// yielding. Falls back to straight-line extrapolation when no lanelet is
/// within 3 m.
pub fn kinematic_prior(scene: &Scene, agent: &AgentTrack) -> AnalyticField {
    let cur = *agent.current();
    let horizon = FUTURE_LEN as f64 * FRAME_DT;
    let travel = cur.speed * horizon;
    let mut comps = Vec::new();

    let nearest = scene
        .lanes
        .iter()
        .filter_map(|l| {
            let pl = Polyline::new(l.pts.clone());
            let (s, d) = pl.project(cur.pos);
            let heading_ok = geometry::wrap_angle(pl.heading_at(s) - cur.yaw).abs() < 0.6;
            (d < 3.0 && heading_ok).then_some((d, l.id, s))
        })
        .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));

    if let Some((_, lane, s_on)) = nearest {
        let mut routes = Vec::new();
        collect_routes(scene, lane, travel + 30.0, &mut vec![lane], 0.0, &mut routes);
        let mut ends: Vec<Point> = Vec::new();
        for r in &routes {
            let mut pts: Vec<Point> = Vec::new();
            for id in r {
                for p in &scene.lane(*id).unwrap().pts {
                    if pts.last().is_none_or(|q| geometry::dist(*q, *p) > 1e-9) {
                        pts.push(*p);
                    }
                }
            }
            let pl = Polyline::new(pts);
            for (frac, w) in [(1.0, 1.0), (0.6, 0.3)] {
                let e = pl.at(s_on + travel * frac);
                if ends.iter().all(|q| geometry::dist(*q, e) > 0.5) {
                    ends.push(e);
                    comps.push(GaussianComponent::isotropic(w, e, TARGET_SIGMA));
                }
            }
        }
    }
    if comps.is_empty() {
        let e = geometry::add(cur.pos, geometry::scale([cur.yaw.cos(), cur.yaw.sin()], travel));
        comps.push(GaussianComponent::isotropic(1.0, e, TARGET_SIGMA));
    }
    AnalyticField { components: comps }.normalized()
}

fn collect_routes(scene: &Scene, lane: u32, budget: f64, path: &mut Vec<u32>, length: f64, out: &mut Vec<Vec<u32>>) {
    let l = scene.lane(lane).unwrap();
    let len: f64 = l.pts.windows(2).map(|w| geometry::dist(w[0], w[1])).sum();
    let total = length + len;
    if total >= budget || l.succ.is_empty() {
        out.push(path.clone());
        return;
    }
    for s in &l.succ {
        if !path.contains(s) {
            path.push(*s);
            collect_routes(scene, *s, budget, path, total, out);
            path.pop();
        }
    }
}
