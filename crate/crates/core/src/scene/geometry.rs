//! Planar geometry helpers.

pub type Point = [f64; 2];

pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

pub fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1]]
}

pub fn scale(a: Point, c: f64) -> Point {
    [a[0] * c, a[1] * c]
}

pub fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub fn norm(a: Point) -> f64 {
    a[0].hypot(a[1])
}

pub fn rotate(p: Point, angle: f64) -> Point {
    let (s, c) = angle.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

pub fn lerp(a: Point, b: Point, t: f64) -> Point {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t]
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = a % two_pi;
    if r <= -std::f64::consts::PI {
        r += two_pi;
    } else if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Cubic Bezier through four control points.
pub fn bezier(p0: Point, p1: Point, p2: Point, p3: Point, t: f64) -> Point {
    let u = 1.0 - t;
    let (a, b, c, d) = (u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t);
    [
        a * p0[0] + b * p1[0] + c * p2[0] + d * p3[0],
        a * p0[1] + b * p1[1] + c * p2[1] + d * p3[1],
    ]
}

/// Polyline with cumulative arc length, for position lookups by distance.
#[derive(Clone, Debug)]
pub struct Polyline {
    pts: Vec<Point>,
    cum: Vec<f64>,
}

impl Polyline {
    pub fn new(pts: Vec<Point>) -> Self {
        let mut cum = Vec::with_capacity(pts.len());
        let mut acc = 0.0;
        for (i, p) in pts.iter().enumerate() {
            if i > 0 {
                acc += dist(pts[i - 1], *p);
            }
            cum.push(acc);
        }
        Polyline { pts, cum }
    }

    pub fn points(&self) -> &[Point] {
        &self.pts
    }

    pub fn length(&self) -> f64 {
        self.cum.last().copied().unwrap_or(0.0)
    }

    fn segment(&self, s: f64) -> usize {
        match self.cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(self.pts.len().saturating_sub(2)),
            Err(i) => i.saturating_sub(1).min(self.pts.len().saturating_sub(2)),
        }
    }

    /// Position at arc length `s`; extrapolates linearly past either end.
    pub fn at(&self, s: f64) -> Point {
        if self.pts.len() == 1 {
            return self.pts[0];
        }
        let i = self.segment(s);
        let seg = self.cum[i + 1] - self.cum[i];
        let t = if seg > 0.0 { (s - self.cum[i]) / seg } else { 0.0 };
        lerp(self.pts[i], self.pts[i + 1], t)
    }

    /// Heading of the segment containing `s`.
    pub fn heading_at(&self, s: f64) -> f64 {
        if self.pts.len() < 2 {
            return 0.0;
        }
        let i = self.segment(s);
        let d = sub(self.pts[i + 1], self.pts[i]);
        d[1].atan2(d[0])
    }

    /// Closest point as (arc length, distance).
    pub fn project(&self, p: Point) -> (f64, f64) {
        let mut best = (0.0, f64::INFINITY);
        for i in 0..self.pts.len().saturating_sub(1) {
            let (a, b) = (self.pts[i], self.pts[i + 1]);
            let ab = sub(b, a);
            let len2 = ab[0] * ab[0] + ab[1] * ab[1];
            let t = if len2 > 0.0 {
                (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let d = dist(p, lerp(a, b, t));
            if d < best.1 {
                best = (self.cum[i] + t * (self.cum[i + 1] - self.cum[i]), d);
            }
        }
        if self.pts.len() == 1 {
            best = (0.0, dist(p, self.pts[0]));
        }
        best
    }

    /// Resamples to points spaced at most `step` apart.
    pub fn resample(&self, step: f64) -> Vec<Point> {
        let len = self.length();
        let n = (len / step).ceil().max(1.0) as usize;
        (0..=n).map(|i| self.at(len * i as f64 / n as f64)).collect()
    }

    /// First pair of arc lengths `(s_self, s_other)` where the two lines come
    /// within `tol` of each other, scanning `self` from its start.
    pub fn first_conflict(&self, other: &Polyline, from_self: f64, from_other: f64, tol: f64, step: f64) -> Option<(f64, f64)> {
        let mut s = from_self;
        while s <= self.length() {
            let p = self.at(s);
            let (so, d) = other.project(p);
            if d < tol && so >= from_other {
                return Some((s, so));
            }
            s += step;
        }
        None
    }
}
