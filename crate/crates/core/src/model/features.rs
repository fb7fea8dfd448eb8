//! Fixed-size numeric inputs derived from scenes.

use crate::math::Tensor;
use crate::scene::geometry::{self, Point};
use crate::scene::{AgentTrack, Frame, LanePolyline, Scene, HISTORY_LEN, MAX_LANE_POINTS};

/// Meters to network units.
pub const COORD_SCALE: f64 = 1.0 / 32.0;
/// Meters per second to network units.
pub const SPEED_SCALE: f64 = 0.1;

pub const FRAME_FEATURES: usize = 6;
pub const AGENT_FEATURES: usize = HISTORY_LEN * FRAME_FEATURES;
pub const LANE_FEATURES: usize = MAX_LANE_POINTS * 3;

fn frame_features(f: &Frame, out: &mut Vec<f64>) {
    if f.present {
        let (s, c) = f.yaw.sin_cos();
        out.extend_from_slice(&[f.pos[0] * COORD_SCALE, f.pos[1] * COORD_SCALE, c, s, f.speed * SPEED_SCALE, 1.0]);
    } else {
        out.extend_from_slice(&[0.0; FRAME_FEATURES]);
    }
}

/// Flattened history, `[x, y, cos yaw, sin yaw, v, mask]` per frame; absent
/// frames are all zeros.
pub fn agent_features(a: &AgentTrack) -> Vec<f64> {
    let mut out = Vec::with_capacity(AGENT_FEATURES);
    let pad = HISTORY_LEN.saturating_sub(a.history.len());
    for _ in 0..pad {
        frame_features(&Frame::ABSENT, &mut out);
    }
    for f in a.history.iter().skip(a.history.len().saturating_sub(HISTORY_LEN)) {
        frame_features(f, &mut out);
    }
    out
}

/// Padded lane points followed by their validity mask.
pub fn lane_features(l: &LanePolyline) -> Vec<f64> {
    let mut out = vec![0.0; LANE_FEATURES];
    for (i, p) in l.pts.iter().take(MAX_LANE_POINTS).enumerate() {
        out[2 * i] = p[0] * COORD_SCALE;
        out[2 * i + 1] = p[1] * COORD_SCALE;
        out[2 * MAX_LANE_POINTS + i] = 1.0;
    }
    out
}

pub fn agent_matrix(scene: &Scene) -> Tensor {
    let rows: Vec<Vec<f64>> = scene.agents.iter().map(agent_features).collect();
    stack(rows, AGENT_FEATURES)
}

pub fn lane_matrix(scene: &Scene) -> Tensor {
    let rows: Vec<Vec<f64>> = scene.lanes.iter().map(lane_features).collect();
    stack(rows, LANE_FEATURES)
}

fn stack(rows: Vec<Vec<f64>>, width: usize) -> Tensor {
    let n = rows.len();
    Tensor::new(vec![n, width], rows.concat()).expect("row widths agree")
}

/// Query point as `[x, y, x', y']`: scene-frame coordinates plus the same
/// point in the agent's current heading frame, both scaled.
pub fn point_features(agent: &Frame, p: Point) -> [f64; 4] {
    let rel = geometry::rotate(geometry::sub(p, agent.pos), -agent.yaw);
    [p[0] * COORD_SCALE, p[1] * COORD_SCALE, rel[0] * COORD_SCALE, rel[1] * COORD_SCALE]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn absent_frames_are_zero() {
        let mut history = vec![Frame::ABSENT; HISTORY_LEN];
        history[9] = Frame { pos: [32.0, 0.0], yaw: 0.0, speed: 10.0, present: true };
        let f = agent_features(&AgentTrack { id: 0, history, future: None });
        assert_eq!(f.len(), AGENT_FEATURES);
        assert!(f[..54].iter().all(|v| *v == 0.0));
        assert_eq!(&f[54..], &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn point_in_agent_frame() {
        let a = Frame { pos: [1.0, 1.0], yaw: std::f64::consts::FRAC_PI_2, speed: 0.0, present: true };
        let f = point_features(&a, [1.0, 33.0]);
        assert!((f[2] - 1.0).abs() < 1e-12 && f[3].abs() < 1e-12);
    }
}
