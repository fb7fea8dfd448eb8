//! Standalone SVG drawing of a scene with optional heatmaps and predictions.

use std::fmt::Write;

use scenecast::model::hier::HeatmapDump;
use scenecast::sampler::ModalitySet;
use scenecast::scene::geometry::Point;
use scenecast::scene::Scene;

const AGENT_COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];
const MODE_COLORS: [&str; 6] = ["#e41a1c", "#377eb8", "#4daf4a", "#984ea3", "#ff7f00", "#a65628"];
/// Pixels per meter.
const SCALE: f64 = 4.0;
const MARGIN: f64 = 5.0;

fn agent_color(i: usize) -> &'static str {
    AGENT_COLORS[i % AGENT_COLORS.len()]
}

struct Frame {
    min: Point,
    max: Point,
}

impl Frame {
    fn of(scene: &Scene) -> Frame {
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        let pts = scene
            .lanes
            .iter()
            .flat_map(|l| l.pts.iter().copied())
            .chain(scene.agents.iter().flat_map(|a| a.history.iter().filter(|f| f.present).map(|f| f.pos)))
            .chain(scene.agents.iter().flat_map(|a| a.future.iter().flatten().copied()));
        for p in pts {
            for d in 0..2 {
                min[d] = min[d].min(p[d]);
                max[d] = max[d].max(p[d]);
            }
        }
        if !min[0].is_finite() {
            return Frame { min: [-10.0, -10.0], max: [10.0, 10.0] };
        }
        Frame { min: [min[0] - MARGIN, min[1] - MARGIN], max: [max[0] + MARGIN, max[1] + MARGIN] }
    }

    /// SVG user coordinates with y pointing down.
    fn map(&self, p: Point) -> (f64, f64) {
        ((p[0] - self.min[0]) * SCALE, (self.max[1] - p[1]) * SCALE)
    }

    fn size(&self) -> (f64, f64) {
        ((self.max[0] - self.min[0]) * SCALE, (self.max[1] - self.min[1]) * SCALE)
    }
}

fn polyline(out: &mut String, f: &Frame, pts: impl Iterator<Item = Point>, style: &str) {
    let coords: Vec<String> = pts
        .map(|p| {
            let (x, y) = f.map(p);
            format!("{x:.2},{y:.2}")
        })
        .collect();
    if coords.len() >= 2 {
        let _ = writeln!(out, r#"<polyline points="{}" fill="none" {style}/>"#, coords.join(" "));
    }
}

/// Renders `scene` (scene frame). Heatmap cells get a fill opacity
/// proportional to their probability, maximal at each map's peak.
pub fn render_svg(scene: &Scene, heatmaps: &[HeatmapDump], predictions: Option<&ModalitySet>) -> String {
    let f = Frame::of(scene);
    let (w, h) = f.size();
    let mut out = String::new();
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.2} {h:.2}">"#
    );
    let _ = writeln!(out, "<title>scene {}</title>", scene.id);
    let _ = writeln!(out, r##"<rect x="0" y="0" width="{w:.2}" height="{h:.2}" fill="#ffffff"/>"##);

    let _ = writeln!(out, r#"<g id="lanes">"#);
    for l in &scene.lanes {
        polyline(&mut out, &f, l.pts.iter().copied(), r##"stroke="#b0b0b0" stroke-width="1""##);
    }
    let _ = writeln!(out, "</g>");

    let _ = writeln!(out, r#"<g id="heatmaps">"#);
    for hm in heatmaps {
        let color = scene.agents.iter().position(|a| a.id == hm.agent).map_or("#000000", agent_color);
        let peak = hm.rows.iter().map(|r| r[2]).fold(0.0, f64::max);
        let half = hm.config.cell_size(2) / 2.0;
        for r in hm.rows.iter().filter(|r| r[2] > 0.0) {
            let (x, y) = f.map([r[0] - half, r[1] + half]);
            let side = 2.0 * half * SCALE;
            let opacity = if peak > 0.0 { r[2] / peak } else { 0.0 };
            let _ = writeln!(
                out,
                r#"<rect class="cell" data-agent="{}" x="{x:.2}" y="{y:.2}" width="{side:.2}" height="{side:.2}" fill="{color}" fill-opacity="{opacity:.4}"/>"#,
                hm.agent
            );
        }
    }
    let _ = writeln!(out, "</g>");

    let _ = writeln!(out, r#"<g id="agents">"#);
    for (i, a) in scene.agents.iter().enumerate() {
        let color = agent_color(i);
        let style = format!(r#"stroke="{color}" stroke-width="2""#);
        polyline(&mut out, &f, a.history.iter().filter(|fr| fr.present).map(|fr| fr.pos), &style);
        if a.is_present() {
            let (x, y) = f.map(a.current().pos);
            let _ = writeln!(out, r#"<circle data-agent="{}" cx="{x:.2}" cy="{y:.2}" r="4" fill="{color}"/>"#, a.id);
        }
    }
    let _ = writeln!(out, "</g>");

    if let Some(set) = predictions {
        let _ = writeln!(out, r#"<g id="predictions">"#);
        for k in 0..set.k() {
            let mc = MODE_COLORS[k % MODE_COLORS.len()];
            for a in 0..set.num_agents() {
                if let Some(trajs) = &set.trajectories {
                    let style = format!(r#"stroke="{mc}" stroke-width="1" stroke-dasharray="3,2""#);
                    polyline(&mut out, &f, trajs[a][k].iter().copied(), &style);
                }
                let (x, y) = f.map(set.endpoint(a, k));
                let _ = writeln!(
                    out,
                    r#"<circle class="endpoint" data-agent="{}" data-modality="{k}" cx="{x:.2}" cy="{y:.2}" r="3" fill="{mc}" stroke="{}"/>"#,
                    set.agents[a],
                    agent_color(scene.agents.iter().position(|s| s.id == set.agents[a]).unwrap_or(a))
                );
            }
        }
        let _ = writeln!(out, "</g>");
    }
    out.push_str("</svg>\n");
    out
}
