//! SVG snapshots of a recorded trajectory.
//!
//! World coordinates are written verbatim inside a `<g transform="scale(1,-1)">`
//! group, so y points up; the viewBox is the flipped lumen bounding box.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::artifacts::{write_atomic, ArtifactError};
use crate::env::TraceRecord;
use crate::geometry::{LumenMap, Vec2, BRANCH, MAIN_AFTER};

const WALL_SAMPLES_PER_UNIT: f64 = 20.0;

/// Default frame cadence: about twenty frames per trajectory.
pub fn default_every(steps: usize) -> usize {
    (steps / 20).max(1)
}

/// Step indices that get a frame: every `every`-th, plus the last.
pub fn frame_steps(steps: usize, every: usize) -> Vec<usize> {
    if steps == 0 {
        return Vec::new();
    }
    let every = every.max(1);
    let mut out: Vec<usize> = (0..steps).step_by(every).collect();
    if *out.last().unwrap() != steps - 1 {
        out.push(steps - 1);
    }
    out
}

pub fn frame_name(step: usize, steps: usize) -> String {
    let width = steps.saturating_sub(1).to_string().len().max(4);
    format!("frame_{step:0width$}.svg")
}

/// Wall polylines: each centerline offset by `±radius`, keeping only the
/// parts on the boundary of the tube union, plus a straight chamfer across
/// the wedge between the two daughter lumens.
pub fn wall_polylines(lumen: &LumenMap) -> Vec<Vec<Vec2>> {
    let r = lumen.radius;
    let mut out = Vec::new();
    let mut wedge_ends = [None, None];
    for (i, arc) in lumen.arcs.iter().enumerate() {
        let n = ((arc.arclength * WALL_SAMPLES_PER_UNIT).ceil() as usize).max(2);
        for side in [1.0, -1.0] {
            let mut run: Vec<Vec2> = Vec::new();
            for k in 0..=n {
                let (c, t) = arc.eval(arc.arclength * k as f64 / n as f64);
                let p = c + t.perp() * (side * r);
                let covered = lumen
                    .arcs
                    .iter()
                    .enumerate()
                    .any(|(j, other)| j != i && other.nearest(p).1 < r - 1e-9);
                if covered {
                    if run.len() > 1 {
                        out.push(std::mem::take(&mut run));
                    }
                    run.clear();
                } else {
                    // The inner walls of the daughters start at the wedge.
                    let slot = match (i, side > 0.0) {
                        (MAIN_AFTER, true) => Some(0),
                        (BRANCH, false) => Some(1),
                        _ => None,
                    };
                    if let Some(s) = slot {
                        wedge_ends[s].get_or_insert(p);
                    }
                    run.push(p);
                }
            }
            if run.len() > 1 {
                out.push(run);
            }
        }
    }
    if let [Some(a), Some(b)] = wedge_ends {
        out.push(vec![a, b]);
    }
    out
}

fn points_attr(points: &[Vec2]) -> String {
    let mut s = String::new();
    for (i, p) in points.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{},{}", p.x, p.y);
    }
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One standalone SVG document for `record`.
pub fn render_frame(lumen: &LumenMap, walls: &[Vec<Vec2>], record: &TraceRecord) -> String {
    let (lo, hi) = lumen.bounds();
    let (lo, hi) = record.joints.iter().fold((lo, hi), |(lo, hi), p| {
        (Vec2::new(lo.x.min(p.x), lo.y.min(p.y)), Vec2::new(hi.x.max(p.x), hi.y.max(p.y)))
    });
    let (w, h) = (hi.x - lo.x, hi.y - lo.y);
    let stroke = lumen.radius * 0.04;
    let font = (w.max(h) * 0.03).max(0.2);
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" viewBox="{} {} {} {}" width="800" height="{}">"#,
        lo.x,
        -hi.y,
        w,
        h,
        (800.0 * h / w).round().max(1.0)
    );
    let _ = writeln!(svg, r#"<rect x="{}" y="{}" width="{w}" height="{h}" fill="white"/>"#, lo.x, -hi.y);
    let _ = writeln!(svg, r#"<g id="world" transform="scale(1,-1)">"#);
    let _ = writeln!(
        svg,
        r#"<circle id="goal" cx="{}" cy="{}" r="{}" fill="palegreen" fill-opacity="0.6"/>"#,
        lumen.goal_center.x, lumen.goal_center.y, lumen.goal_radius
    );
    for wall in walls {
        let _ = writeln!(
            svg,
            r#"<polyline class="wall" points="{}" fill="none" stroke="black" stroke-width="{stroke}"/>"#,
            points_attr(wall)
        );
    }
    let _ = writeln!(
        svg,
        r#"<polyline id="robot" points="{}" fill="none" stroke="steelblue" stroke-width="{}"/>"#,
        points_attr(&record.joints),
        stroke * 2.0
    );
    for p in &record.joints {
        let _ = writeln!(svg, r#"<circle class="joint" cx="{}" cy="{}" r="{}" fill="navy"/>"#, p.x, p.y, stroke * 2.5);
    }
    let _ = writeln!(svg, "</g>");
    let caption = format!("step {}  energy {:.4}  action {:?}", record.step, record.energy, record.action);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="{font}">{}</text>"#,
        lo.x + font * 0.5,
        -hi.y + font * 1.2,
        escape(&caption)
    );
    svg.push_str("</svg>\n");
    svg
}

/// Writes the selected frames into `out_dir` and returns their paths.
pub fn render_trajectory(
    lumen: &LumenMap,
    trajectory: &[TraceRecord],
    out_dir: &Path,
    every: usize,
) -> Result<Vec<PathBuf>, ArtifactError> {
    std::fs::create_dir_all(out_dir).map_err(|e| ArtifactError::io(out_dir, e))?;
    let walls = wall_polylines(lumen);
    let mut paths = Vec::new();
    for step in frame_steps(trajectory.len(), every) {
        let path = out_dir.join(frame_name(step, trajectory.len()));
        let doc = render_frame(lumen, &walls, &trajectory[step]);
        write_atomic(&path, |w| w.write_all(doc.as_bytes()))?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_selection() {
        assert_eq!(frame_steps(10, 5), vec![0, 5, 9]);
        assert_eq!(frame_steps(10, 1).len(), 10);
        assert_eq!(frame_steps(11, 5), vec![0, 5, 10]);
        assert_eq!(frame_steps(1, 7), vec![0]);
        assert!(frame_steps(0, 3).is_empty());
        assert_eq!(default_every(10), 1);
        assert_eq!(default_every(100), 5);
    }

    #[test]
    fn names_sort_by_step() {
        assert_eq!(frame_name(5, 10), "frame_0005.svg");
        assert_eq!(frame_name(12345, 20000), "frame_12345.svg");
        assert!(frame_name(9, 100) < frame_name(10, 100));
    }
}
