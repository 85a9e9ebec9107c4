//! Static SVG overlays of the track, the raceline and car trajectories.

use std::fmt::Write;

use crate::error::Result;
use crate::game::{RaceRecord, World};

const COLORS: [&str; 6] = [
    "#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];
const PAD: f64 = 10.0;

fn polyline(
    out: &mut String,
    pts: &[(f64, f64)],
    stroke: &str,
    width: f64,
    closed: bool,
    extra: &str,
) {
    let tag = if closed { "polygon" } else { "polyline" };
    let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    let _ = writeln!(
        out,
        r#"<{tag} points="{}" fill="none" stroke="{stroke}" stroke-width="{width}"{extra}/>"#,
        coords.join(" ")
    );
}

/// Track boundaries, raceline and the trajectories of every car in
/// `records`, one colour per car. `comment` is embedded as an XML comment.
pub fn track_svg(world: &World, records: &[RaceRecord], comment: &str) -> Result<String> {
    let track = &world.track;
    let n = track.n_unique();
    let s = &track.s()[..n];
    let mut left = Vec::with_capacity(n);
    let mut right = Vec::with_capacity(n);
    for &si in s {
        let half = track.width_at(si) / 2.0;
        left.push(track.frenet_to_global(si, half)?);
        right.push(track.frenet_to_global(si, -half)?);
    }
    let line: Vec<(f64, f64)> = world.raceline.points().iter().map(|p| (p.x, p.y)).collect();
    let mut paths: Vec<(usize, Vec<(f64, f64)>)> = Vec::new();
    for r in records {
        for car in 0..r.n_cars() {
            let pts = r
                .states
                .iter()
                .map(|x| track.frenet_to_global(track.wrap(x[car].p_x)?, x[car].p_y))
                .collect::<Result<_>>()?;
            paths.push((car, pts));
        }
    }

    let all = left.iter().chain(&right);
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for &(x, y) in all {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    // flip y so that the plot matches the usual axes
    let map = |pts: &[(f64, f64)]| -> Vec<(f64, f64)> {
        pts.iter()
            .map(|&(x, y)| (x - x0 + PAD, y1 - y + PAD))
            .collect()
    };
    let (w, h) = (x1 - x0 + 2.0 * PAD, y1 - y0 + 2.0 * PAD);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {w:.2} {h:.2}" width="{:.0}" height="{:.0}">"#,
        w * 3.0,
        h * 3.0
    );
    let _ = writeln!(out, "<!-- {} -->", comment.replace("--", "- -"));
    let closed = track.is_closed();
    polyline(&mut out, &map(&left), "#333333", 0.5, closed, "");
    polyline(&mut out, &map(&right), "#333333", 0.5, closed, "");
    polyline(
        &mut out,
        &map(&line),
        "#999999",
        0.4,
        closed,
        r#" stroke-dasharray="2,2""#,
    );
    for (car, pts) in &paths {
        polyline(
            &mut out,
            &map(pts),
            COLORS[car % COLORS.len()],
            0.6,
            false,
            r#" stroke-opacity="0.8""#,
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}
