//! Procedural track shapes used by tests, examples and the bundled circuit.

use std::f64::consts::PI;

use super::{Track, TrackSample};
use crate::error::Result;

/// Closed circle of radius `r` centred at the origin, starting at `(r, 0)`.
pub fn ring(r: f64, n: usize, w: f64, ccw: bool) -> Result<Track> {
    let dir = if ccw { 1.0 } else { -1.0 };
    let pts: Vec<TrackSample> = (0..n)
        .map(|i| {
            let a = dir * 2.0 * PI * i as f64 / n as f64;
            TrackSample {
                x: r * a.cos(),
                y: r * a.sin(),
                w,
            }
        })
        .collect();
    Track::new(&pts, true)
}

/// Open straight along +x from the origin.
pub fn straight(length: f64, n: usize, w: f64) -> Result<Track> {
    let pts: Vec<TrackSample> = (0..n)
        .map(|i| TrackSample {
            x: length * i as f64 / (n - 1) as f64,
            y: 0.0,
            w,
        })
        .collect();
    Track::new(&pts, false)
}

/// Open S-bend: a left half-circle followed by a right half-circle.
pub fn s_track(r: f64, n_per_arc: usize, w: f64) -> Result<Track> {
    let segs = [(PI * r, 1.0 / r), (PI * r, -1.0 / r)];
    sample_path(&segs, 2 * n_per_arc, w, false)
}

/// Open straight of length `l_straight` followed by a left semicircle of
/// radius `r` and a return straight.
pub fn hairpin(l_straight: f64, r: f64, spacing: f64, w: f64) -> Result<Track> {
    let segs = [(l_straight, 0.0), (PI * r, 1.0 / r), (l_straight, 0.0)];
    let total: f64 = segs.iter().map(|s| s.0).sum();
    let n = (total / spacing).round() as usize + 1;
    sample_path(&segs, n, w, false)
}

/// The bundled circuit: a long main straight, four left corners of
/// different radii (fast sweeper, hairpin, two medium bends) and an
/// S-chicane on the back straight. About 523 m long and 10 m wide.
pub fn circuit() -> Result<Track> {
    let (beta, rc) = (PI / 6.0, 20.0);
    let segs = [
        (150.0, 0.0),
        (PI / 2.0 * 30.0, 1.0 / 30.0),
        (40.0, 0.0),
        (PI / 2.0 * 12.0, 1.0 / 12.0),
        (60.0, 0.0),
        (beta * rc, 1.0 / rc),
        (2.0 * beta * rc, -1.0 / rc),
        (beta * rc, 1.0 / rc),
        (63.0, 0.0),
        (PI / 2.0 * 20.0, 1.0 / 20.0),
        (47.0, 0.0),
        (PI / 2.0 * 15.0, 1.0 / 15.0),
    ];
    let total: f64 = segs.iter().map(|s| s.0).sum();
    let n = (total / 2.0).round() as usize;
    sample_path(&segs, n, 10.0, true)
}

/// Samples a piecewise constant-curvature path (length, curvature) starting
/// at the origin heading +x. Closed paths get `n` samples spread over the
/// whole loop (the end point is the start); open paths include both ends.
fn sample_path(segs: &[(f64, f64)], n: usize, w: f64, closed: bool) -> Result<Track> {
    let total: f64 = segs.iter().map(|s| s.0).sum();
    let denom = if closed { n } else { n - 1 };
    let pts: Vec<TrackSample> = (0..n)
        .map(|i| {
            let (x, y) = pose_at(segs, total * i as f64 / denom as f64);
            TrackSample { x, y, w }
        })
        .collect();
    Track::new(&pts, closed)
}

fn pose_at(segs: &[(f64, f64)], s: f64) -> (f64, f64) {
    let (mut x, mut y, mut psi) = (0.0f64, 0.0f64, 0.0f64);
    let mut rem = s;
    for &(len, k) in segs {
        let l = rem.min(len);
        if k == 0.0 {
            x += l * psi.cos();
            y += l * psi.sin();
        } else {
            x += ((psi + k * l).sin() - psi.sin()) / k;
            y += (psi.cos() - (psi + k * l).cos()) / k;
        }
        psi += k * l;
        rem -= l;
        if rem <= 0.0 {
            break;
        }
    }
    (x, y)
}
