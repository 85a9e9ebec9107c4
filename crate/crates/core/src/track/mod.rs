//! Track geometry: a sampled centerline with widths, arc length and curvature,
//! plus the Frenet (arc length, lateral offset) coordinate map.
//!
//! Lateral offsets are measured along vertex normals that are linearly
//! interpolated between samples, so `frenet_to_global` is a smooth map and
//! `global_to_frenet` inverts it exactly inside the track.

mod profile;
mod raceline;
pub mod shapes;

pub use profile::{velocity_profile, ProfileLibrary, VelocityProfile, VelocityProfileConfig};
pub use raceline::{
    compute_raceline, compute_raceline_with, RaceLine, RaceLinePoint, RacelineOptions,
};

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackSample {
    pub x: f64,
    pub y: f64,
    pub w: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Track {
    points: Vec<TrackSample>,
    s: Vec<f64>,
    kappa: Vec<f64>,
    normals: Vec<[f64; 2]>,
    closed: bool,
    w_max: f64,
}

#[inline]
pub(crate) fn cross(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

#[inline]
fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
fn norm(a: [f64; 2]) -> f64 {
    a[0].hypot(a[1])
}

/// Signed three-point (Menger) curvature, positive for a left turn.
pub(crate) fn menger_curvature(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    let ab = sub(b, a);
    let bc = sub(c, b);
    let ac = sub(c, a);
    let denom = norm(ab) * norm(bc) * norm(ac);
    if denom == 0.0 {
        return 0.0;
    }
    2.0 * cross(ab, bc) / denom
}

impl Track {
    /// Builds a track from centerline samples. For closed tracks the closing
    /// sample (equal to the first) is appended when the input omits it.
    pub fn new(samples: &[TrackSample], closed: bool) -> Result<Self> {
        let mut pts: Vec<TrackSample> = samples.to_vec();
        if closed && pts.len() >= 2 {
            let (f, l) = (pts[0], pts[pts.len() - 1]);
            if (f.x - l.x).hypot(f.y - l.y) < 1e-9 {
                pts.pop();
            }
        }
        if pts.len() < 3 {
            return Err(Error::TooFewSamples(pts.len()));
        }
        for (i, p) in pts.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.w.is_finite()) {
                return Err(Error::DegenerateGeometry(format!("non-finite sample {i}")));
            }
            if p.w <= 0.0 {
                return Err(Error::DegenerateGeometry(format!(
                    "sample {i} has non-positive width {}",
                    p.w
                )));
            }
        }
        let n = pts.len();
        let seg_count = if closed { n } else { n - 1 };
        for i in 0..seg_count {
            let (a, b) = (pts[i], pts[(i + 1) % n]);
            if (b.x - a.x).hypot(b.y - a.y) < 1e-9 {
                return Err(Error::DegenerateGeometry(format!(
                    "duplicate consecutive points at samples {i} and {}",
                    (i + 1) % n
                )));
            }
        }

        let xy = |i: usize| [pts[i].x, pts[i].y];
        let mut kappa = vec![0.0; n];
        for (i, k) in kappa.iter_mut().enumerate() {
            // Open tracks copy the curvature of the nearest interior sample.
            let (prev, mid, next) = if closed {
                ((i + n - 1) % n, i, (i + 1) % n)
            } else {
                let m = i.clamp(1, n - 2);
                (m - 1, m, m + 1)
            };
            *k = menger_curvature(xy(prev), xy(mid), xy(next));
        }

        let seg_normal = |i: usize| {
            let d = sub(xy((i + 1) % n), xy(i));
            let l = norm(d);
            [-d[1] / l, d[0] / l]
        };
        let mut normals = vec![[0.0; 2]; n];
        for (i, nv) in normals.iter_mut().enumerate() {
            let v = if closed {
                let a = seg_normal((i + n - 1) % n);
                let b = seg_normal(i);
                [a[0] + b[0], a[1] + b[1]]
            } else if i == 0 {
                seg_normal(0)
            } else if i == n - 1 {
                seg_normal(n - 2)
            } else {
                let a = seg_normal(i - 1);
                let b = seg_normal(i);
                [a[0] + b[0], a[1] + b[1]]
            };
            let l = norm(v);
            if l < 1e-9 {
                return Err(Error::DegenerateGeometry(format!(
                    "track reverses at sample {i}"
                )));
            }
            *nv = [v[0] / l, v[1] / l];
        }

        for (i, (p, k)) in pts.iter().zip(&kappa).enumerate() {
            if (k * p.w / 2.0).abs() >= 1.0 {
                return Err(Error::DegenerateGeometry(format!(
                    "curvature {k} at sample {i} too tight for half-width {}",
                    p.w / 2.0
                )));
            }
        }

        if closed {
            pts.push(pts[0]);
            kappa.push(kappa[0]);
            normals.push(normals[0]);
        }
        let mut s = Vec::with_capacity(pts.len());
        s.push(0.0);
        for i in 1..pts.len() {
            let d = (pts[i].x - pts[i - 1].x).hypot(pts[i].y - pts[i - 1].y);
            s.push(s[i - 1] + d);
        }
        let w_max = pts.iter().map(|p| p.w).fold(f64::INFINITY, f64::min);
        Ok(Self {
            points: pts,
            s,
            kappa,
            normals,
            closed,
            w_max,
        })
    }

    pub fn points(&self) -> &[TrackSample] {
        &self.points
    }

    pub fn s(&self) -> &[f64] {
        &self.s
    }

    pub fn kappa(&self) -> &[f64] {
        &self.kappa
    }

    pub fn normals(&self) -> &[[f64; 2]] {
        &self.normals
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Narrowest width along the track; the game treats it as the track width.
    pub fn w_max(&self) -> f64 {
        self.w_max
    }

    pub fn length(&self) -> f64 {
        *self.s.last().expect("track has samples")
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Number of distinct samples (the closing duplicate excluded).
    pub fn n_unique(&self) -> usize {
        if self.closed {
            self.points.len() - 1
        } else {
            self.points.len()
        }
    }

    /// Wraps an arc length onto `[0, length)` for closed tracks; open tracks
    /// must already be inside `[0, length]`.
    pub fn wrap(&self, p_x: f64) -> Result<f64> {
        let len = self.length();
        if self.closed {
            Ok(p_x.rem_euclid(len))
        } else if (-1e-9..=len + 1e-9).contains(&p_x) {
            Ok(p_x.clamp(0.0, len))
        } else {
            Err(Error::OutOfRange { p_x, length: len })
        }
    }

    /// Segment index and interpolation fraction for an arc length. Closed
    /// tracks wrap; open tracks clamp.
    pub fn locate(&self, p_x: f64) -> (usize, f64) {
        let len = self.length();
        let p = if self.closed {
            p_x.rem_euclid(len)
        } else {
            p_x.clamp(0.0, len)
        };
        let last_seg = self.s.len() - 2;
        let i = match self
            .s
            .binary_search_by(|v| v.partial_cmp(&p).expect("finite arc length"))
        {
            Ok(i) => i.min(last_seg),
            Err(i) => i.saturating_sub(1).min(last_seg),
        };
        let seg = self.s[i + 1] - self.s[i];
        (i, ((p - self.s[i]) / seg).clamp(0.0, 1.0))
    }

    pub fn kappa_at(&self, p_x: f64) -> f64 {
        let (i, t) = self.locate(p_x);
        self.kappa[i] * (1.0 - t) + self.kappa[i + 1] * t
    }

    /// Curvature and its slope along the track at `p_x`.
    pub fn kappa_and_slope_at(&self, p_x: f64) -> (f64, f64) {
        let (i, t) = self.locate(p_x);
        let (k0, k1) = (self.kappa[i], self.kappa[i + 1]);
        (
            k0 * (1.0 - t) + k1 * t,
            (k1 - k0) / (self.s[i + 1] - self.s[i]),
        )
    }

    pub fn width_at(&self, p_x: f64) -> f64 {
        let (i, t) = self.locate(p_x);
        self.points[i].w * (1.0 - t) + self.points[i + 1].w * t
    }

    /// Heading of the centerline segment containing `p_x`.
    pub fn heading_at(&self, p_x: f64) -> f64 {
        let (i, _) = self.locate(p_x);
        let (a, b) = (self.points[i], self.points[i + 1]);
        (b.y - a.y).atan2(b.x - a.x)
    }

    fn interp_normal(&self, i: usize, t: f64) -> [f64; 2] {
        let (a, b) = (self.normals[i], self.normals[i + 1]);
        let m = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
        let l = norm(m);
        [m[0] / l, m[1] / l]
    }

    pub fn frenet_to_global(&self, p_x: f64, p_y: f64) -> Result<(f64, f64)> {
        let p = self.wrap(p_x)?;
        let (i, t) = self.locate(p);
        let (a, b) = (self.points[i], self.points[i + 1]);
        let n = self.interp_normal(i, t);
        let cx = a.x + t * (b.x - a.x);
        let cy = a.y + t * (b.y - a.y);
        Ok((cx + p_y * n[0], cy + p_y * n[1]))
    }

    /// Inverse of [`Track::frenet_to_global`]. Among all segments admitting a
    /// normal-aligned foot point the one with the smallest lateral offset wins.
    pub fn global_to_frenet(&self, x: f64, y: f64) -> Result<(f64, f64)> {
        let mut candidates: Vec<(f64, f64)> = Vec::new();
        let mut max_seg: f64 = 0.0;
        for i in 0..self.points.len() - 1 {
            let c0 = [self.points[i].x, self.points[i].y];
            let d = sub([self.points[i + 1].x, self.points[i + 1].y], c0);
            let m0 = self.normals[i];
            let e = sub(self.normals[i + 1], m0);
            let r = sub([x, y], c0);
            max_seg = max_seg.max(norm(d));
            // cross(m0 + t e, r - t d) = 0
            let qa = -cross(e, d);
            let qb = cross(e, r) - cross(m0, d);
            let qc = cross(m0, r);
            for t in quadratic_roots(qa, qb, qc) {
                if !(-1e-12..=1.0 + 1e-12).contains(&t) {
                    continue;
                }
                let t = t.clamp(0.0, 1.0);
                let n = self.interp_normal(i, t);
                let foot = [r[0] - t * d[0], r[1] - t * d[1]];
                let p_y = foot[0] * n[0] + foot[1] * n[1];
                let kappa = self.kappa[i] * (1.0 - t) + self.kappa[i + 1] * t;
                if (p_y * kappa).abs() >= 1.0 {
                    continue;
                }
                let p_x = self.s[i] + t * (self.s[i + 1] - self.s[i]);
                candidates.push((p_x, p_y));
            }
        }
        let best = candidates
            .iter()
            .copied()
            .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()));
        if let Some((bx, by)) = best {
            // Equally near feet far apart along the track: the point sits on
            // an evolute (e.g. the centre of a ring) and has no unique image.
            let len = self.length();
            let tie = candidates.iter().any(|&(px, py)| {
                let mut gap = (px - bx).abs();
                if self.closed {
                    gap = gap.min(len - gap);
                }
                gap > 2.0 * max_seg && py.abs() <= by.abs() + 1e-6 * (1.0 + by.abs())
            });
            if tie {
                return Err(Error::OutsideFrenetDomain { x, y });
            }
        }
        match best {
            Some((p_x, p_y)) => {
                let p_x = if self.closed && p_x >= self.length() {
                    p_x - self.length()
                } else {
                    p_x
                };
                Ok((p_x, p_y))
            }
            None => Err(Error::OutsideFrenetDomain { x, y }),
        }
    }

    /// Reads a `x,y,w` CSV with a header row; `#` lines are comments.
    pub fn read_csv<R: Read>(reader: R, closed: bool) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let cols: Vec<&str> = headers.iter().collect();
        if cols != ["x", "y", "w"] {
            return Err(Error::InvalidData(format!(
                "track CSV header must be `x,y,w`, got `{}`",
                cols.join(",")
            )));
        }
        let mut samples = Vec::new();
        for row in rdr.deserialize() {
            let s: TrackSample = row?;
            samples.push(s);
        }
        Self::new(&samples, closed)
    }

    pub fn load_csv(path: &Path, closed: bool) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?, closed)
    }

    /// Writes the distinct samples as `x,y,w`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        for p in &self.points[..self.n_unique()] {
            wtr.serialize(p)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn quadratic_roots(a: f64, b: f64, c: f64) -> Vec<f64> {
    let scale = a.abs().max(b.abs()).max(c.abs());
    if scale == 0.0 {
        return vec![];
    }
    if a.abs() <= 1e-14 * scale {
        if b == 0.0 {
            return vec![];
        }
        return vec![-c / b];
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return vec![];
    }
    let sq = disc.sqrt();
    let q = -0.5 * (b + b.signum() * sq);
    let mut roots = vec![q / a];
    if q != 0.0 {
        roots.push(c / q);
    }
    roots
}
