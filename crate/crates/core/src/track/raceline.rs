//! Minimum-curvature raceline.
//!
//! The path is the centerline shifted by `eta[i]` along the vertex normals.
//! Its discrete three-point curvature is linearized in `eta` and the summed
//! squared curvature minimized over the box `|eta[i]| <= (w[i] - w_veh) / 2`
//! with a projected Newton method. A second pass re-linearizes around the
//! first solution; a pass is only accepted if the true (nonlinear) cost drops.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{menger_curvature, Track};
use crate::error::{Error, Result};
use crate::linalg::cholesky_solve;
use crate::track::VelocityProfile;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RaceLinePoint {
    pub x: f64,
    pub y: f64,
    /// Arc length along the raceline itself.
    pub s: f64,
    pub v_x: f64,
    pub a_x: f64,
    pub psi: f64,
    pub kappa: f64,
    pub eta: f64,
    /// Arc length of the underlying centerline sample.
    pub s_center: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RaceLine {
    points: Vec<RaceLinePoint>,
    closed: bool,
    track_length: f64,
    /// Cumulative time at each sample; empty until a profile is applied.
    time: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct RacelineOptions {
    /// Linearize-and-solve passes (1 = no re-linearization).
    pub passes: usize,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for RacelineOptions {
    fn default() -> Self {
        Self {
            passes: 2,
            max_iters: 200,
            tol: 1e-12,
        }
    }
}

pub fn compute_raceline(track: &Track, w_veh: f64) -> Result<RaceLine> {
    compute_raceline_with(track, w_veh, RacelineOptions::default())
}

pub fn compute_raceline_with(track: &Track, w_veh: f64, opts: RacelineOptions) -> Result<RaceLine> {
    let n = track.n_unique();
    let pts = track.points();
    for (index, p) in pts.iter().enumerate() {
        if p.w <= w_veh {
            return Err(Error::TrackTooNarrow {
                index,
                width: p.w,
                w_veh,
            });
        }
    }
    let bound: Vec<f64> = pts[..n].iter().map(|p| (p.w - w_veh) / 2.0).collect();
    let lo: Vec<f64> = bound.iter().map(|b| -b).collect();
    let geom = Geometry { track, n };

    let mut eta = vec![0.0; n];
    let mut cost = geom.cost(&eta);
    for _ in 0..opts.passes.max(1) {
        let (h, f) = geom.linearized_qp(&eta);
        let cand = solve_box_qp(&h, &f, &lo, &bound, &eta, opts.max_iters, opts.tol);
        // Backtrack along the segment towards the current iterate until the
        // true cost does not increase; the segment stays inside the box.
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let trial: Vec<f64> = eta
                .iter()
                .zip(&cand)
                .map(|(e, c)| e + step * (c - e))
                .collect();
            let c = geom.cost(&trial);
            if c <= cost {
                accepted = Some((trial, c));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((e, c)) => {
                let done = (cost - c).abs() <= 1e-15 * cost.max(1e-300);
                eta = e;
                cost = c;
                if done {
                    break;
                }
            }
            None => break,
        }
    }
    Ok(RaceLine::from_offsets(track, &eta))
}

struct Geometry<'a> {
    track: &'a Track,
    n: usize,
}

impl Geometry<'_> {
    fn point(&self, i: usize, eta: f64) -> [f64; 2] {
        let p = self.track.points()[i];
        let m = self.track.normals()[i];
        [p.x + eta * m[0], p.y + eta * m[1]]
    }

    /// Index triples whose curvature enters the cost.
    fn stencils(&self) -> Vec<[usize; 3]> {
        let n = self.n;
        if self.track.is_closed() {
            (0..n).map(|i| [(i + n - 1) % n, i, (i + 1) % n]).collect()
        } else {
            (1..n - 1).map(|i| [i - 1, i, i + 1]).collect()
        }
    }

    fn curvature(&self, st: [usize; 3], e: [f64; 3]) -> f64 {
        menger_curvature(
            self.point(st[0], e[0]),
            self.point(st[1], e[1]),
            self.point(st[2], e[2]),
        )
    }

    fn cost(&self, eta: &[f64]) -> f64 {
        self.stencils()
            .into_iter()
            .map(|st| {
                let k = self.curvature(st, [eta[st[0]], eta[st[1]], eta[st[2]]]);
                k * k
            })
            .sum()
    }

    /// Quadratic model `0.5 x'Hx + f'x` of the summed squared curvature,
    /// linearized at `eta` (H row-major, n x n).
    fn linearized_qp(&self, eta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.n;
        let mut h = vec![0.0; n * n];
        let mut f = vec![0.0; n];
        let step = 1e-6;
        for st in self.stencils() {
            let e = [eta[st[0]], eta[st[1]], eta[st[2]]];
            let k0 = self.curvature(st, e);
            let mut jac = [0.0; 3];
            for (j, d) in jac.iter_mut().enumerate() {
                let mut ep = e;
                let mut em = e;
                ep[j] += step;
                em[j] -= step;
                *d = (self.curvature(st, ep) - self.curvature(st, em)) / (2.0 * step);
            }
            // residual(x) = k0 + J (x - eta) = J x + c
            let c = k0 - (0..3).map(|j| jac[j] * e[j]).sum::<f64>();
            for a in 0..3 {
                f[st[a]] += 2.0 * jac[a] * c;
                for b in 0..3 {
                    h[st[a] * n + st[b]] += 2.0 * jac[a] * jac[b];
                }
            }
        }
        (h, f)
    }
}

fn quad_value(h: &[f64], f: &[f64], x: &[f64]) -> f64 {
    let n = x.len();
    let mut v = 0.0;
    for i in 0..n {
        let row = &h[i * n..(i + 1) * n];
        let hx: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
        v += x[i] * (0.5 * hx + f[i]);
    }
    v
}

fn gradient(h: &[f64], f: &[f64], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|i| {
            let row = &h[i * n..(i + 1) * n];
            row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + f[i]
        })
        .collect()
}

/// In-place Cholesky solve of the SPD system `a x = b` (a is m x m row-major).
/// Projected Newton method for `min 0.5 x'Hx + f'x` s.t. `lo <= x <= hi`
/// with H positive semidefinite.
fn solve_box_qp(
    h: &[f64],
    f: &[f64],
    lo: &[f64],
    hi: &[f64],
    x0: &[f64],
    max_iters: usize,
    tol: f64,
) -> Vec<f64> {
    let n = x0.len();
    let clamp = |x: &mut [f64]| {
        for i in 0..n {
            x[i] = x[i].clamp(lo[i], hi[i]);
        }
    };
    let mut x = x0.to_vec();
    clamp(&mut x);
    let trace: f64 = (0..n).map(|i| h[i * n + i]).sum();
    let ridge = 1e-12 * (trace / n as f64).max(1e-300);
    let mut q = quad_value(h, f, &x);
    for _ in 0..max_iters {
        let g = gradient(h, f, &x);
        let pg = (0..n)
            .map(|i| (x[i] - (x[i] - g[i]).clamp(lo[i], hi[i])).abs())
            .fold(0.0, f64::max);
        if pg <= tol {
            break;
        }
        let eps = pg.min(1e-6);
        let free: Vec<usize> = (0..n)
            .filter(|&i| {
                !((x[i] <= lo[i] + eps && g[i] > 0.0) || (x[i] >= hi[i] - eps && g[i] < 0.0))
            })
            .collect();
        let mut dir = vec![0.0; n];
        let m = free.len();
        let mut newton_ok = false;
        if m > 0 {
            let mut a = vec![0.0; m * m];
            let mut b = vec![0.0; m];
            for (r, &i) in free.iter().enumerate() {
                for (c, &j) in free.iter().enumerate() {
                    a[r * m + c] = h[i * n + j];
                }
                a[r * m + r] += ridge;
                b[r] = -g[i];
            }
            if cholesky_solve(&mut a, &mut b, m) {
                for (r, &i) in free.iter().enumerate() {
                    dir[i] = b[r];
                }
                newton_ok = true;
            }
        }
        let mut moved = false;
        if newton_ok {
            moved = line_search(h, f, lo, hi, &mut x, &mut q, &g, &dir, 1.0);
        }
        if !moved {
            // Projected gradient fallback with a Cauchy step length.
            let hg = gradient(h, &vec![0.0; n], &g);
            let ghg: f64 = g.iter().zip(&hg).map(|(a, b)| a * b).sum();
            let gg: f64 = g.iter().map(|v| v * v).sum();
            let alpha = if ghg > 0.0 { gg / ghg } else { 1.0 };
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            if !line_search(h, f, lo, hi, &mut x, &mut q, &g, &neg, alpha) {
                break;
            }
        }
    }
    x
}

#[allow(clippy::too_many_arguments)]
fn line_search(
    h: &[f64],
    f: &[f64],
    lo: &[f64],
    hi: &[f64],
    x: &mut Vec<f64>,
    q: &mut f64,
    g: &[f64],
    dir: &[f64],
    t0: f64,
) -> bool {
    let n = x.len();
    let mut t = t0;
    for _ in 0..60 {
        let trial: Vec<f64> = (0..n)
            .map(|i| (x[i] + t * dir[i]).clamp(lo[i], hi[i]))
            .collect();
        let decrease: f64 = (0..n).map(|i| g[i] * (trial[i] - x[i])).sum();
        let qt = quad_value(h, f, &trial);
        if qt < *q && qt <= *q + 1e-4 * decrease {
            *x = trial;
            *q = qt;
            return true;
        }
        t *= 0.5;
    }
    false
}

impl RaceLine {
    /// Builds the raceline geometry for given lateral offsets (one per
    /// distinct track sample). Velocities stay zero until a profile is applied.
    pub fn from_offsets(track: &Track, eta: &[f64]) -> Self {
        let n = track.n_unique();
        let closed = track.is_closed();
        let tp = track.points();
        let nm = track.normals();
        let xy: Vec<[f64; 2]> = (0..n)
            .map(|i| [tp[i].x + eta[i] * nm[i][0], tp[i].y + eta[i] * nm[i][1]])
            .collect();
        let total = track.len();
        let idx = |i: usize| if closed { i % n } else { i };
        let mut points = Vec::with_capacity(total);
        let mut s = 0.0;
        for i in 0..total {
            let p = xy[idx(i)];
            if i > 0 {
                let q = xy[idx(i - 1)];
                s += (p[0] - q[0]).hypot(p[1] - q[1]);
            }
            let (prev, mid, next) = if closed {
                let j = i % n;
                ((j + n - 1) % n, j, (j + 1) % n)
            } else {
                let m = i.clamp(1, n - 2);
                (m - 1, m, m + 1)
            };
            let kappa = menger_curvature(xy[prev], xy[mid], xy[next]);
            let (a, b) = if closed {
                (xy[prev], xy[next])
            } else {
                (xy[i.saturating_sub(1)], xy[(i + 1).min(n - 1)])
            };
            let psi = (b[1] - a[1]).atan2(b[0] - a[0]);
            points.push(RaceLinePoint {
                x: p[0],
                y: p[1],
                s,
                v_x: 0.0,
                a_x: 0.0,
                psi,
                kappa,
                eta: eta[idx(i)],
                s_center: track.s()[i],
            });
        }
        Self {
            points,
            closed,
            track_length: track.length(),
            time: Vec::new(),
        }
    }

    pub fn points(&self) -> &[RaceLinePoint] {
        &self.points
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn track_length(&self) -> f64 {
        self.track_length
    }

    /// Length of the raceline path itself.
    pub fn path_length(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.s)
    }

    pub fn has_profile(&self) -> bool {
        !self.time.is_empty()
    }

    /// Copies per-sample speeds and accelerations into the raceline.
    pub fn apply_profile(&mut self, profile: &VelocityProfile) -> Result<()> {
        if profile.v.len() != self.points.len() {
            return Err(Error::DimensionMismatch {
                expected: self.points.len(),
                got: profile.v.len(),
            });
        }
        if profile.v.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidData(
                "velocity profile must be positive".into(),
            ));
        }
        for (p, (v, a)) in self.points.iter_mut().zip(profile.v.iter().zip(&profile.a)) {
            p.v_x = *v;
            p.a_x = *a;
        }
        let mut time = Vec::with_capacity(self.points.len());
        time.push(0.0);
        for w in self.points.windows(2) {
            let ds = w[1].s - w[0].s;
            let t = time.last().copied().unwrap_or(0.0) + 2.0 * ds / (w[0].v_x + w[1].v_x);
            time.push(t);
        }
        self.time = time;
        Ok(())
    }

    /// Time to drive the whole raceline once (requires a profile).
    pub fn lap_time(&self) -> f64 {
        self.time.last().copied().unwrap_or(0.0)
    }

    /// Segment index and fraction for a centerline arc length.
    fn locate_center(&self, s_center: f64) -> (usize, f64, f64) {
        let (laps, s) = if self.closed {
            let l = self.track_length;
            ((s_center / l).floor(), s_center.rem_euclid(l))
        } else {
            (0.0, s_center.clamp(0.0, self.track_length))
        };
        let i = self
            .points
            .partition_point(|p| p.s_center <= s)
            .saturating_sub(1)
            .min(self.points.len() - 2);
        let (a, b) = (self.points[i].s_center, self.points[i + 1].s_center);
        (i, ((s - a) / (b - a)).clamp(0.0, 1.0), laps)
    }

    /// Raceline lateral offset at a centerline arc length.
    pub fn eta_at(&self, s_center: f64) -> f64 {
        let (i, t, _) = self.locate_center(s_center);
        self.points[i].eta * (1.0 - t) + self.points[i + 1].eta * t
    }

    /// Raceline time (possibly beyond one lap) at a centerline arc length.
    pub fn time_at(&self, s_center: f64) -> f64 {
        let (i, t, laps) = self.locate_center(s_center);
        laps * self.lap_time() + self.time[i] * (1.0 - t) + self.time[i + 1] * t
    }

    /// Frenet position `(s_center, eta)` reached at raceline time `tau`.
    /// Closed tracks continue into further laps with an unwrapped arc length.
    pub fn frenet_at_time(&self, tau: f64) -> (f64, f64) {
        let lap = self.lap_time();
        let (laps, t) = if self.closed {
            ((tau / lap).floor(), tau.rem_euclid(lap))
        } else {
            (0.0, tau.clamp(0.0, lap))
        };
        let i = self
            .time
            .partition_point(|&v| v <= t)
            .saturating_sub(1)
            .min(self.points.len() - 2);
        let span = self.time[i + 1] - self.time[i];
        let f = if span > 0.0 {
            ((t - self.time[i]) / span).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (a, b) = (&self.points[i], &self.points[i + 1]);
        (
            laps * self.track_length + a.s_center + f * (b.s_center - a.s_center),
            a.eta + f * (b.eta - a.eta),
        )
    }

    /// Writes `x,y,s,v_x,a_x,psi,kappa,eta`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["x", "y", "s", "v_x", "a_x", "psi", "kappa", "eta"])?;
        for p in &self.points {
            wtr.write_record(
                [p.x, p.y, p.s, p.v_x, p.a_x, p.psi, p.kappa, p.eta].map(|v| v.to_string()),
            )?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Summed squared curvature over the samples entering the cost.
    pub fn curvature_cost(&self) -> f64 {
        let n = if self.closed {
            self.points.len() - 1
        } else {
            self.points.len()
        };
        let range = if self.closed { 0..n } else { 1..n - 1 };
        self.points[range].iter().map(|p| p.kappa * p.kappa).sum()
    }
}
