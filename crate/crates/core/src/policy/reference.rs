//! Reference trajectories: the time-sampled raceline scaled by `zeta`, then
//! shifted laterally to overtake the car ahead or block the car behind.

use serde::{Deserialize, Serialize};

use super::{MpcConfig, PolicyParams};
use crate::dynamics::CarState;
use crate::error::{Error, Result};
use crate::track::{RaceLine, Track};

/// An opponent as seen by the planner: current Frenet position and
/// longitudinal Frenet speed, assumed constant over the horizon with no
/// lateral motion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Opponent {
    pub p_x: f64,
    pub p_y: f64,
    pub v_x: f64,
}

impl Opponent {
    pub fn from_state(s: &CarState, track: &Track) -> Result<Self> {
        let (v_x, _) = s.frenet_velocity(track.kappa_at(s.p_x))?;
        Ok(Self {
            p_x: s.p_x,
            p_y: s.p_y,
            v_x,
        })
    }

    /// Predicted longitudinal position after `k` steps.
    pub fn p_x_at(&self, k: usize, dt: f64) -> f64 {
        self.p_x + k as f64 * dt * self.v_x
    }
}

/// Horizon points `k = 1..=K` of the perturbed raceline together with the
/// perturbed velocities at those points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbedRaceline {
    pub p_x: Vec<f64>,
    pub p_y: Vec<f64>,
    pub v_x: Vec<f64>,
    pub v_y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTrajectory {
    pub p_x: Vec<f64>,
    pub p_y: Vec<f64>,
}

impl ReferenceTrajectory {
    pub fn len(&self) -> usize {
        self.p_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_x.is_empty()
    }
}

/// Forward recursion along the raceline. The anchor is the raceline point at
/// the car's longitudinal position; the raceline is sampled every `dt` from
/// there and its Frenet secant velocities are scaled by `zeta`.
pub fn perturbed_raceline(
    raceline: &RaceLine,
    state: &CarState,
    zeta: f64,
    horizon: usize,
    dt: f64,
) -> Result<PerturbedRaceline> {
    if !raceline.has_profile() {
        return Err(Error::InvalidConfig(
            "raceline has no velocity profile".into(),
        ));
    }
    let tau0 = raceline.time_at(state.p_x);
    let samples: Vec<(f64, f64)> = (0..=horizon + 1)
        .map(|m| raceline.frenet_at_time(tau0 + m as f64 * dt))
        .collect();
    let vel = |m: usize| {
        (
            zeta * (samples[m + 1].0 - samples[m].0) / dt,
            zeta * (samples[m + 1].1 - samples[m].1) / dt,
        )
    };
    let mut out = PerturbedRaceline {
        p_x: Vec::with_capacity(horizon),
        p_y: Vec::with_capacity(horizon),
        v_x: Vec::with_capacity(horizon),
        v_y: Vec::with_capacity(horizon),
    };
    let (mut px, mut py) = (state.p_x, raceline.eta_at(state.p_x));
    for k in 1..=horizon {
        let (vx, vy) = vel(k - 1);
        px += vx * dt;
        py += vy * dt;
        let (wx, wy) = vel(k);
        out.p_x.push(px);
        out.p_y.push(py);
        out.v_x.push(wx);
        out.v_y.push(wy);
    }
    Ok(out)
}

/// A car driving the raceline at centerline position `p_x`: on the line,
/// aligned with it and at the profile speed, with no slip or yaw rate.
pub fn raceline_state(track: &Track, raceline: &RaceLine, p_x: f64) -> Result<CarState> {
    if !raceline.has_profile() {
        return Err(Error::InvalidConfig(
            "raceline has no velocity profile".into(),
        ));
    }
    let h = 0.5;
    let eta = raceline.eta_at(p_x);
    let along = 2.0 * h * (1.0 - track.kappa_at(p_x) * eta);
    let across = raceline.eta_at(p_x + h) - raceline.eta_at(p_x - h);
    let secs = raceline.time_at(p_x + h) - raceline.time_at(p_x - h);
    Ok(CarState {
        p_x,
        p_y: eta,
        phi: across.atan2(along),
        v_x: along.hypot(across) / secs,
        ..Default::default()
    })
}

fn sign(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Lateral overtaking shift per horizon step: for each present opponent,
/// `sign(dy) * max((s1 - |dy|) * exp(-s2 * dx_k^2), 0)` where `dy` is the
/// current lateral gap and `dx_k` the predicted longitudinal gap.
pub fn overtake_adjustment(
    ego_p_y: f64,
    opponents: &[Option<Opponent>; 2],
    pert_p_x: &[f64],
    s1: f64,
    s2: f64,
    dt: f64,
) -> Vec<f64> {
    pert_p_x
        .iter()
        .enumerate()
        .map(|(idx, &px)| {
            let k = idx + 1;
            opponents
                .iter()
                .flatten()
                .map(|o| {
                    let dy = ego_p_y - o.p_y;
                    let dx = px - o.p_x_at(k, dt);
                    sign(dy) * ((s1 - dy.abs()) * (-s2 * dx * dx).exp()).max(0.0)
                })
                .sum()
        })
        .collect()
}

/// Lateral blocking shift per horizon step. An opponent contributes only
/// while the perturbed ego is not faster than it and not behind it.
/// `sign` multiplies every contribution (1 keeps the formula as written).
pub fn blocking_adjustment(
    pert: &PerturbedRaceline,
    opponents: &[Option<Opponent>; 2],
    s2: f64,
    s3: f64,
    dt: f64,
    sign: f64,
) -> Vec<f64> {
    (0..pert.p_x.len())
        .map(|idx| {
            let k = idx + 1;
            let (px, py, vx) = (pert.p_x[idx], pert.p_y[idx], pert.v_x[idx]);
            opponents
                .iter()
                .flatten()
                .map(|o| {
                    let ojx = o.p_x_at(k, dt);
                    if vx <= o.v_x && px >= ojx {
                        let dx = px - ojx;
                        sign * (o.p_y - py)
                            * (1.0 - (-s3 * (vx - o.v_x)).exp())
                            * (-s2 * dx * dx).exp()
                    } else {
                        0.0
                    }
                })
                .sum()
        })
        .collect()
}

/// Indices of the nearest car ahead and the nearest car behind `ego` by
/// longitudinal position. Equal positions count the lower index as ahead.
pub fn neighbours(states: &[CarState], ego: usize) -> (Option<usize>, Option<usize>) {
    let me = states[ego].p_x;
    let mut ahead: Option<usize> = None;
    let mut behind: Option<usize> = None;
    for (j, s) in states.iter().enumerate() {
        if j == ego {
            continue;
        }
        let is_ahead = s.p_x > me || (s.p_x == me && j < ego);
        if is_ahead {
            if ahead.is_none_or(|a| s.p_x < states[a].p_x) {
                ahead = Some(j);
            }
        } else if behind.is_none_or(|b| s.p_x > states[b].p_x) {
            behind = Some(j);
        }
    }
    (ahead, behind)
}

/// The ego's reference: perturbed raceline plus overtaking and blocking
/// shifts, clipped to the track half-width. Also returns the opponents
/// (ahead, behind) it was built against.
pub fn reference_trajectory(
    track: &Track,
    raceline: &RaceLine,
    states: &[CarState],
    ego: usize,
    theta: &PolicyParams,
    cfg: &MpcConfig,
) -> Result<(ReferenceTrajectory, [Option<Opponent>; 2])> {
    let pert = perturbed_raceline(raceline, &states[ego], theta.zeta, cfg.horizon, cfg.dt)?;
    let (ahead, behind) = neighbours(states, ego);
    let opp = |j: Option<usize>| {
        j.map(|j| Opponent::from_state(&states[j], track))
            .transpose()
    };
    let opponents = [opp(ahead)?, opp(behind)?];
    let ot = overtake_adjustment(
        states[ego].p_y,
        &opponents,
        &pert.p_x,
        theta.s1,
        theta.s2,
        cfg.dt,
    );
    let sign = if cfg.reverse_block_sign { -1.0 } else { 1.0 };
    let bl = blocking_adjustment(&pert, &opponents, theta.s2, theta.s3, cfg.dt, sign);
    let half = cfg.w_max / 2.0;
    let p_y = (0..cfg.horizon)
        .map(|k| (pert.p_y[k] + ot[k] + bl[k]).clamp(-half, half))
        .collect();
    Ok((ReferenceTrajectory { p_x: pert.p_x, p_y }, opponents))
}
