//! Single-shooting tracking MPC.
//!
//! Decision variables are the throttle `d_k` and the steering change
//! `delta_k - delta_{k-1}` per horizon step, both boxed and handled by
//! projection. The objective is a sum of squared residuals (tracking,
//! control changes, and hinge penalties for the track edge and car
//! separation), minimized by a projected Levenberg-Marquardt iteration with
//! exact Jacobians propagated through the rolled-out dynamics. Steps are only
//! accepted when they lower the objective.

use serde::{Deserialize, Serialize};

use super::reference::{reference_trajectory, Opponent, ReferenceTrajectory};
use super::PolicyParams;
use crate::dynamics::{step, step_jacobian, CarState, ControlInput, VehicleParams};
use crate::error::{Error, Result};
use crate::linalg::cholesky_solve;
use crate::track::{RaceLine, Track};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    /// Planning horizon in steps.
    pub horizon: usize,
    pub dt: f64,
    /// Longitudinal separation (m).
    pub p_x_min: f64,
    /// Lateral separation (m).
    pub p_y_min: f64,
    /// Track width (m); the car must stay within half of it.
    pub w_max: f64,
    pub penalty_weight: f64,
    /// Steering changes enter the control-change penalty multiplied by this
    /// factor (1/rad), so a unit weight is comparable to metres of error.
    pub steer_scale: f64,
    pub max_iters: usize,
    /// Relative objective decrease below which the solver stops.
    pub tol: f64,
    /// Flips the sign of the blocking shift.
    pub reverse_block_sign: bool,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            dt: 0.1,
            p_x_min: 4.0,
            p_y_min: 2.0,
            w_max: 10.0,
            penalty_weight: 100.0,
            steer_scale: 30.0,
            max_iters: 20,
            tol: 1e-9,
            reverse_block_sign: false,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.horizon == 0 {
            return bad("mpc horizon must be at least 1");
        }
        if !(self.dt > 0.0) {
            return bad("mpc dt must be positive");
        }
        if !(self.penalty_weight > 0.0) || !(self.w_max > 0.0) || !(self.steer_scale > 0.0) {
            return bad("mpc penalty_weight, steer_scale and w_max must be positive");
        }
        if !(self.p_x_min >= 0.0) || !(self.p_y_min >= 0.0) {
            return bad("mpc separations must be non-negative");
        }
        Ok(())
    }
}

/// Everything one MPC solve needs.
#[derive(Debug, Clone, Copy)]
pub struct MpcProblem<'a> {
    pub track: &'a Track,
    pub vp: &'a VehicleParams,
    pub cfg: &'a MpcConfig,
    pub state: CarState,
    pub reference: &'a ReferenceTrajectory,
    /// Opponents to keep clear of, predicted at constant speed.
    pub opponents: &'a [Opponent],
    /// Tracking weight.
    pub q: f64,
    /// Control applied on the previous step.
    pub prev: ControlInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcSolution {
    pub controls: Vec<ControlInput>,
    /// Planned states including the initial one (`horizon + 1` entries).
    pub states: Vec<CarState>,
    pub objective: f64,
    /// Largest constraint violation along the plan (m).
    pub residual: f64,
    pub iterations: usize,
}

struct Eval {
    cost: f64,
    r: Vec<f64>,
    states: Vec<CarState>,
    controls: Vec<ControlInput>,
    residual: f64,
}

struct Layout {
    k: usize,
    n_opp: usize,
}

impl Layout {
    fn n_var(&self) -> usize {
        2 * self.k
    }

    fn n_res(&self) -> usize {
        3 * self.k + 2 * (self.k - 1) + self.n_opp * self.k
    }
}

fn controls_from(z: &[f64], prob: &MpcProblem) -> (Vec<ControlInput>, Vec<bool>) {
    let k = prob.cfg.horizon;
    let vp = prob.vp;
    let mut last = prob.prev.delta;
    let mut gate = Vec::with_capacity(k);
    let controls = (0..k)
        .map(|i| {
            let raw = last + z[k + i];
            let delta = raw.clamp(vp.delta_min, vp.delta_max);
            gate.push(raw == delta);
            last = delta;
            ControlInput { d: z[i], delta }
        })
        .collect();
    (controls, gate)
}

fn bounds(prob: &MpcProblem) -> (Vec<f64>, Vec<f64>) {
    let k = prob.cfg.horizon;
    let vp = prob.vp;
    let mut lo = vec![vp.d_min; k];
    lo.extend(std::iter::repeat_n(vp.delta_rate_min, k));
    let mut hi = vec![vp.d_max; k];
    hi.extend(std::iter::repeat_n(vp.delta_rate_max, k));
    (lo, hi)
}

fn project(z: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, a), b) in z.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(*a, *b);
    }
}

fn hinge(v: f64) -> f64 {
    v.max(0.0)
}

/// Rolls out `z`, computing residuals and optionally their Jacobian
/// (row-major, `n_res x n_var`).
fn evaluate(prob: &MpcProblem, z: &[f64], jac: Option<&mut Vec<f64>>) -> Option<Eval> {
    let cfg = prob.cfg;
    let lay = Layout {
        k: cfg.horizon,
        n_opp: prob.opponents.len(),
    };
    let (kk, nv) = (lay.k, lay.n_var());
    let (controls, gate) = controls_from(z, prob);
    let sq = prob.q.sqrt();
    let sw = cfg.penalty_weight.sqrt();
    let ss = cfg.steer_scale;
    let half = cfg.w_max / 2.0;

    let want_jac = jac.is_some();
    let mut jrows = if want_jac {
        vec![0.0; lay.n_res() * nv]
    } else {
        Vec::new()
    };
    // state sensitivity dx_k/dz (6 x nv) and control sensitivity du_k/dz (2 x nv)
    let mut sens = vec![0.0; 6 * nv];
    let mut u_sens = vec![0.0; 2 * nv];
    let mut u_prev_sens = vec![0.0; 2 * nv];

    let mut states = Vec::with_capacity(kk + 1);
    states.push(prob.state);
    let mut r = vec![0.0; lay.n_res()];
    let mut residual: f64 = 0.0;
    for k in 0..kk {
        let x = states[k];
        let (kappa, slope) = prob.track.kappa_and_slope_at(x.p_x);
        let next = step(&x, &controls[k], prob.vp, kappa, cfg.dt).ok()?;
        if !next.is_finite() {
            return None;
        }
        if want_jac {
            let (jx, ju) = step_jacobian(&x, &controls[k], prob.vp, kappa, slope, cfg.dt).ok()?;
            u_prev_sens.copy_from_slice(&u_sens);
            u_sens.iter_mut().for_each(|v| *v = 0.0);
            u_sens[k] = 1.0;
            if gate[k] {
                if k > 0 {
                    for c in 0..nv {
                        u_sens[nv + c] = u_prev_sens[nv + c];
                    }
                }
                u_sens[nv + kk + k] = 1.0;
            }
            let mut new_sens = vec![0.0; 6 * nv];
            for row in 0..6 {
                let out = &mut new_sens[row * nv..(row + 1) * nv];
                for (col, &a) in jx[row].iter().enumerate() {
                    if a != 0.0 {
                        let src = &sens[col * nv..(col + 1) * nv];
                        out.iter_mut().zip(src).for_each(|(o, s)| *o += a * s);
                    }
                }
                for (col, &b) in ju[row].iter().enumerate() {
                    if b != 0.0 {
                        let src = &u_sens[col * nv..(col + 1) * nv];
                        out.iter_mut().zip(src).for_each(|(o, s)| *o += b * s);
                    }
                }
            }
            sens = new_sens;
        }
        states.push(next);

        // residuals for step k + 1
        let base = 3 * k;
        r[base] = sq * (next.p_x - prob.reference.p_x[k]);
        r[base + 1] = sq * (next.p_y - prob.reference.p_y[k]);
        let over = hinge(next.p_y.abs() - half);
        r[base + 2] = sw * over;
        residual = residual.max(over);
        if want_jac {
            for c in 0..nv {
                jrows[base * nv + c] = sq * sens[c];
                jrows[(base + 1) * nv + c] = sq * sens[nv + c];
                if over > 0.0 {
                    jrows[(base + 2) * nv + c] = sw * next.p_y.signum() * sens[nv + c];
                }
            }
        }
        if k > 0 {
            let row = 3 * kk + 2 * (k - 1);
            r[row] = controls[k].d - controls[k - 1].d;
            r[row + 1] = ss * (controls[k].delta - controls[k - 1].delta);
            if want_jac {
                for c in 0..nv {
                    jrows[row * nv + c] = u_sens[c] - u_prev_sens[c];
                    jrows[(row + 1) * nv + c] = ss * (u_sens[nv + c] - u_prev_sens[nv + c]);
                }
            }
        }
        for (j, o) in prob.opponents.iter().enumerate() {
            let row = 3 * kk + 2 * (kk - 1) + j * kk + k;
            let dx = next.p_x - o.p_x_at(k + 1, cfg.dt);
            let dy = next.p_y - o.p_y;
            let hx = hinge(cfg.p_x_min - dx.abs());
            let hy = hinge(cfg.p_y_min - dy.abs());
            r[row] = sw * hx * hy;
            residual = residual.max(hx.min(hy));
            if want_jac && hx > 0.0 && hy > 0.0 {
                let (gx, gy) = (-sign(dx) * hy, -sign(dy) * hx);
                for c in 0..nv {
                    jrows[row * nv + c] = sw * (gx * sens[c] + gy * sens[nv + c]);
                }
            }
        }
    }
    let cost: f64 = r.iter().map(|v| v * v).sum();
    if !cost.is_finite() {
        return None;
    }
    if let Some(j) = jac {
        *j = jrows;
    }
    Some(Eval {
        cost,
        r,
        states,
        controls,
        residual,
    })
}

fn sign(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Approximately minimizes the tracking objective. Without a warm start the
/// initial guess holds the previous control constant. The returned objective
/// never exceeds the objective of the initial guess.
pub fn mpc_solve(prob: &MpcProblem, warm: Option<&[ControlInput]>) -> Result<MpcSolution> {
    let cfg = prob.cfg;
    cfg.validate()?;
    let kk = cfg.horizon;
    if prob.reference.len() != kk {
        return Err(Error::DimensionMismatch {
            expected: kk,
            got: prob.reference.len(),
        });
    }
    let nv = 2 * kk;
    let (lo, hi) = bounds(prob);
    let mut z = vec![0.0; nv];
    z[..kk].iter_mut().for_each(|v| *v = prob.prev.d);
    if let Some(w) = warm {
        if w.len() != kk {
            return Err(Error::DimensionMismatch {
                expected: kk,
                got: w.len(),
            });
        }
        let mut last = prob.prev.delta;
        for (i, u) in w.iter().enumerate() {
            z[i] = u.d;
            z[kk + i] = u.delta - last;
            last = u.delta;
        }
    }
    project(&mut z, &lo, &hi);

    let mut jac = Vec::new();
    let mut cur = evaluate(prob, &z, Some(&mut jac)).ok_or(Error::NonFiniteObjective)?;
    let mut mu = 1e-3;
    let mut iterations = 0;
    let mut grad = vec![0.0; nv];
    let mut hess = vec![0.0; nv * nv];
    let n_res = cur.r.len();
    while iterations < cfg.max_iters {
        // g = J' r, H = J' J
        grad.iter_mut().for_each(|v| *v = 0.0);
        hess.iter_mut().for_each(|v| *v = 0.0);
        for row in 0..n_res {
            let jr = &jac[row * nv..(row + 1) * nv];
            let rv = cur.r[row];
            if rv == 0.0 && jr.iter().all(|&v| v == 0.0) {
                continue;
            }
            for a in 0..nv {
                let ja = jr[a];
                if ja == 0.0 {
                    continue;
                }
                grad[a] += ja * rv;
                let hrow = &mut hess[a * nv..(a + 1) * nv];
                for b in 0..nv {
                    hrow[b] += ja * jr[b];
                }
            }
        }
        // variables held at a bound by the gradient stay fixed
        let free: Vec<usize> = (0..nv)
            .filter(|&i| !((z[i] <= lo[i] && grad[i] > 0.0) || (z[i] >= hi[i] && grad[i] < 0.0)))
            .collect();
        let pg: f64 = free.iter().map(|&i| grad[i] * grad[i]).sum::<f64>().sqrt();
        if free.is_empty() || pg < 1e-14 {
            break;
        }
        let m = free.len();
        let mut accepted = false;
        while iterations < cfg.max_iters && mu < 1e12 {
            iterations += 1;
            let mut a = vec![0.0; m * m];
            let mut b = vec![0.0; m];
            for (p, &i) in free.iter().enumerate() {
                for (q, &j) in free.iter().enumerate() {
                    a[p * m + q] = hess[i * nv + j];
                }
                a[p * m + p] += mu * (hess[i * nv + i] + 1e-9);
                b[p] = -grad[i];
            }
            if !cholesky_solve(&mut a, &mut b, m) {
                mu *= 5.0;
                continue;
            }
            let mut trial = z.clone();
            for (p, &i) in free.iter().enumerate() {
                trial[i] += b[p];
            }
            project(&mut trial, &lo, &hi);
            let cand = evaluate(prob, &trial, None);
            match cand {
                Some(c) if c.cost < cur.cost => {
                    let gain = cur.cost - c.cost;
                    z = trial;
                    cur = evaluate(prob, &z, Some(&mut jac)).ok_or(Error::NonFiniteObjective)?;
                    mu = (mu / 3.0).max(1e-9);
                    accepted = true;
                    if gain <= cfg.tol * (1.0 + cur.cost) {
                        return Ok(finish(cur, iterations));
                    }
                    break;
                }
                _ => mu *= 5.0,
            }
        }
        if !accepted {
            break;
        }
    }
    Ok(finish(cur, iterations))
}

fn finish(e: Eval, iterations: usize) -> MpcSolution {
    MpcSolution {
        controls: e.controls,
        states: e.states,
        objective: e.cost,
        residual: e.residual,
        iterations,
    }
}

/// Shared read-only inputs of every car's policy.
#[derive(Debug, Clone, Copy)]
pub struct PolicyContext<'a> {
    pub track: &'a Track,
    pub raceline: &'a RaceLine,
    pub vp: &'a VehicleParams,
    pub cfg: &'a MpcConfig,
}

/// One car's receding-horizon controller. Keeps the previous plan shifted by
/// one step as the next warm start. Not meant to be shared across threads.
#[derive(Debug, Clone)]
pub struct Controller {
    pub theta: PolicyParams,
    warm: Option<Vec<ControlInput>>,
    prev: ControlInput,
    last: Option<MpcSolution>,
    fallbacks: usize,
}

impl Controller {
    pub fn new(theta: PolicyParams) -> Self {
        Self {
            theta,
            warm: None,
            prev: ControlInput::default(),
            last: None,
            fallbacks: 0,
        }
    }

    pub fn last_solution(&self) -> Option<&MpcSolution> {
        self.last.as_ref()
    }

    /// Number of steps where the solver failed and the safe control was used.
    pub fn fallbacks(&self) -> usize {
        self.fallbacks
    }

    /// Solves the MPC for car `ego` without touching the warm-start cache.
    pub fn plan(
        &self,
        ctx: &PolicyContext,
        states: &[CarState],
        ego: usize,
    ) -> Result<MpcSolution> {
        let (reference, opp) =
            reference_trajectory(ctx.track, ctx.raceline, states, ego, &self.theta, ctx.cfg)?;
        let opponents: Vec<Opponent> = opp.iter().flatten().copied().collect();
        let prob = MpcProblem {
            track: ctx.track,
            vp: ctx.vp,
            cfg: ctx.cfg,
            state: states[ego],
            reference: &reference,
            opponents: &opponents,
            q: self.theta.q,
            prev: self.prev,
        };
        let warm = self.warm.as_deref().filter(|w| w.len() == ctx.cfg.horizon);
        mpc_solve(&prob, warm)
    }

    /// The control to apply now. Solver failures fall back to zero steering
    /// and full braking.
    pub fn act(&mut self, ctx: &PolicyContext, states: &[CarState], ego: usize) -> ControlInput {
        match self.plan(ctx, states, ego) {
            Ok(sol) => {
                let u = sol.controls[0];
                let mut w = sol.controls[1..].to_vec();
                w.push(*sol.controls.last().expect("non-empty plan"));
                self.warm = Some(w);
                self.prev = u;
                self.last = Some(sol);
                u
            }
            Err(_) => {
                self.fallbacks += 1;
                let u = ControlInput {
                    d: ctx.vp.d_min,
                    delta: 0.0,
                };
                self.warm = None;
                self.prev = u;
                self.last = None;
                u
            }
        }
    }
}
