//! Dynamic bicycle model in the Frenet frame with Pacejka lateral tire
//! forces, and the near-collision / off-track rules of the racing game.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::track::Track;

/// Floor on the body-frame longitudinal speed inside slip-angle terms.
pub const SLIP_SPEED_FLOOR: f64 = 0.1;

/// One car's state. `p_x` is an unwrapped arc length: it keeps growing across
/// laps so that progress comparisons never jump at the start line.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CarState {
    pub p_x: f64,
    pub p_y: f64,
    pub phi: f64,
    /// Body-frame longitudinal velocity.
    pub v_x: f64,
    /// Body-frame lateral velocity.
    pub v_y: f64,
    pub omega: f64,
}

impl CarState {
    pub fn to_array(&self) -> [f64; 6] {
        [self.p_x, self.p_y, self.phi, self.v_x, self.v_y, self.omega]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            p_x: a[0],
            p_y: a[1],
            phi: a[2],
            v_x: a[3],
            v_y: a[4],
            omega: a[5],
        }
    }

    /// Frenet-frame velocities `(dp_x/dt, dp_y/dt)` at curvature `kappa`.
    pub fn frenet_velocity(&self, kappa: f64) -> Result<(f64, f64)> {
        let den = 1.0 - kappa * self.p_y;
        if den.abs() < 1e-6 {
            return Err(Error::SingularFrenet(den));
        }
        let (s, c) = self.phi.sin_cos();
        Ok((
            (self.v_x * c - self.v_y * s) / den,
            self.v_x * s + self.v_y * c,
        ))
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    /// Throttle (negative values brake).
    pub d: f64,
    /// Steering angle in radians.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    pub m: f64,
    pub i_z: f64,
    pub l_f: f64,
    pub l_r: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub b_f: f64,
    pub c_f: f64,
    pub d_f: f64,
    pub b_r: f64,
    pub c_r: f64,
    pub d_r: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub delta_min: f64,
    pub delta_max: f64,
    /// Steering change limits per step (rad).
    pub delta_rate_min: f64,
    pub delta_rate_max: f64,
}

impl Default for VehicleParams {
    /// A 1200 kg car with soft tires; tire stiffness is chosen so explicit
    /// Euler at 0.1 s stays stable above roughly 3 m/s.
    fn default() -> Self {
        Self {
            m: 1200.0,
            i_z: 2000.0,
            l_f: 1.2,
            l_r: 1.4,
            c1: 12000.0,
            c2: 60.0,
            c3: 200.0,
            c4: 0.8,
            b_f: 12.0,
            c_f: 1.4,
            d_f: 6339.0,
            b_r: 12.0,
            c_r: 1.4,
            d_r: 5433.0,
            d_min: -1.0,
            d_max: 1.0,
            delta_min: -0.35,
            delta_max: 0.35,
            delta_rate_min: -0.06,
            delta_rate_max: 0.06,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("m", self.m),
            ("i_z", self.i_z),
            ("l_f", self.l_f),
            ("l_r", self.l_r),
            ("d_f", self.d_f),
            ("d_r", self.d_r),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "vehicle parameter {name} must be positive"
                )));
            }
        }
        if !(self.d_min < self.d_max) {
            return Err(Error::InvalidConfig("vehicle needs d_min < d_max".into()));
        }
        if !(self.delta_min < self.delta_max) {
            return Err(Error::InvalidConfig(
                "vehicle needs delta_min < delta_max".into(),
            ));
        }
        if !(self.delta_rate_min <= 0.0 && 0.0 <= self.delta_rate_max) {
            return Err(Error::InvalidConfig(
                "steering rate box must contain zero".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let vp: Self = serde_json::from_reader(std::fs::File::open(path)?)?;
        vp.validate()?;
        Ok(vp)
    }

    pub fn clamp_control(&self, u: ControlInput) -> ControlInput {
        ControlInput {
            d: u.d.clamp(self.d_min, self.d_max),
            delta: u.delta.clamp(self.delta_min, self.delta_max),
        }
    }

    pub fn control_in_bounds(&self, u: ControlInput) -> bool {
        (self.d_min..=self.d_max).contains(&u.d)
            && (self.delta_min..=self.delta_max).contains(&u.delta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InteractionConfig {
    pub unsafe_dist: f64,
    pub w_max: f64,
}

impl Default for InteractionConfig {
    fn default() -> Self {
        Self {
            unsafe_dist: 1.0,
            w_max: 10.0,
        }
    }
}

struct Forces {
    f_fy: f64,
    f_ry: f64,
    f_rx: f64,
    // derivatives of the tire forces w.r.t. slip angles
    df_fy: f64,
    df_ry: f64,
    // slip angle partials: (d/dv_x, d/dv_y, d/domega)
    dalpha_f: [f64; 3],
    dalpha_r: [f64; 3],
}

fn pacejka(b: f64, c: f64, d: f64, alpha: f64) -> (f64, f64) {
    let ba = b * alpha;
    let inner = c * ba.atan();
    (d * inner.sin(), d * inner.cos() * c * b / (1.0 + ba * ba))
}

fn forces(s: &CarState, u: &ControlInput, vp: &VehicleParams) -> Forces {
    let floored = s.v_x > SLIP_SPEED_FLOOR;
    let vxe = if floored { s.v_x } else { SLIP_SPEED_FLOOR };
    let gate = if floored { 1.0 } else { 0.0 };
    let af_arg = (s.omega * vp.l_f + s.v_y) / vxe;
    let ar_arg = (s.omega * vp.l_r - s.v_y) / vxe;
    let alpha_f = u.delta - af_arg.atan();
    let alpha_r = ar_arg.atan();
    let (f_fy, df_fy) = pacejka(vp.b_f, vp.c_f, vp.d_f, alpha_f);
    let (f_ry, df_ry) = pacejka(vp.b_r, vp.c_r, vp.d_r, alpha_r);
    let f_rx = (vp.c1 - vp.c2 * s.v_x) * u.d - vp.c3 - vp.c4 * s.v_x * s.v_x;
    let kf = 1.0 / (1.0 + af_arg * af_arg) / vxe;
    let kr = 1.0 / (1.0 + ar_arg * ar_arg) / vxe;
    Forces {
        f_fy,
        f_ry,
        f_rx,
        df_fy,
        df_ry,
        dalpha_f: [gate * af_arg * kf, -kf, -vp.l_f * kf],
        dalpha_r: [-gate * ar_arg * kr, -kr, vp.l_r * kr],
    }
}

/// Wraps an angle onto `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    if a > -PI && a <= PI {
        return a;
    }
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

/// One explicit-Euler step of the bicycle model at track curvature `kappa`.
pub fn step(
    state: &CarState,
    u: &ControlInput,
    vp: &VehicleParams,
    kappa: f64,
    dt: f64,
) -> Result<CarState> {
    let den = 1.0 - kappa * state.p_y;
    if den.abs() < 1e-6 {
        return Err(Error::SingularFrenet(den));
    }
    let (vxf, vyf) = state.frenet_velocity(kappa)?;
    let f = forces(state, u, vp);
    let (sd, cd) = u.delta.sin_cos();
    Ok(CarState {
        p_x: state.p_x + dt * vxf,
        p_y: state.p_y + dt * vyf,
        phi: wrap_angle(state.phi + dt * (state.omega - kappa * vxf)),
        v_x: state.v_x + dt / vp.m * (f.f_rx - f.f_fy * sd + vp.m * state.v_y * state.omega),
        v_y: state.v_y + dt / vp.m * (f.f_ry + f.f_fy * cd - vp.m * state.v_x * state.omega),
        omega: state.omega + dt / vp.i_z * (f.f_fy * vp.l_f * cd - f.f_ry * vp.l_r),
    })
}

/// Jacobians of [`step`]: `(d next / d state, d next / d control)` with the
/// control columns ordered `(d, delta)`. `dkappa_dpx` is the slope of the
/// curvature lookup, so the `p_x` column includes the curvature change.
pub fn step_jacobian(
    state: &CarState,
    u: &ControlInput,
    vp: &VehicleParams,
    kappa: f64,
    dkappa_dpx: f64,
    dt: f64,
) -> Result<([[f64; 6]; 6], [[f64; 2]; 6])> {
    let s = state;
    let den = 1.0 - kappa * s.p_y;
    if den.abs() < 1e-6 {
        return Err(Error::SingularFrenet(den));
    }
    let (sn, c) = s.phi.sin_cos();
    let a = s.v_x * c - s.v_y * sn;
    let vxf = a / den;
    let vyf = s.v_x * sn + s.v_y * c;
    let dvxf_dpy = a * kappa / (den * den);
    let dvxf_dphi = -vyf / den;
    let dvxf_dvx = c / den;
    let dvxf_dvy = -sn / den;
    let dvxf_dkappa = a * s.p_y / (den * den);

    let f = forces(s, u, vp);
    let (sd, cd) = u.delta.sin_cos();
    let (m, iz, lf, lr) = (vp.m, vp.i_z, vp.l_f, vp.l_r);
    // d F_fy / d (v_x, v_y, omega) and d F_ry / d (...)
    let gf: [f64; 3] = f.dalpha_f.map(|v| f.df_fy * v);
    let gr: [f64; 3] = f.dalpha_r.map(|v| f.df_ry * v);
    let dfrx_dvx = -vp.c2 * u.d - 2.0 * vp.c4 * s.v_x;

    let mut jx = [[0.0; 6]; 6];
    let mut ju = [[0.0; 2]; 6];

    jx[0] = [
        1.0 + dt * dvxf_dkappa * dkappa_dpx,
        dt * dvxf_dpy,
        dt * dvxf_dphi,
        dt * dvxf_dvx,
        dt * dvxf_dvy,
        0.0,
    ];
    jx[1] = [0.0, 1.0, dt * a, dt * sn, dt * c, 0.0];
    let dphi_dkappa = -dt * (vxf + kappa * dvxf_dkappa);
    jx[2] = [
        dphi_dkappa * dkappa_dpx,
        -dt * kappa * dvxf_dpy,
        1.0 - dt * kappa * dvxf_dphi,
        -dt * kappa * dvxf_dvx,
        -dt * kappa * dvxf_dvy,
        dt,
    ];
    jx[3] = [
        0.0,
        0.0,
        0.0,
        1.0 + dt / m * (dfrx_dvx - sd * gf[0]),
        dt / m * (-sd * gf[1]) + dt * s.omega,
        dt / m * (-sd * gf[2]) + dt * s.v_y,
    ];
    jx[4] = [
        0.0,
        0.0,
        0.0,
        dt / m * (gr[0] + cd * gf[0]) - dt * s.omega,
        1.0 + dt / m * (gr[1] + cd * gf[1]),
        dt / m * (gr[2] + cd * gf[2]) - dt * s.v_x,
    ];
    jx[5] = [
        0.0,
        0.0,
        0.0,
        dt / iz * (lf * cd * gf[0] - lr * gr[0]),
        dt / iz * (lf * cd * gf[1] - lr * gr[1]),
        1.0 + dt / iz * (lf * cd * gf[2] - lr * gr[2]),
    ];
    // dalpha_f / ddelta = 1
    ju[3] = [
        dt / m * (vp.c1 - vp.c2 * s.v_x),
        dt / m * (-f.df_fy * sd - f.f_fy * cd),
    ];
    ju[4] = [0.0, dt / m * (f.df_fy * cd - f.f_fy * sd)];
    ju[5] = [0.0, dt / iz * lf * (f.df_fy * cd - f.f_fy * sd)];
    Ok((jx, ju))
}

/// Applies the near-collision and off-track rules to a joint state after the
/// dynamics step. Pairs closer than `unsafe_dist` (global frame) are found on
/// the pre-rule snapshot: the car further along keeps half its speed, the
/// other a third. A car in several unsafe pairs gets the harshest factor
/// once. Then any car beyond the half-width is slowed by half, re-aligned
/// (`phi = 0`) and clamped to the boundary.
pub fn apply_interaction_rules(
    states: &[CarState],
    track: &Track,
    cfg: &InteractionConfig,
) -> Result<Vec<CarState>> {
    let global: Vec<(f64, f64)> = states
        .iter()
        .map(|s| track.frenet_to_global(s.p_x, s.p_y))
        .collect::<Result<_>>()?;
    Ok(apply_interaction_rules_at(states, &global, cfg))
}

/// Same as [`apply_interaction_rules`] with precomputed global positions.
pub fn apply_interaction_rules_at(
    states: &[CarState],
    global: &[(f64, f64)],
    cfg: &InteractionConfig,
) -> Vec<CarState> {
    let n = states.len();
    let mut factor = vec![1.0f64; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = (global[i].0 - global[j].0).hypot(global[i].1 - global[j].1);
            if d < cfg.unsafe_dist {
                // ties go to the lower index as the leader
                let (lead, back) = if states[j].p_x > states[i].p_x {
                    (j, i)
                } else {
                    (i, j)
                };
                factor[lead] = factor[lead].min(0.5);
                factor[back] = factor[back].min(1.0 / 3.0);
            }
        }
    }
    let half = cfg.w_max / 2.0;
    states
        .iter()
        .zip(&factor)
        .map(|(s, &k)| {
            let mut out = *s;
            if k < 1.0 {
                out.v_x = s.v_x * k;
            }
            if out.p_y.abs() > half {
                out.v_x /= 2.0;
                out.phi = 0.0;
                out.p_y = half.copysign(out.p_y);
            }
            out
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::track::shapes::straight;
    use approx::assert_abs_diff_eq;

    fn cruising() -> CarState {
        CarState {
            p_x: 0.0,
            p_y: 0.0,
            phi: 0.0,
            v_x: 5.0,
            v_y: 0.0,
            omega: 0.0,
        }
    }

    #[test]
    fn zero_dt_is_identity() {
        let s = CarState {
            p_x: 3.0,
            p_y: 0.4,
            phi: 0.1,
            v_x: 7.0,
            v_y: 0.3,
            omega: -0.2,
        };
        let u = ControlInput { d: 0.5, delta: 0.1 };
        let next = step(&s, &u, &VehicleParams::default(), 0.02, 0.0).unwrap();
        assert_eq!(next, s);
    }

    #[test]
    fn hand_evaluated_straight_step() {
        let vp = VehicleParams::default();
        let d = 0.3;
        let u = ControlInput { d, delta: 0.0 };
        let next = step(&cruising(), &u, &vp, 0.0, 0.1).unwrap();
        let f_rx = (vp.c1 - 5.0 * vp.c2) * d - vp.c3 - 25.0 * vp.c4;
        assert_abs_diff_eq!(next.p_x, 0.5, epsilon = 1e-12);
        assert_eq!(next.p_y, 0.0);
        assert_eq!(next.phi, 0.0);
        assert_eq!(next.v_y, 0.0);
        assert_eq!(next.omega, 0.0);
        assert_abs_diff_eq!(next.v_x, 5.0 + 0.1 * f_rx / vp.m, epsilon = 1e-12);
    }

    #[test]
    fn singular_frenet() {
        let mut s = cruising();
        s.p_y = 2.0;
        let r = step(
            &s,
            &ControlInput::default(),
            &VehicleParams::default(),
            0.5,
            0.1,
        );
        assert!(matches!(r, Err(Error::SingularFrenet(_))));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let vp = VehicleParams::default();
        let states = [
            CarState {
                p_x: 10.0,
                p_y: 0.7,
                phi: 0.12,
                v_x: 12.0,
                v_y: -0.4,
                omega: 0.3,
            },
            CarState {
                p_x: 1.0,
                p_y: -1.1,
                phi: -0.3,
                v_x: 4.0,
                v_y: 0.8,
                omega: -0.6,
            },
            CarState {
                p_x: 1.0,
                p_y: 0.1,
                phi: 0.05,
                v_x: 0.05,
                v_y: 0.02,
                omega: 0.1,
            },
        ];
        let u = ControlInput {
            d: 0.4,
            delta: -0.12,
        };
        let (kappa, dk) = (0.03, 0.002);
        let dt = 0.1;
        // curvature varies linearly with p_x around the base point
        let f = |s: &CarState, u: &ControlInput, base: f64| {
            step(s, u, &vp, kappa + dk * (s.p_x - base), dt)
                .unwrap()
                .to_array()
        };
        for s in &states {
            let (jx, ju) = step_jacobian(s, &u, &vp, kappa, dk, dt).unwrap();
            let h = 1e-6;
            for k in 0..6 {
                let mut a = s.to_array();
                let mut b = s.to_array();
                a[k] += h;
                b[k] -= h;
                let fa = f(&CarState::from_array(a), &u, s.p_x);
                let fb = f(&CarState::from_array(b), &u, s.p_x);
                for r in 0..6 {
                    let fd = (fa[r] - fb[r]) / (2.0 * h);
                    assert!(
                        (fd - jx[r][k]).abs() < 1e-5 * (1.0 + fd.abs()),
                        "jx[{r}][{k}] {fd} vs {}",
                        jx[r][k]
                    );
                }
            }
            for k in 0..2 {
                let mut ua = u;
                let mut ub = u;
                if k == 0 {
                    ua.d += h;
                    ub.d -= h;
                } else {
                    ua.delta += h;
                    ub.delta -= h;
                }
                let fa = f(s, &ua, s.p_x);
                let fb = f(s, &ub, s.p_x);
                for r in 0..6 {
                    let fd = (fa[r] - fb[r]) / (2.0 * h);
                    assert!(
                        (fd - ju[r][k]).abs() < 1e-5 * (1.0 + fd.abs()),
                        "ju[{r}][{k}]"
                    );
                }
            }
        }
    }

    fn straight_track() -> Track {
        straight(200.0, 201, 6.0).unwrap()
    }

    #[test]
    fn far_apart_cars_unchanged() {
        let t = straight_track();
        let cfg = InteractionConfig {
            unsafe_dist: 1.0,
            w_max: 6.0,
        };
        let a = CarState {
            p_x: 10.0,
            v_x: 6.0,
            ..Default::default()
        };
        let b = CarState {
            p_x: 60.0,
            v_x: 6.0,
            ..Default::default()
        };
        let out = apply_interaction_rules(&[a, b], &t, &cfg).unwrap();
        assert_eq!(out, vec![a, b]);
    }

    #[test]
    fn collision_penalizes_follower_more() {
        let t = straight_track();
        let cfg = InteractionConfig {
            unsafe_dist: 1.0,
            w_max: 6.0,
        };
        let i = CarState {
            p_x: 10.0,
            p_y: 0.3,
            v_x: 6.0,
            ..Default::default()
        };
        let j = CarState {
            p_x: 9.8,
            p_y: 0.0,
            v_x: 6.0,
            ..Default::default()
        };
        let out = apply_interaction_rules(&[i, j], &t, &cfg).unwrap();
        assert_abs_diff_eq!(out[0].v_x, 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(out[1].v_x, 2.0, epsilon = 1e-15);
        // order of the cars in the slice does not matter
        let out = apply_interaction_rules(&[j, i], &t, &cfg).unwrap();
        assert_abs_diff_eq!(out[1].v_x, 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(out[0].v_x, 2.0, epsilon = 1e-15);
    }

    #[test]
    fn tie_in_p_x_lower_index_leads() {
        let t = straight_track();
        let cfg = InteractionConfig {
            unsafe_dist: 1.0,
            w_max: 6.0,
        };
        let i = CarState {
            p_x: 10.0,
            p_y: 0.3,
            v_x: 6.0,
            ..Default::default()
        };
        let j = CarState {
            p_x: 10.0,
            p_y: -0.3,
            v_x: 6.0,
            ..Default::default()
        };
        let out = apply_interaction_rules(&[i, j], &t, &cfg).unwrap();
        assert_eq!((out[0].v_x, out[1].v_x), (3.0, 2.0));
    }

    #[test]
    fn off_track_slows_and_realigns() {
        let t = straight(200.0, 201, 10.0).unwrap();
        let cfg = InteractionConfig {
            unsafe_dist: 1.0,
            w_max: 6.0,
        };
        let s = CarState {
            p_x: 20.0,
            p_y: 4.0,
            phi: 0.3,
            v_x: 8.0,
            ..Default::default()
        };
        let out = apply_interaction_rules(&[s], &t, &cfg).unwrap();
        assert_eq!(out[0].v_x, 4.0);
        assert_eq!(out[0].phi, 0.0);
        assert_eq!(out[0].p_y, 3.0);
    }

    #[test]
    fn default_params_validate_and_roundtrip_json() {
        let vp = VehicleParams::default();
        vp.validate().unwrap();
        let s = serde_json::to_string(&vp).unwrap();
        let back: VehicleParams = serde_json::from_str(&s).unwrap();
        assert_eq!(back, vp);
        let bad = VehicleParams { m: -1.0, ..vp };
        assert!(bad.validate().is_err());
    }
}
