//! The racing game: a shared world, the relative-progress utility, joint
//! rollouts and dataset generation.

mod dataset;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    apply_interaction_rules, step, CarState, ControlInput, InteractionConfig, VehicleParams,
};
use crate::error::{Error, Result};
use crate::policy::{raceline_state, Controller, MpcConfig, PolicyContext, PolicyParams, ThetaBox};
use crate::track::{compute_raceline, velocity_profile, RaceLine, Track, VelocityProfileConfig};

pub use dataset::{generate_dataset, Dataset, DatasetMeta, SCHEMA_VERSION};

/// Everything the cars share: track, raceline with its speed profile,
/// vehicle model and MPC settings.
#[derive(Debug, Clone)]
pub struct World {
    pub track: Track,
    pub raceline: RaceLine,
    pub vp: VehicleParams,
    pub mpc: MpcConfig,
    pub profile: VelocityProfileConfig,
    /// Friction level of the raceline speed profile.
    pub mu: f64,
}

impl World {
    /// Computes the raceline and its speed profile. The MPC track limit is
    /// taken from the track.
    pub fn new(
        track: Track,
        vp: VehicleParams,
        mpc: MpcConfig,
        profile: VelocityProfileConfig,
        mu: f64,
    ) -> Result<Self> {
        vp.validate()?;
        let mut raceline = compute_raceline(&track, profile.w_veh)?;
        let prof = velocity_profile(&raceline, &profile, mu)?;
        raceline.apply_profile(&prof)?;
        let mpc = MpcConfig {
            w_max: track.w_max(),
            ..mpc
        };
        mpc.validate()?;
        Ok(Self {
            track,
            raceline,
            vp,
            mpc,
            profile,
            mu,
        })
    }

    /// The bundled circuit with default vehicle, MPC and profile settings.
    pub fn bundled() -> Result<Self> {
        Self::new(
            crate::track::shapes::circuit()?,
            VehicleParams::default(),
            MpcConfig::default(),
            VelocityProfileConfig::default(),
            0.8,
        )
    }

    pub fn context(&self) -> PolicyContext<'_> {
        PolicyContext {
            track: &self.track,
            raceline: &self.raceline,
            vp: &self.vp,
            cfg: &self.mpc,
        }
    }

    /// Hash of everything that shapes a simulation in this world.
    pub fn fingerprint(&self) -> Result<String> {
        crate::meta::config_hash(&(
            self.track.points(),
            self.track.is_closed(),
            &self.vp,
            &self.mpc,
            &self.profile,
            self.mu,
        ))
    }
}

/// A rectangle in Frenet coordinates where cars may start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartRegion {
    pub name: String,
    pub p_x: [f64; 2],
    pub p_y: [f64; 2],
}

impl StartRegion {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let u: f64 = rng.random();
        let v: f64 = rng.random();
        (
            self.p_x[0] + u * (self.p_x[1] - self.p_x[0]),
            self.p_y[0] + v * (self.p_y[1] - self.p_y[0]),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GameConfig {
    pub n_cars: usize,
    /// Discount factor in `[0, 1)`.
    pub gamma: f64,
    pub dt: f64,
    /// Steps per race.
    pub steps: usize,
    pub theta_box: ThetaBox,
    /// Distance (m) below which two cars collide.
    pub unsafe_dist: f64,
    /// Ordered from furthest ahead to furthest behind.
    pub start_regions: Vec<StartRegion>,
}

impl Default for GameConfig {
    fn default() -> Self {
        let region = |name: &str, lo: f64| StartRegion {
            name: name.into(),
            p_x: [lo, lo + 20.0],
            p_y: [-3.5, 3.5],
        };
        Self {
            n_cars: 3,
            gamma: 0.99,
            dt: 0.1,
            steps: 200,
            theta_box: ThetaBox::default(),
            unsafe_dist: 1.0,
            start_regions: vec![region("R1", 90.0), region("R2", 60.0), region("R3", 30.0)],
        }
    }
}

impl GameConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_cars < 2 {
            return bad("n_cars must be at least 2");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        if !(self.unsafe_dist >= 0.0) {
            return bad("unsafe_dist must be non-negative");
        }
        if self.start_regions.is_empty() {
            return bad("at least one start region is required");
        }
        for r in &self.start_regions {
            if !(r.p_x[0] <= r.p_x[1] && r.p_y[0] <= r.p_y[1])
                || r.p_x.iter().chain(&r.p_y).any(|v| !v.is_finite())
            {
                return Err(Error::InvalidConfig(format!(
                    "start region {} is malformed",
                    r.name
                )));
            }
        }
        self.theta_box.validate()
    }

    /// Checks this configuration against the world it will run in.
    pub fn validate_for(&self, world: &World) -> Result<()> {
        self.validate()?;
        if (self.dt - world.mpc.dt).abs() > 1e-12 {
            return Err(Error::InvalidConfig(format!(
                "game dt {} differs from MPC dt {}",
                self.dt, world.mpc.dt
            )));
        }
        let half = world.track.w_max() / 2.0;
        for r in &self.start_regions {
            if r.p_y[0] < -half || r.p_y[1] > half {
                return Err(Error::InvalidConfig(format!(
                    "start region {} leaves the track",
                    r.name
                )));
            }
            if !world.track.is_closed() && (r.p_x[0] < 0.0 || r.p_x[1] > world.track.length()) {
                return Err(Error::InvalidConfig(format!(
                    "start region {} leaves the track",
                    r.name
                )));
            }
        }
        Ok(())
    }

    pub fn interaction(&self, world: &World) -> InteractionConfig {
        InteractionConfig {
            unsafe_dist: self.unsafe_dist,
            w_max: world.track.w_max(),
        }
    }

    pub fn region_index(&self, name: &str) -> Result<usize> {
        self.start_regions
            .iter()
            .position(|r| r.name == name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown start region {name}")))
    }
}

/// A car placed at `(p_x, p_y)`, aligned with the track and moving at the
/// raceline speed for that position.
pub fn start_state(world: &World, p_x: f64, p_y: f64) -> Result<CarState> {
    let on_line = raceline_state(&world.track, &world.raceline, p_x)?;
    Ok(CarState {
        p_x,
        p_y,
        v_x: on_line.v_x,
        ..Default::default()
    })
}

const START_ATTEMPTS: usize = 1000;

fn separated(points: &[(f64, f64)], unsafe_dist: f64) -> bool {
    points.iter().enumerate().all(|(i, a)| {
        points[i + 1..]
            .iter()
            .all(|b| (a.0 - b.0).hypot(a.1 - b.1) > unsafe_dist)
    })
}

/// Draws one start per car, each from the region given by `regions[i]`, with
/// all pairs further apart than the collision distance.
pub fn sample_starts<R: Rng + ?Sized>(
    world: &World,
    cfg: &GameConfig,
    regions: &[usize],
    rng: &mut R,
) -> Result<Vec<CarState>> {
    if regions.iter().any(|&r| r >= cfg.start_regions.len()) {
        return Err(Error::InvalidConfig(
            "start region index out of range".into(),
        ));
    }
    for _ in 0..START_ATTEMPTS {
        let pts: Vec<(f64, f64)> = regions
            .iter()
            .map(|&r| cfg.start_regions[r].sample(rng))
            .collect();
        if separated(&pts, cfg.unsafe_dist) {
            return pts.iter().map(|&(x, y)| start_state(world, x, y)).collect();
        }
    }
    Err(Error::StartSamplingFailed(START_ATTEMPTS))
}

/// Starts for a dataset race: every car picks a region uniformly.
pub fn sample_random_starts<R: Rng + ?Sized>(
    world: &World,
    cfg: &GameConfig,
    rng: &mut R,
) -> Result<Vec<CarState>> {
    let regions: Vec<usize> = (0..cfg.n_cars)
        .map(|_| rng.random_range(0..cfg.start_regions.len()))
        .collect();
    sample_starts(world, cfg, &regions, rng)
}

/// Lead of car `i`: its progress minus the best opponent's.
pub fn lead(states: &[CarState], i: usize) -> f64 {
    let best = states
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, s)| s.p_x)
        .fold(f64::NEG_INFINITY, f64::max);
    states[i].p_x - best
}

/// One-step reward of car `i`: the change of its lead.
pub fn utility(prev: &[CarState], next: &[CarState], i: usize) -> f64 {
    lead(next, i) - lead(prev, i)
}

/// `sum_t gamma^t u_t`.
pub fn discounted_return(utilities: &[f64], gamma: f64) -> f64 {
    utilities.iter().rev().fold(0.0, |acc, u| u + gamma * acc)
}

/// Discounted return from every step to the end of the record.
pub fn returns_to_go(utilities: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; utilities.len()];
    let mut acc = 0.0;
    for t in (0..utilities.len()).rev() {
        acc = utilities[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Index of the car with the largest progress (lowest index on ties).
pub fn winner(states: &[CarState]) -> usize {
    let mut best = 0;
    for (i, s) in states.iter().enumerate() {
        if s.p_x > states[best].p_x {
            best = i;
        }
    }
    best
}

/// One simulated race.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaceRecord {
    pub race_id: u64,
    pub seed: u64,
    /// Policy parameters per car at the start of the race.
    pub theta: Vec<PolicyParams>,
    /// `steps + 1` joint states.
    pub states: Vec<Vec<CarState>>,
    /// `steps` joint controls.
    pub controls: Vec<Vec<ControlInput>>,
    /// `steps` per-car utilities.
    pub utilities: Vec<Vec<f64>>,
    pub winner: usize,
}

impl RaceRecord {
    pub fn n_cars(&self) -> usize {
        self.theta.len()
    }

    pub fn steps(&self) -> usize {
        self.controls.len()
    }

    /// Utilities of car `i` over the race.
    pub fn utilities_of(&self, i: usize) -> Vec<f64> {
        self.utilities.iter().map(|u| u[i]).collect()
    }

    /// Checks array shapes and that utilities and winner follow from states.
    pub fn check(&self) -> Result<()> {
        let n = self.n_cars();
        let t = self.steps();
        let bad = |m: &str| Err(Error::InvalidData(format!("race {}: {m}", self.race_id)));
        if n < 2 {
            return bad("fewer than two cars");
        }
        if self.states.len() != t + 1 || self.utilities.len() != t {
            return bad("inconsistent lengths");
        }
        if self.states.iter().any(|s| s.len() != n)
            || self.controls.iter().any(|c| c.len() != n)
            || self.utilities.iter().any(|u| u.len() != n)
        {
            return bad("inconsistent car count");
        }
        for k in 0..t {
            for i in 0..n {
                if utility(&self.states[k], &self.states[k + 1], i) != self.utilities[k][i] {
                    return bad("utility does not match states");
                }
            }
        }
        if self.winner != winner(&self.states[t]) {
            return bad("winner does not match final states");
        }
        Ok(())
    }
}

/// Runs a race where `update` may replace policy parameters before each
/// step (it sees the step index, the joint state and the current
/// parameters). Controllers keep their warm starts across updates.
pub fn rollout_with<F>(
    world: &World,
    cfg: &GameConfig,
    start: &[CarState],
    theta: &[PolicyParams],
    steps: usize,
    mut update: F,
) -> Result<RaceRecord>
where
    F: FnMut(usize, &[CarState], &mut [PolicyParams]) -> Result<()>,
{
    if start.len() != theta.len() {
        return Err(Error::DimensionMismatch {
            expected: start.len(),
            got: theta.len(),
        });
    }
    if start.len() < 2 {
        return Err(Error::InvalidConfig(
            "a race needs at least two cars".into(),
        ));
    }
    let ctx = world.context();
    let icfg = cfg.interaction(world);
    let mut ctrl: Vec<Controller> = theta.iter().map(|t| Controller::new(*t)).collect();
    let mut current = theta.to_vec();
    let mut states = vec![start.to_vec()];
    let mut controls = Vec::with_capacity(steps);
    let mut utilities = Vec::with_capacity(steps);
    for t in 0..steps {
        let x = states.last().expect("non-empty");
        update(t, x, &mut current)?;
        for (c, th) in ctrl.iter_mut().zip(&current) {
            c.theta = *th;
        }
        let u: Vec<ControlInput> = (0..x.len()).map(|i| ctrl[i].act(&ctx, x, i)).collect();
        let moved: Vec<CarState> = x
            .iter()
            .zip(&u)
            .map(|(s, ui)| step(s, ui, &world.vp, world.track.kappa_at(s.p_x), cfg.dt))
            .collect::<Result<_>>()?;
        let next = apply_interaction_rules(&moved, &world.track, &icfg)?;
        utilities.push((0..next.len()).map(|i| utility(x, &next, i)).collect());
        controls.push(u);
        states.push(next);
    }
    let winner = winner(states.last().expect("non-empty"));
    Ok(RaceRecord {
        race_id: 0,
        seed: 0,
        theta: theta.to_vec(),
        states,
        controls,
        utilities,
        winner,
    })
}

/// Runs a race with fixed policy parameters.
pub fn rollout(
    world: &World,
    cfg: &GameConfig,
    start: &[CarState],
    theta: &[PolicyParams],
    steps: usize,
) -> Result<RaceRecord> {
    rollout_with(world, cfg, start, theta, steps, |_, _, _| Ok(()))
}
