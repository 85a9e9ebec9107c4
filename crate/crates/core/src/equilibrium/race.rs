//! Races between controller kinds: potential-game planners, iterated best
//! response, fixed and random parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::argmax::{maximize_potential, ArgmaxConfig, PotentialObjective};
use super::ibr::{ibr, local_grid};
use super::regret::rollout_payoff;
use crate::dynamics::CarState;
use crate::error::{Error, Result};
use crate::game::{rollout_with, GameConfig, RaceRecord, World};
use crate::learning::{Featurizer, Mlp};
use crate::policy::{PolicyParams, ThetaBox};

/// How a car picks its policy parameters during a race.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    /// Re-solves the potential argmax from the current state.
    Potential,
    /// Runs iterated best response from the current state.
    Ibr,
    Fixed(PolicyParams),
    /// Draws parameters uniformly from the box once per race.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RaceSettings {
    /// Steps between re-plans of the potential and IBR controllers.
    pub replan_every: usize,
    pub argmax: ArgmaxConfig,
    /// Potential controllers search only their own block.
    pub ego_block_only: bool,
    pub ibr_rounds: usize,
    /// Length of the IBR scoring rollouts, in steps.
    pub ibr_horizon: usize,
    /// Candidates per car and round.
    pub ibr_budget: usize,
    pub theta_box: ThetaBox,
}

impl Default for RaceSettings {
    fn default() -> Self {
        Self {
            replan_every: 10,
            argmax: ArgmaxConfig {
                max_iters: 100,
                ..Default::default()
            },
            ego_block_only: false,
            ibr_rounds: 6,
            ibr_horizon: 20,
            ibr_budget: 8,
            theta_box: ThetaBox::default(),
        }
    }
}

/// A trained potential and the input layout it was trained with.
#[derive(Debug, Clone, Copy)]
pub struct PotentialModel<'a> {
    pub net: &'a Mlp,
    pub featurizer: &'a Featurizer,
}

/// Runs one race. Random controllers draw from a generator seeded with
/// `seed`; the initial parameters of the other kinds are the box centre.
#[allow(clippy::too_many_arguments)]
pub fn race(
    world: &World,
    game: &GameConfig,
    controllers: &[ControllerKind],
    model: Option<PotentialModel>,
    settings: &RaceSettings,
    start: &[CarState],
    steps: usize,
    seed: u64,
) -> Result<RaceRecord> {
    if controllers.len() != start.len() {
        return Err(Error::DimensionMismatch {
            expected: start.len(),
            got: controllers.len(),
        });
    }
    let tb = &settings.theta_box;
    tb.validate()?;
    let needs_model = controllers.contains(&ControllerKind::Potential);
    if needs_model && model.is_none() {
        return Err(Error::InvalidConfig(
            "potential controller needs a potential model".into(),
        ));
    }
    if settings.replan_every == 0 {
        return Err(Error::InvalidConfig(
            "replan_every must be at least 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init: Vec<PolicyParams> = controllers
        .iter()
        .map(|c| match c {
            ControllerKind::Fixed(t) => *t,
            ControllerKind::Random => tb.sample(&mut rng),
            _ => tb.center(),
        })
        .collect();
    let n = controllers.len();
    let mut warm: Vec<Option<Vec<PolicyParams>>> = vec![None; n];
    let update = |t: usize, x: &[CarState], theta: &mut [PolicyParams]| -> Result<()> {
        if !t.is_multiple_of(settings.replan_every) {
            return Ok(());
        }
        let current = theta.to_vec();
        for i in 0..n {
            match controllers[i] {
                ControllerKind::Potential => {
                    let m = model.expect("checked above");
                    let obj = PotentialObjective::new(m.net, m.featurizer, x)?;
                    let mut ws = warm[i].clone().unwrap_or_else(|| current.clone());
                    if settings.ego_block_only {
                        for (j, w) in ws.iter_mut().enumerate() {
                            if j != i {
                                *w = current[j];
                            }
                        }
                    }
                    let cfg = ArgmaxConfig {
                        warm_start: Some(ws),
                        block: settings.ego_block_only.then_some(i),
                        seed: settings.argmax.seed ^ (t as u64),
                        ..settings.argmax.clone()
                    };
                    let r = maximize_potential(&obj, n, tb, &cfg)?;
                    theta[i] = r.theta[i];
                    warm[i] = Some(r.theta);
                }
                ControllerKind::Ibr => {
                    let profile = ibr(
                        &current,
                        settings.ibr_rounds,
                        |j, th| {
                            local_grid(tb, th, settings.ibr_budget, seed ^ ((t * n + j) as u64))
                        },
                        |j, p| rollout_payoff(world, game, x, p, j, settings.ibr_horizon)(&p[j]),
                    )?;
                    theta[i] = profile[i];
                }
                ControllerKind::Fixed(_) | ControllerKind::Random => {}
            }
        }
        Ok(())
    };
    rollout_with(world, game, start, &init, steps, update)
}

/// Final standings of a race.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaceSummary {
    pub winner: usize,
    pub final_p_x: Vec<f64>,
    /// Completed laps per car (zero on open tracks).
    pub laps: Vec<u32>,
}

impl RaceSummary {
    pub fn new(record: &RaceRecord, world: &World) -> Self {
        let last = record.states.last().map(|s| s.as_slice()).unwrap_or(&[]);
        let len = world.track.length();
        Self {
            winner: record.winner,
            final_p_x: last.iter().map(|s| s.p_x).collect(),
            laps: last
                .iter()
                .map(|s| {
                    if world.track.is_closed() && s.p_x > 0.0 {
                        (s.p_x / len).floor() as u32
                    } else {
                        0
                    }
                })
                .collect(),
        }
    }
}

/// Start regions for a race with the ego (car 0) in region `ego`: the
/// remaining regions go to the other cars in order, front region first.
pub fn region_assignment(ego: usize, n_regions: usize) -> Result<Vec<usize>> {
    if ego >= n_regions {
        return Err(Error::InvalidConfig(format!("region {ego} out of range")));
    }
    let mut v = vec![ego];
    v.extend((0..n_regions).filter(|&r| r != ego));
    Ok(v)
}
