//! Projected gradient ascent of a potential over the joint parameter box.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::CarState;
use crate::error::{Error, Result};
use crate::learning::{Featurizer, Mlp};
use crate::policy::{PolicyParams, ThetaBox, THETA_DIM};

/// A differentiable function of the flattened joint parameters.
pub trait Objective {
    fn value(&self, theta: &[f64]) -> Result<f64>;
    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>>;
}

/// A trained potential at a fixed joint state.
pub struct PotentialObjective<'a> {
    net: &'a Mlp,
    featurizer: &'a Featurizer,
    x: Vec<f64>,
}

impl<'a> PotentialObjective<'a> {
    pub fn new(net: &'a Mlp, featurizer: &'a Featurizer, states: &[CarState]) -> Result<Self> {
        if net.input_dim() != featurizer.dim() || net.output_dim() != 1 {
            return Err(Error::DimensionMismatch {
                expected: featurizer.dim(),
                got: net.input_dim(),
            });
        }
        Ok(Self {
            net,
            featurizer,
            x: featurizer.state_features(states)?,
        })
    }

    fn input(&self, theta: &[f64]) -> Vec<f64> {
        let mut v = self.x.clone();
        v.extend_from_slice(theta);
        v
    }
}

impl Objective for PotentialObjective<'_> {
    fn value(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.net.forward(&self.input(theta))?[0])
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let g = self.net.input_gradient(&self.input(theta), &[1.0])?;
        Ok(g[self.featurizer.state_dim()..].to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArgmaxConfig {
    /// First step size, in box-normalized units. Steps grow after accepted
    /// moves and shrink after rejected ones.
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Extra ascents from uniformly random starts.
    pub restarts: usize,
    pub warm_start: Option<Vec<PolicyParams>>,
    /// Random evaluations used only to estimate the remaining slack.
    pub probes: usize,
    /// Optimize only this car's block, keeping the others at the warm start.
    pub block: Option<usize>,
    pub seed: u64,
    /// Stop when a step moves less than this (box-normalized, max norm).
    pub tol: f64,
}

impl Default for ArgmaxConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            max_iters: 200,
            restarts: 0,
            warm_start: None,
            probes: 0,
            block: None,
            seed: 0,
            tol: 1e-9,
        }
    }
}

impl ArgmaxConfig {
    pub fn validate(&self, n_cars: usize) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(
                "argmax learning_rate must be positive".into(),
            ));
        }
        if let Some(w) = &self.warm_start {
            if w.len() != n_cars {
                return Err(Error::DimensionMismatch {
                    expected: n_cars,
                    got: w.len(),
                });
            }
        }
        if self.block.is_some_and(|b| b >= n_cars) {
            return Err(Error::InvalidConfig("argmax block out of range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArgmaxResult {
    pub theta: Vec<PolicyParams>,
    pub value: f64,
    /// Objective at the (projected) warm start, if one was given.
    pub warm_value: Option<f64>,
    /// Slack estimate: how far the first ascent fell short of the best one,
    /// plus any excess of the best probe over the result.
    pub lambda: f64,
    pub iterations: usize,
}

struct Space<'a> {
    lo: Vec<f64>,
    width: Vec<f64>,
    /// Coordinates the ascent may move.
    free: Vec<bool>,
    obj: &'a dyn Objective,
}

impl Space<'_> {
    fn theta(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(&self.lo)
            .zip(&self.width)
            .map(|((u, lo), w)| lo + w * u)
            .collect()
    }

    fn value(&self, u: &[f64]) -> Result<f64> {
        let v = self.obj.value(&self.theta(u))?;
        if !v.is_finite() {
            return Err(Error::NonFiniteObjective);
        }
        Ok(v)
    }

    fn ascend(
        &self,
        mut u: Vec<f64>,
        cfg: &ArgmaxConfig,
        iters: &mut usize,
    ) -> Result<(Vec<f64>, f64)> {
        let mut f = self.value(&u)?;
        let mut step = cfg.learning_rate;
        for _ in 0..cfg.max_iters {
            *iters += 1;
            let g = self.obj.gradient(&self.theta(&u))?;
            let gu: Vec<f64> = (0..u.len())
                .map(|k| {
                    if self.free[k] {
                        g[k] * self.width[k]
                    } else {
                        0.0
                    }
                })
                .collect();
            let cand: Vec<f64> = u
                .iter()
                .zip(&gu)
                .map(|(u, g)| (u + step * g).clamp(0.0, 1.0))
                .collect();
            let moved = cand
                .iter()
                .zip(&u)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            if moved < cfg.tol {
                break;
            }
            let fc = self.value(&cand)?;
            if fc > f {
                u = cand;
                f = fc;
                step *= 2.0;
            } else {
                step *= 0.5;
            }
        }
        Ok((u, f))
    }
}

fn unflatten(theta: &[f64]) -> Vec<PolicyParams> {
    theta
        .chunks(THETA_DIM)
        .map(|c| PolicyParams::from_slice(c).expect("chunk of THETA_DIM"))
        .collect()
}

/// Maximizes `obj` over the joint box (each car's block in `theta_box`).
/// The ascent starts from the warm start (or the box centre) and then from
/// `restarts` random points; the best point found is returned, so the result
/// is never worse than the warm start.
pub fn maximize_potential(
    obj: &dyn Objective,
    n_cars: usize,
    theta_box: &ThetaBox,
    cfg: &ArgmaxConfig,
) -> Result<ArgmaxResult> {
    cfg.validate(n_cars)?;
    theta_box.validate()?;
    let (lo, w) = (theta_box.lo.to_array(), theta_box.width());
    let dim = n_cars * THETA_DIM;
    let space = Space {
        lo: (0..dim).map(|k| lo[k % THETA_DIM]).collect(),
        width: (0..dim).map(|k| w[k % THETA_DIM]).collect(),
        free: (0..dim)
            .map(|k| cfg.block.is_none_or(|b| k / THETA_DIM == b) && w[k % THETA_DIM] > 0.0)
            .collect(),
        obj,
    };
    let to_u = |t: &PolicyParams| -> Vec<f64> {
        let a = theta_box.project(t).to_array();
        (0..THETA_DIM)
            .map(|k| {
                if w[k] > 0.0 {
                    (a[k] - lo[k]) / w[k]
                } else {
                    0.0
                }
            })
            .collect()
    };
    let warm_u: Option<Vec<f64>> = cfg
        .warm_start
        .as_ref()
        .map(|ws| ws.iter().flat_map(&to_u).collect());
    let first = warm_u.clone().unwrap_or_else(|| {
        (0..n_cars)
            .flat_map(|_| to_u(&theta_box.center()))
            .collect()
    });
    let warm_value = warm_u.as_ref().map(|u| space.value(u)).transpose()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut iterations = 0;
    let (mut best_u, first_value) = space.ascend(first.clone(), cfg, &mut iterations)?;
    let mut best = first_value;
    for _ in 0..cfg.restarts {
        let mut u = first.clone();
        for k in 0..dim {
            if space.free[k] {
                u[k] = rand::Rng::random::<f64>(&mut rng);
            }
        }
        let (u, f) = space.ascend(u, cfg, &mut iterations)?;
        if f > best {
            best = f;
            best_u = u;
        }
    }
    let mut probe_best = f64::NEG_INFINITY;
    for _ in 0..cfg.probes {
        let mut u = first.clone();
        for k in 0..dim {
            if space.free[k] {
                u[k] = rand::Rng::random::<f64>(&mut rng);
            }
        }
        probe_best = probe_best.max(space.value(&u)?);
    }
    Ok(ArgmaxResult {
        theta: unflatten(&space.theta(&best_u)),
        value: best,
        warm_value,
        lambda: (best - first_value) + (probe_best - best).max(0.0),
        iterations,
    })
}
