//! Nash regret of a computed profile and the approximation certificate.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::CarState;
use crate::error::{Error, Result};
use crate::game::{discounted_return, rollout, GameConfig, World};
use crate::learning::{Featurizer, Mlp};
use crate::policy::{PolicyParams, ThetaBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretReport {
    pub state_id: usize,
    /// Best improvement over the computed parameters among the candidates.
    pub regret: f64,
    /// `regret` as a fraction of the value range.
    pub regret_rel: f64,
    pub candidates: usize,
    /// The best-scoring candidate (none for an empty candidate set).
    pub best: Option<PolicyParams>,
}

/// Regret of car parameters `star` given a payoff for each of the car's
/// own parameter choices (the others held fixed). Candidates are scored
/// concurrently; an empty candidate set has no regret.
pub fn nash_regret<F>(
    state_id: usize,
    payoff: F,
    star: &PolicyParams,
    candidates: &[PolicyParams],
    range: f64,
) -> Result<RegretReport>
where
    F: Fn(&PolicyParams) -> Result<f64> + Sync,
{
    if !(range > 0.0) {
        return Err(Error::DegenerateRange(range));
    }
    let base = payoff(star)?;
    let scores: Vec<f64> = candidates.par_iter().map(&payoff).collect::<Result<_>>()?;
    let mut regret = 0.0;
    let mut best = None;
    for (k, s) in scores.iter().enumerate() {
        let r = s - base;
        if best.is_none() || r > regret {
            regret = r;
            best = Some(candidates[k]);
        }
    }
    Ok(RegretReport {
        state_id,
        regret,
        regret_rel: regret / range,
        candidates: candidates.len(),
        best,
    })
}

/// Car `i`'s learned value at `states` when it plays `own` and the others
/// keep `profile`.
pub fn value_net_payoff<'a>(
    net: &'a Mlp,
    featurizer: &'a Featurizer,
    states: &[CarState],
    profile: &'a [PolicyParams],
    i: usize,
) -> Result<impl Fn(&PolicyParams) -> Result<f64> + Sync + 'a> {
    let x = featurizer.state_features(states)?;
    Ok(move |own: &PolicyParams| {
        let mut t = profile.to_vec();
        t[i] = *own;
        Ok(net.forward(&featurizer.join(&x, &t)?)?[0])
    })
}

/// Car `i`'s discounted return over a `horizon`-step simulation from
/// `states` when it plays `own` and the others keep `profile`.
pub fn rollout_payoff<'a>(
    world: &'a World,
    game: &'a GameConfig,
    states: &'a [CarState],
    profile: &'a [PolicyParams],
    i: usize,
    horizon: usize,
) -> impl Fn(&PolicyParams) -> Result<f64> + Sync + 'a {
    move |own: &PolicyParams| {
        let mut t = profile.to_vec();
        t[i] = *own;
        let r = rollout(world, game, states, &t, horizon)?;
        Ok(discounted_return(&r.utilities_of(i), game.gamma))
    }
}

/// `n` uniform draws from the box.
pub fn random_candidates<R: Rng + ?Sized>(
    tb: &ThetaBox,
    n: usize,
    rng: &mut R,
) -> Vec<PolicyParams> {
    (0..n).map(|_| tb.sample(rng)).collect()
}

pub fn write_regret_csv<W: Write>(reports: &[RegretReport], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["state_id", "regret", "regret_rel"])?;
    for r in reports {
        w.write_record([
            r.state_id.to_string(),
            r.regret.to_string(),
            r.regret_rel.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// The equilibrium quality implied by an argmax slack and a potential
/// approximation error: no car gains more than `epsilon` by deviating.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub lambda: f64,
    pub alpha_hat: f64,
    pub epsilon: f64,
}

pub fn certify_prop1(lambda: f64, alpha_hat: f64) -> Certificate {
    Certificate {
        lambda,
        alpha_hat,
        epsilon: lambda + alpha_hat,
    }
}

/// A finite game: each car picks from its own grid, payoffs are tabulated
/// for every joint choice.
#[derive(Debug, Clone, PartialEq)]
pub struct GridGame {
    pub grids: Vec<Vec<PolicyParams>>,
    /// Row-major over joint indices (car 0 slowest), one payoff per car.
    payoffs: Vec<Vec<f64>>,
}

impl GridGame {
    /// Tabulates `payoff` over all joint choices (evaluated concurrently).
    pub fn build<F>(grids: Vec<Vec<PolicyParams>>, payoff: F) -> Result<Self>
    where
        F: Fn(&[PolicyParams]) -> Result<Vec<f64>> + Sync,
    {
        if grids.is_empty() || grids.iter().any(|g| g.is_empty()) {
            return Err(Error::InvalidConfig(
                "every car needs a non-empty grid".into(),
            ));
        }
        let g = Self {
            grids,
            payoffs: Vec::new(),
        };
        let payoffs = (0..g.n_profiles())
            .into_par_iter()
            .map(|k| {
                let p = payoff(&g.params(&g.unrank(k)))?;
                if p.len() != g.grids.len() {
                    return Err(Error::DimensionMismatch {
                        expected: g.grids.len(),
                        got: p.len(),
                    });
                }
                Ok(p)
            })
            .collect::<Result<_>>()?;
        Ok(Self { payoffs, ..g })
    }

    pub fn n_cars(&self) -> usize {
        self.grids.len()
    }

    pub fn n_profiles(&self) -> usize {
        self.grids.iter().map(|g| g.len()).product()
    }

    pub fn rank(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.grids)
            .fold(0, |acc, (i, g)| acc * g.len() + i)
    }

    pub fn unrank(&self, mut k: usize) -> Vec<usize> {
        let mut idx = vec![0; self.grids.len()];
        for c in (0..self.grids.len()).rev() {
            idx[c] = k % self.grids[c].len();
            k /= self.grids[c].len();
        }
        idx
    }

    pub fn params(&self, idx: &[usize]) -> Vec<PolicyParams> {
        idx.iter().zip(&self.grids).map(|(&i, g)| g[i]).collect()
    }

    pub fn payoff(&self, idx: &[usize]) -> &[f64] {
        &self.payoffs[self.rank(idx)]
    }

    /// Largest gain any car can get by a unilateral switch within its grid.
    pub fn exploitability(&self, idx: &[usize]) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n_cars() {
            let base = self.payoff(idx)[i];
            let mut dev = idx.to_vec();
            for c in 0..self.grids[i].len() {
                dev[i] = c;
                worst = worst.max(self.payoff(&dev)[i] - base);
            }
        }
        worst
    }

    /// Largest `|(phi(p) - phi(p')) - (V_i(p) - V_i(p'))|` over all joint
    /// choices `p` and unilateral deviations `p'` of any car `i`, with `phi`
    /// given per joint rank.
    pub fn alpha(&self, phi: &[f64]) -> Result<f64> {
        if phi.len() != self.n_profiles() {
            return Err(Error::DimensionMismatch {
                expected: self.n_profiles(),
                got: phi.len(),
            });
        }
        let mut worst: f64 = 0.0;
        for k in 0..self.n_profiles() {
            let idx = self.unrank(k);
            for i in 0..self.n_cars() {
                let mut dev = idx.clone();
                for c in 0..self.grids[i].len() {
                    dev[i] = c;
                    let kd = self.rank(&dev);
                    let dv = self.payoffs[k][i] - self.payoffs[kd][i];
                    worst = worst.max(((phi[k] - phi[kd]) - dv).abs());
                }
            }
        }
        Ok(worst)
    }

    /// Joint choice maximizing `phi` (lowest rank on ties).
    pub fn argmax(&self, phi: &[f64]) -> Vec<usize> {
        let mut best = 0;
        for k in 1..phi.len() {
            if phi[k] > phi[best] {
                best = k;
            }
        }
        self.unrank(best)
    }
}
