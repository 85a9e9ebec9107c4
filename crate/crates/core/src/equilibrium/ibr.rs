//! Iterated best response over candidate parameter sets.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::Result;
use crate::policy::{PolicyParams, ThetaBox, THETA_DIM};

/// Round-robin best response: in each round, cars `0..n` in turn replace
/// their parameters by the candidate with the highest `payoff(i, profile)`
/// against the current others (first candidate on ties). Candidates are
/// produced per car from its current parameters and scored concurrently.
pub fn ibr<C, F>(
    init: &[PolicyParams],
    rounds: usize,
    candidates: C,
    payoff: F,
) -> Result<Vec<PolicyParams>>
where
    C: Fn(usize, &PolicyParams) -> Vec<PolicyParams>,
    F: Fn(usize, &[PolicyParams]) -> Result<f64> + Sync,
{
    let mut profile = init.to_vec();
    for _ in 0..rounds {
        for i in 0..profile.len() {
            let cands = candidates(i, &profile[i]);
            if cands.is_empty() {
                continue;
            }
            let scores: Vec<f64> = cands
                .par_iter()
                .map(|c| {
                    let mut t = profile.clone();
                    t[i] = *c;
                    payoff(i, &t)
                })
                .collect::<Result<_>>()?;
            let mut best = 0;
            for k in 1..scores.len() {
                if scores[k] > scores[best] {
                    best = k;
                }
            }
            profile[i] = cands[best];
        }
    }
    Ok(profile)
}

/// Three values per parameter around `theta` (a quarter box width either
/// side, projected into the box), i.e. up to 243 candidates with `theta`
/// itself first. With `budget` below the full grid, `theta` plus a seeded
/// random subset of the rest is kept.
pub fn local_grid(
    tb: &ThetaBox,
    theta: &PolicyParams,
    budget: usize,
    seed: u64,
) -> Vec<PolicyParams> {
    let centre = tb.project(theta);
    let (c, w) = (centre.to_array(), tb.width());
    let mut grid = vec![centre];
    let total = 3usize.pow(THETA_DIM as u32);
    for code in 0..total {
        let mut a = c;
        let mut k = code;
        for d in 0..THETA_DIM {
            let off = (k % 3) as f64 - 1.0;
            k /= 3;
            a[d] += off * 0.25 * w[d];
        }
        let t = tb.project(&PolicyParams::from_array(a));
        if !grid.contains(&t) {
            grid.push(t);
        }
    }
    if budget < grid.len() {
        let mut rest = grid.split_off(1);
        rest.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        grid.extend(rest.into_iter().take(budget.saturating_sub(1)));
    }
    grid
}
