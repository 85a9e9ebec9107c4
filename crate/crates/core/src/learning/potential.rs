//! Fitting a potential function to value differences under unilateral
//! parameter changes.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{arch, predict, split, Adam, Featurizer, Mlp, TrainConfig};
use crate::dynamics::CarState;
use crate::error::{Error, Result};
use crate::game::{discounted_return, rollout, Dataset, GameConfig, World};
use crate::policy::{PolicyParams, ThetaBox};

/// One constraint of the fit: car `i` switching from `theta[i]` to
/// `theta_i_prime` in joint state `states` changes its value by `dv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialSample {
    pub states: Vec<CarState>,
    /// State features of `states`.
    pub x: Vec<f64>,
    pub theta: Vec<PolicyParams>,
    pub theta_i_prime: PolicyParams,
    pub i: usize,
    pub dv: f64,
}

impl PotentialSample {
    /// The joint parameters after the deviation.
    pub fn deviated(&self) -> Vec<PolicyParams> {
        let mut t = self.theta.clone();
        t[self.i] = self.theta_i_prime;
        t
    }

    /// Network inputs before and after the deviation.
    pub fn inputs(&self, f: &Featurizer) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((
            f.join(&self.x, &self.theta)?,
            f.join(&self.x, &self.deviated())?,
        ))
    }
}

struct Draw {
    states: Vec<CarState>,
    theta: Vec<PolicyParams>,
    prime: PolicyParams,
    i: usize,
}

fn draws(dataset: &Dataset, theta_box: &ThetaBox, n: usize, seed: u64) -> Result<Vec<Draw>> {
    if dataset.races.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let r = &dataset.races[rng.random_range(0..dataset.races.len())];
            let states = r.states[rng.random_range(0..r.states.len())].clone();
            let theta = (0..states.len())
                .map(|_| theta_box.sample(&mut rng))
                .collect();
            let i = rng.random_range(0..states.len());
            let prime = theta_box.sample(&mut rng);
            Draw {
                states,
                theta,
                prime,
                i,
            }
        })
        .collect())
}

fn finish(d: Draw, f: &Featurizer, dv: f64) -> Result<PotentialSample> {
    Ok(PotentialSample {
        x: f.state_features(&d.states)?,
        states: d.states,
        theta: d.theta,
        theta_i_prime: d.prime,
        i: d.i,
        dv,
    })
}

/// Draws joint states from the dataset and parameters from the box, and
/// scores each deviation with the learned value nets (one per car).
pub fn build_potential_samples(
    dataset: &Dataset,
    featurizer: &Featurizer,
    values: &[Mlp],
    theta_box: &ThetaBox,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<PotentialSample>> {
    if values.len() != featurizer.n_cars {
        return Err(Error::DimensionMismatch {
            expected: featurizer.n_cars,
            got: values.len(),
        });
    }
    draws(dataset, theta_box, n_samples, seed)?
        .into_iter()
        .map(|d| {
            let x = featurizer.state_features(&d.states)?;
            let a = featurizer.join(&x, &d.theta)?;
            let mut dev = d.theta.clone();
            dev[d.i] = d.prime;
            let b = featurizer.join(&x, &dev)?;
            let v = &values[d.i];
            let dv = v.forward(&a)?[0] - v.forward(&b)?[0];
            finish(d, featurizer, dv)
        })
        .collect()
}

/// Like [`build_potential_samples`] but scores each deviation by simulating
/// both parameter sets for `horizon` steps from the drawn state.
#[allow(clippy::too_many_arguments)]
pub fn paired_rollout_samples(
    world: &World,
    game: &GameConfig,
    dataset: &Dataset,
    featurizer: &Featurizer,
    theta_box: &ThetaBox,
    n_samples: usize,
    seed: u64,
    horizon: usize,
) -> Result<Vec<PotentialSample>> {
    draws(dataset, theta_box, n_samples, seed)?
        .into_par_iter()
        .map(|d| {
            let mut dev = d.theta.clone();
            dev[d.i] = d.prime;
            let ret = |theta: &[PolicyParams]| -> Result<f64> {
                let r = rollout(world, game, &d.states, theta, horizon)?;
                Ok(discounted_return(&r.utilities_of(d.i), game.gamma))
            };
            let dv = ret(&d.theta)? - ret(&dev)?;
            finish(d, featurizer, dv)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct PotentialFit {
    pub net: Mlp,
    /// Largest absolute constraint violation on the held-out samples (on the
    /// training samples when nothing was held out).
    pub alpha_hat: f64,
    pub train_loss: f64,
    pub history: Vec<f64>,
    /// Indices of the held-out samples.
    pub held_out: Vec<usize>,
}

fn input_matrices(
    samples: &[PotentialSample],
    f: &Featurizer,
) -> Result<(Array2<f64>, Array2<f64>, Array1<f64>)> {
    let n = samples.len();
    let dim = f.dim();
    let mut a = Array2::zeros((n, dim));
    let mut b = Array2::zeros((n, dim));
    for (k, s) in samples.iter().enumerate() {
        let (ia, ib) = s.inputs(f)?;
        a.row_mut(k).assign(&Array1::from(ia));
        b.row_mut(k).assign(&Array1::from(ib));
    }
    let dv = samples.iter().map(|s| s.dv).collect();
    Ok((a, b, dv))
}

/// Violations `(Phi(a) - Phi(b)) - dv` for each row.
fn violations(
    net: &Mlp,
    a: &Array2<f64>,
    b: &Array2<f64>,
    dv: &Array1<f64>,
) -> Result<Array1<f64>> {
    Ok(predict(net, a)? - predict(net, b)? - dv)
}

/// Minimizes the mean squared constraint violation with minibatch Adam and
/// reports the worst held-out violation as `alpha_hat`.
pub fn train_potential(
    samples: &[PotentialSample],
    featurizer: &Featurizer,
    hidden: &[usize],
    cfg: &TrainConfig,
) -> Result<PotentialFit> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    let (a, b, dv) = input_matrices(samples, featurizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (train, held_out) = split(samples.len(), cfg.val_fraction, &mut rng);
    let (at, bt, dvt) = (
        a.select(Axis(0), &train),
        b.select(Axis(0), &train),
        dv.select(Axis(0), &train),
    );

    let mut net = Mlp::new(&arch(featurizer.dim(), hidden), cfg.seed)?;
    let both = ndarray::concatenate(Axis(0), &[at.view(), bt.view()]).expect("equal widths");
    net.fit_normalization(both.view())?;
    let mut opt = Adam::new(&net, cfg.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        opt.lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let xa = at.select(Axis(0), chunk);
            let xb = bt.select(Axis(0), chunk);
            let e = violations(&net, &xa, &xb, &dvt.select(Axis(0), chunk))?;
            total += e.mapv(|v| v * v).mean().unwrap_or(0.0);
            batches += 1;
            let up = (e * (2.0 / chunk.len() as f64)).insert_axis(Axis(1));
            let mut g = net.gradients(xa.view(), up.view())?;
            g.add(&net.gradients(xb.view(), (-&up).view())?);
            opt.step(&mut net, &g);
        }
        history.push(total / batches as f64);
    }
    let e_train = violations(&net, &at, &bt, &dvt)?;
    let train_loss = e_train.mapv(|v| v * v).mean().unwrap_or(0.0);
    let alpha_hat = if held_out.is_empty() {
        e_train.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    } else {
        let e = violations(
            &net,
            &a.select(Axis(0), &held_out),
            &b.select(Axis(0), &held_out),
            &dv.select(Axis(0), &held_out),
        )?;
        e.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    };
    Ok(PotentialFit {
        net,
        alpha_hat,
        train_loss,
        history,
        held_out,
    })
}

/// Relative approximation gaps `|dPhi - dV| / range` per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub gaps: Vec<f64>,
    pub median: f64,
    pub max: f64,
    pub mean: f64,
    pub range: f64,
}

impl GapReport {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["gap_rel"])?;
        for g in &self.gaps {
            w.write_record([g.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

pub(crate) fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

pub fn approximation_gap(
    phi: &Mlp,
    samples: &[PotentialSample],
    featurizer: &Featurizer,
    range: f64,
) -> Result<GapReport> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    if !(range >= 1e-9) {
        return Err(Error::DegenerateRange(range));
    }
    let (a, b, dv) = input_matrices(samples, featurizer)?;
    let gaps: Vec<f64> = violations(phi, &a, &b, &dv)?
        .iter()
        .map(|e| e.abs() / range)
        .collect();
    Ok(GapReport {
        median: median(&gaps),
        max: gaps.iter().fold(0.0f64, |m, &g| m.max(g)),
        mean: gaps.iter().sum::<f64>() / gaps.len() as f64,
        gaps,
        range,
    })
}
