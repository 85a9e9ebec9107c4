//! Function approximation: the MLP, value-function regression and the
//! potential-function fit.

mod features;
mod mlp;
mod potential;
mod value;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use features::Featurizer;
pub use mlp::{Adam, Gradients, LayerFile, Mlp, MlpFile, MODEL_SCHEMA};
pub use potential::{
    approximation_gap, build_potential_samples, paired_rollout_samples, train_potential, GapReport,
    PotentialFit, PotentialSample,
};
pub use value::{fit_value, train_value, value_episodes, Episode, ValueFit, ValueTarget};

pub const VALUE_HIDDEN: [usize; 3] = [128, 128, 64];
pub const POTENTIAL_HIDDEN: [usize; 3] = [384, 384, 192];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub gamma: f64,
    /// Share of races (value) or samples (potential) held out.
    pub val_fraction: f64,
    /// Use every `stride`-th step of each race as a value training row.
    pub stride: usize,
    /// The step size follows a cosine from `learning_rate` down to
    /// `learning_rate * final_lr_fraction` over the run; 1 keeps it fixed.
    pub final_lr_fraction: f64,
    /// Value nets only: regress onto returns over this many steps instead
    /// of the whole remaining race, using only steps with a full window.
    pub window: Option<usize>,
    /// Value nets only: return the weights of the epoch with the lowest
    /// held-out loss instead of the last ones.
    pub early_stopping: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 2000,
            batch_size: 256,
            seed: 0,
            gamma: 0.99,
            val_fraction: 0.2,
            stride: 1,
            final_lr_fraction: 1.0,
            early_stopping: false,
            window: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return bad("final_lr_fraction must lie in (0, 1]");
        }
        if self.window == Some(0) {
            return bad("window must be at least 1 step");
        }
        if self.stride == 0 {
            return bad("stride must be at least 1");
        }
        Ok(())
    }

    /// Step size for `epoch` (counting from zero).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 || self.final_lr_fraction == 1.0 {
            return self.learning_rate;
        }
        let t = epoch as f64 / (self.epochs - 1) as f64;
        let f = self.final_lr_fraction;
        self.learning_rate * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}

/// Widths of a scalar-output net with the given hidden layers.
pub fn arch(input: usize, hidden: &[usize]) -> Vec<usize> {
    let mut w = Vec::with_capacity(hidden.len() + 2);
    w.push(input);
    w.extend_from_slice(hidden);
    w.push(1);
    w
}

/// Splits `0..n` into (train, held-out) after a seeded shuffle. Keeps at
/// least one training index; holds out nothing when `n < 2`.
pub(crate) fn split<R: Rng + ?Sized>(
    n: usize,
    fraction: f64,
    rng: &mut R,
) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let held = if n < 2 {
        0
    } else {
        ((fraction * n as f64).round() as usize).min(n - 1)
    };
    let train = idx.split_off(held);
    (train, idx)
}

pub(crate) fn mse(pred: &Array1<f64>, target: &Array1<f64>) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64
}

/// One pass of minibatch squared-error regression. Returns the mean of the
/// batch losses seen during the pass.
pub(crate) fn regression_epoch<R: Rng + ?Sized>(
    net: &mut Mlp,
    opt: &mut Adam,
    x: &Array2<f64>,
    y: &Array1<f64>,
    batch: usize,
    rng: &mut R,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut batches = 0;
    for chunk in order.chunks(batch) {
        let xb = x.select(Axis(0), chunk);
        let yb = y.select(Axis(0), chunk);
        let pred = net.forward_batch(xb.view())?.column(0).to_owned();
        let err = &pred - &yb;
        total += err.mapv(|e| e * e).mean().unwrap_or(0.0);
        batches += 1;
        let up = (err * (2.0 / chunk.len() as f64)).insert_axis(Axis(1));
        let g = net.gradients(xb.view(), up.view())?;
        opt.step(net, &g);
    }
    Ok(total / batches.max(1) as f64)
}

pub(crate) fn predict(net: &Mlp, x: &Array2<f64>) -> Result<Array1<f64>> {
    Ok(net.forward_batch(x.view())?.column(0).to_owned())
}
