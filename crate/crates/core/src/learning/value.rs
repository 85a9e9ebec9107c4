//! Value-function regression on recorded races.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{arch, mse, predict, regression_epoch, split, Adam, Featurizer, Mlp, TrainConfig};
use crate::error::{Error, Result};
use crate::game::{returns_to_go, Dataset};

/// What the value net is regressed onto.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub enum ValueTarget {
    /// Truncated discounted return-to-go of the recorded race.
    #[default]
    ReturnToGo,
    /// Lambda-returns bootstrapped from the net itself, refreshed every epoch.
    TdLambda(f64),
}

/// One car's view of one race: input rows for every recorded state and the
/// utilities collected between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub features: Array2<f64>,
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ValueFit {
    pub net: Mlp,
    pub train_loss: f64,
    /// Squared error against returns-to-go on held-out races (NaN when
    /// nothing was held out).
    pub val_loss: f64,
    pub val_r2: f64,
    /// Mean training loss per epoch.
    pub history: Vec<f64>,
}

/// Car `i`'s episodes, each state paired with the race's parameters.
pub fn value_episodes(
    dataset: &Dataset,
    featurizer: &Featurizer,
    i: usize,
) -> Result<Vec<Episode>> {
    if i >= featurizer.n_cars {
        return Err(Error::InvalidConfig(format!("car index {i} out of range")));
    }
    dataset
        .races
        .iter()
        .map(|r| {
            let rows = r
                .states
                .iter()
                .map(|x| featurizer.features(x, &r.theta))
                .collect::<Result<Vec<_>>>()?;
            let dim = featurizer.dim();
            let flat: Vec<f64> = rows.into_iter().flatten().collect();
            let features = Array2::from_shape_vec((r.states.len(), dim), flat)
                .map_err(|e| Error::InvalidData(e.to_string()))?;
            Ok(Episode {
                features,
                rewards: r.utilities_of(i),
            })
        })
        .collect()
}

/// Trains `V^i` on a dataset. See [`fit_value`].
pub fn train_value(
    dataset: &Dataset,
    featurizer: &Featurizer,
    i: usize,
    hidden: &[usize],
    cfg: &TrainConfig,
    target: ValueTarget,
) -> Result<ValueFit> {
    if dataset.races.is_empty() {
        return Err(Error::EmptyDataset);
    }
    fit_value(
        &value_episodes(dataset, featurizer, i)?,
        hidden,
        cfg,
        target,
    )
}

/// Training rows of an episode: every `stride`-th step, and with a window
/// only the steps followed by a full window.
fn rows(ep: &Episode, cfg: &TrainConfig) -> Vec<usize> {
    let n = ep.rewards.len();
    let end = match cfg.window {
        Some(w) if w > n => 0,
        Some(w) => n - w + 1,
        None => n,
    };
    (0..end).step_by(cfg.stride).collect()
}

fn stack(eps: &[&Episode], cfg: &TrainConfig, dim: usize) -> Array2<f64> {
    let parts: Vec<Array2<f64>> = eps
        .iter()
        .map(|e| e.features.select(Axis(0), &rows(e, cfg)))
        .collect();
    let mut views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let empty = Array2::zeros((0, dim));
    if views.is_empty() {
        views.push(empty.view());
    }
    ndarray::concatenate(Axis(0), &views).expect("equal widths")
}

fn mc_targets(eps: &[&Episode], cfg: &TrainConfig) -> Array1<f64> {
    eps.iter()
        .flat_map(|e| {
            let mut g = returns_to_go(&e.rewards, cfg.gamma);
            g.push(0.0);
            let tail = cfg.window.map_or(0.0, |w| cfg.gamma.powi(w as i32));
            let w = cfg.window.unwrap_or(0);
            rows(e, cfg).into_iter().map(move |t| {
                if tail > 0.0 {
                    g[t] - tail * g[t + w]
                } else {
                    g[t]
                }
            })
        })
        .collect()
}

/// Lambda-returns with the value beyond the recorded horizon taken as zero,
/// matching the truncated return-to-go.
fn lambda_targets(
    net: &Mlp,
    eps: &[&Episode],
    cfg: &TrainConfig,
    lambda: f64,
) -> Result<Array1<f64>> {
    let gamma = cfg.gamma;
    let mut out = Vec::new();
    for e in eps {
        let v = predict(net, &e.features)?;
        let n = e.rewards.len();
        let mut g = vec![0.0; n];
        let mut next = 0.0;
        for t in (0..n).rev() {
            let v_next = if t + 1 == n { 0.0 } else { v[t + 1] };
            next = e.rewards[t] + gamma * ((1.0 - lambda) * v_next + lambda * next);
            g[t] = next;
        }
        out.extend(rows(e, cfg).into_iter().map(|t| g[t]));
    }
    Ok(Array1::from(out))
}

/// Regresses a scalar net onto episode returns with minibatch Adam.
/// Episodes are split into training and held-out sets as a whole, so the
/// validation loss measures generalization to unseen races.
pub fn fit_value(
    episodes: &[Episode],
    hidden: &[usize],
    cfg: &TrainConfig,
    target: ValueTarget,
) -> Result<ValueFit> {
    cfg.validate()?;
    if let ValueTarget::TdLambda(l) = target {
        if !(0.0..=1.0).contains(&l) {
            return Err(Error::InvalidConfig("lambda must lie in [0, 1]".into()));
        }
        if cfg.window.is_some() {
            return Err(Error::InvalidConfig(
                "a return window applies to return-to-go targets only".into(),
            ));
        }
    }
    let episodes: Vec<&Episode> = episodes.iter().filter(|e| !e.rewards.is_empty()).collect();
    if episodes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dim = episodes[0].features.ncols();
    for e in &episodes {
        if e.features.ncols() != dim || e.features.nrows() != e.rewards.len() + 1 {
            return Err(Error::InvalidData(
                "episode rows do not match its rewards".into(),
            ));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (tr, va) = split(episodes.len(), cfg.val_fraction, &mut rng);
    let train: Vec<&Episode> = tr.iter().map(|&k| episodes[k]).collect();
    let val: Vec<&Episode> = va.iter().map(|&k| episodes[k]).collect();

    let x = stack(&train, cfg, dim);
    let mut y = mc_targets(&train, cfg);
    if y.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (xv, yv) = (stack(&val, cfg, dim), mc_targets(&val, cfg));
    let mut net = Mlp::new(&arch(dim, hidden), cfg.seed)?;
    net.fit_normalization(x.view())?;
    let mut opt = Adam::new(&net, cfg.learning_rate);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Mlp)> = None;
    for epoch in 0..cfg.epochs {
        opt.lr = cfg.lr_at(epoch);
        if let ValueTarget::TdLambda(l) = target {
            y = lambda_targets(&net, &train, cfg, l)?;
        }
        history.push(regression_epoch(
            &mut net,
            &mut opt,
            &x,
            &y,
            cfg.batch_size,
            &mut rng,
        )?);
        if cfg.early_stopping && !yv.is_empty() {
            let loss = mse(&predict(&net, &xv)?, &yv);
            if best.as_ref().is_none_or(|(b, _)| loss < *b) {
                best = Some((loss, net.clone()));
            }
        }
    }
    if let Some((_, b)) = best {
        net = b;
        if let ValueTarget::TdLambda(l) = target {
            y = lambda_targets(&net, &train, cfg, l)?;
        }
    }
    let train_loss = mse(&predict(&net, &x)?, &y);
    let (val_loss, val_r2) = if yv.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let loss = mse(&predict(&net, &xv)?, &yv);
        let var = yv.var(0.0);
        (
            loss,
            if var > 0.0 {
                1.0 - loss / var
            } else {
                f64::NAN
            },
        )
    };
    Ok(ValueFit {
        net,
        train_loss,
        val_loss,
        val_r2,
        history,
    })
}
