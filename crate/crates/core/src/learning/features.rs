//! Network inputs built from a joint state and the cars' policy parameters.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::dynamics::CarState;
use crate::error::{Error, Result};
use crate::policy::{PolicyParams, THETA_DIM};

/// Per-car state features: `p_x` relative to the field's mean, then
/// `p_y, phi, v_x, v_y, omega`.
const CAR_DIM: usize = 6;

/// Layout of the joint input: where the pack is on the lap (sine and cosine
/// of the mean arc length), each car's state relative to the pack, then the
/// raw parameters of every car.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Featurizer {
    pub n_cars: usize,
    pub track_length: f64,
}

impl Featurizer {
    pub fn new(n_cars: usize, track_length: f64) -> Result<Self> {
        if n_cars == 0 || !(track_length > 0.0) {
            return Err(Error::InvalidConfig(
                "featurizer needs at least one car and a positive track length".into(),
            ));
        }
        Ok(Self {
            n_cars,
            track_length,
        })
    }

    pub fn state_dim(&self) -> usize {
        2 + CAR_DIM * self.n_cars
    }

    pub fn dim(&self) -> usize {
        self.state_dim() + THETA_DIM * self.n_cars
    }

    /// Index of the first parameter of car `i` in the joint input.
    pub fn theta_offset(&self, i: usize) -> usize {
        self.state_dim() + THETA_DIM * i
    }

    pub fn state_features(&self, states: &[CarState]) -> Result<Vec<f64>> {
        if states.len() != self.n_cars {
            return Err(Error::DimensionMismatch {
                expected: self.n_cars,
                got: states.len(),
            });
        }
        let mean = states.iter().map(|s| s.p_x).sum::<f64>() / states.len() as f64;
        let angle = TAU * mean / self.track_length;
        let mut f = Vec::with_capacity(self.state_dim());
        f.push(angle.sin());
        f.push(angle.cos());
        for s in states {
            f.extend_from_slice(&[s.p_x - mean, s.p_y, s.phi, s.v_x, s.v_y, s.omega]);
        }
        Ok(f)
    }

    /// Appends the parameters of all cars to precomputed state features.
    pub fn join(&self, state_features: &[f64], theta: &[PolicyParams]) -> Result<Vec<f64>> {
        if state_features.len() != self.state_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.state_dim(),
                got: state_features.len(),
            });
        }
        if theta.len() != self.n_cars {
            return Err(Error::DimensionMismatch {
                expected: self.n_cars,
                got: theta.len(),
            });
        }
        let mut f = Vec::with_capacity(self.dim());
        f.extend_from_slice(state_features);
        for t in theta {
            f.extend_from_slice(&t.to_array());
        }
        Ok(f)
    }

    pub fn features(&self, states: &[CarState], theta: &[PolicyParams]) -> Result<Vec<f64>> {
        self.join(&self.state_features(states)?, theta)
    }
}
