//! The parameterized racing policy: a reference trajectory shaped around the
//! raceline for overtaking and blocking, tracked by a receding-horizon MPC.

mod mpc;
mod reference;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use mpc::{mpc_solve, Controller, MpcConfig, MpcProblem, MpcSolution, PolicyContext};
pub use reference::{
    blocking_adjustment, neighbours, overtake_adjustment, perturbed_raceline, raceline_state,
    reference_trajectory, Opponent, PerturbedRaceline, ReferenceTrajectory,
};

/// Number of scalars in one car's policy parameters.
pub const THETA_DIM: usize = 5;

/// One car's policy parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    /// Tracking weight.
    pub q: f64,
    /// Raceline speed scale.
    pub zeta: f64,
    /// Overtake lateral reach (m).
    pub s1: f64,
    /// Longitudinal decay (1/m^2).
    pub s2: f64,
    /// Speed-gap sensitivity (s/m).
    pub s3: f64,
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self {
            q: 1.0,
            zeta: 1.0,
            s1: 1.0,
            s2: 0.1,
            s3: 0.5,
        }
    }
}

impl PolicyParams {
    pub fn to_array(&self) -> [f64; THETA_DIM] {
        [self.q, self.zeta, self.s1, self.s2, self.s3]
    }

    pub fn from_array(a: [f64; THETA_DIM]) -> Self {
        Self {
            q: a[0],
            zeta: a[1],
            s1: a[2],
            s2: a[3],
            s3: a[4],
        }
    }

    /// Finite values with a positive tracking weight and a non-negative
    /// speed scale.
    pub fn validate(&self) -> Result<()> {
        if self.to_array().iter().any(|v| !v.is_finite()) || !(self.q > 0.0) || !(self.zeta >= 0.0)
        {
            return Err(Error::InvalidConfig(format!(
                "invalid policy parameters {:?}",
                self.to_array()
            )));
        }
        Ok(())
    }

    pub fn from_slice(a: &[f64]) -> Result<Self> {
        let arr: [f64; THETA_DIM] = a.try_into().map_err(|_| Error::DimensionMismatch {
            expected: THETA_DIM,
            got: a.len(),
        })?;
        Ok(Self::from_array(arr))
    }
}

/// Axis-aligned box of admissible policy parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaBox {
    pub lo: PolicyParams,
    pub hi: PolicyParams,
}

impl Default for ThetaBox {
    fn default() -> Self {
        Self {
            lo: PolicyParams {
                q: 0.5,
                zeta: 0.6,
                s1: 0.0,
                s2: 0.01,
                s3: 0.0,
            },
            hi: PolicyParams {
                q: 5.0,
                zeta: 1.1,
                s1: 3.0,
                s2: 0.5,
                s3: 1.0,
            },
        }
    }
}

impl ThetaBox {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = (self.lo.to_array(), self.hi.to_array());
        if lo.iter().chain(&hi).any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("theta box must be finite".into()));
        }
        if lo.iter().zip(&hi).any(|(a, b)| a > b) {
            return Err(Error::InvalidConfig("theta box needs lo <= hi".into()));
        }
        if !(self.lo.q > 0.0) {
            return Err(Error::InvalidConfig("theta box needs q > 0".into()));
        }
        if lo[1..].iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidConfig(
                "theta box needs zeta, s1, s2, s3 >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn contains(&self, t: &PolicyParams) -> bool {
        let (lo, hi, v) = (self.lo.to_array(), self.hi.to_array(), t.to_array());
        (0..THETA_DIM).all(|k| v[k] >= lo[k] && v[k] <= hi[k])
    }

    pub fn project(&self, t: &PolicyParams) -> PolicyParams {
        let (lo, hi, v) = (self.lo.to_array(), self.hi.to_array(), t.to_array());
        PolicyParams::from_array(std::array::from_fn(|k| v[k].clamp(lo[k], hi[k])))
    }

    pub fn center(&self) -> PolicyParams {
        let (lo, hi) = (self.lo.to_array(), self.hi.to_array());
        PolicyParams::from_array(std::array::from_fn(|k| 0.5 * (lo[k] + hi[k])))
    }

    pub fn width(&self) -> [f64; THETA_DIM] {
        let (lo, hi) = (self.lo.to_array(), self.hi.to_array());
        std::array::from_fn(|k| hi[k] - lo[k])
    }

    /// Uniform draw from the box.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> PolicyParams {
        let (lo, hi) = (self.lo.to_array(), self.hi.to_array());
        PolicyParams::from_array(std::array::from_fn(|k| {
            lo[k] + (hi[k] - lo[k]) * rng.random::<f64>()
        }))
    }
}
