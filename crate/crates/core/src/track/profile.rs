//! Friction-limited velocity profiles along a raceline.

use serde::{Deserialize, Serialize};

use super::RaceLine;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VelocityProfileConfig {
    pub mu_min: f64,
    pub mu_max: f64,
    pub n_profiles: usize,
    pub g: f64,
    pub v_cap: f64,
    pub a_long_max: f64,
    pub w_veh: f64,
}

impl Default for VelocityProfileConfig {
    fn default() -> Self {
        Self {
            mu_min: 0.6,
            mu_max: 1.2,
            n_profiles: 7,
            g: 9.81,
            v_cap: 25.0,
            a_long_max: 8.0,
            w_veh: 2.0,
        }
    }
}

impl VelocityProfileConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.mu_min > 0.0 && self.mu_min <= self.mu_max) {
            return bad("velocity profile needs 0 < mu_min <= mu_max");
        }
        if self.n_profiles == 0 {
            return bad("n_profiles must be at least 1");
        }
        if !(self.v_cap > 0.0) || !(self.a_long_max > 0.0) || !(self.g > 0.0) {
            return bad("v_cap, a_long_max and g must be positive");
        }
        Ok(())
    }

    fn check_mu(&self, mu: f64) -> Result<()> {
        if !(self.mu_min..=self.mu_max).contains(&mu) {
            return Err(Error::FrictionOutOfRange {
                mu,
                min: self.mu_min,
                max: self.mu_max,
            });
        }
        Ok(())
    }
}

/// Speed and longitudinal acceleration per raceline sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocityProfile {
    pub mu: f64,
    pub v: Vec<f64>,
    pub a: Vec<f64>,
}

/// Lateral friction cap followed by forward (acceleration) and backward
/// (braking) passes. Closed tracks wrap and repeat the passes until no speed
/// changes.
pub fn velocity_profile(
    raceline: &RaceLine,
    cfg: &VelocityProfileConfig,
    mu: f64,
) -> Result<VelocityProfile> {
    cfg.validate()?;
    cfg.check_mu(mu)?;
    let pts = raceline.points();
    let closed = raceline.is_closed();
    // Closed racelines carry a closing duplicate; work on distinct samples.
    let n = if closed { pts.len() - 1 } else { pts.len() };
    let ds: Vec<f64> = (0..n)
        .map(|i| {
            if i + 1 < pts.len() {
                pts[i + 1].s - pts[i].s
            } else {
                0.0
            }
        })
        .collect();
    let mut v: Vec<f64> = pts[..n]
        .iter()
        .map(|p| {
            let lat = if p.kappa == 0.0 {
                f64::INFINITY
            } else {
                (mu * cfg.g / p.kappa.abs()).sqrt()
            };
            lat.min(cfg.v_cap)
        })
        .collect();
    let two_a = 2.0 * cfg.a_long_max;

    let sweep = |v: &mut [f64]| -> f64 {
        let mut changed: f64 = 0.0;
        let last = if closed { n } else { n - 1 };
        for i in 0..last {
            let j = (i + 1) % n;
            let lim = (v[i] * v[i] + two_a * ds[i]).sqrt();
            if v[j] > lim {
                changed = changed.max(v[j] - lim);
                v[j] = lim;
            }
        }
        for i in (0..last).rev() {
            let j = (i + 1) % n;
            let lim = (v[j] * v[j] + two_a * ds[i]).sqrt();
            if v[i] > lim {
                changed = changed.max(v[i] - lim);
                v[i] = lim;
            }
        }
        changed
    };
    let mut guard = 0;
    while sweep(&mut v) > 0.0 && closed {
        guard += 1;
        if guard > 10 * n + 10 {
            break;
        }
    }

    let mut a = vec![0.0; n];
    for i in 0..n {
        let j = if closed { (i + 1) % n } else { i + 1 };
        if j < n && ds[i] > 0.0 {
            a[i] = (v[j] * v[j] - v[i] * v[i]) / (2.0 * ds[i]);
        } else if i > 0 {
            a[i] = a[i - 1];
        }
    }
    if closed {
        v.push(v[0]);
        a.push(a[0]);
    }
    Ok(VelocityProfile { mu, v, a })
}

/// Profiles for evenly spaced friction values in `[mu_min, mu_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileLibrary {
    pub cfg: VelocityProfileConfig,
    pub profiles: Vec<VelocityProfile>,
}

impl ProfileLibrary {
    pub fn build(raceline: &RaceLine, cfg: &VelocityProfileConfig) -> Result<Self> {
        cfg.validate()?;
        let profiles = (0..cfg.n_profiles)
            .map(|k| {
                let mu = if cfg.n_profiles == 1 {
                    cfg.mu_min
                } else {
                    cfg.mu_min + (cfg.mu_max - cfg.mu_min) * k as f64 / (cfg.n_profiles - 1) as f64
                };
                velocity_profile(raceline, cfg, mu.min(cfg.mu_max))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: *cfg,
            profiles,
        })
    }

    /// Linear interpolation of speeds between the two neighbouring profiles;
    /// accelerations are interpolated the same way.
    pub fn lookup(&self, mu: f64) -> Result<VelocityProfile> {
        self.cfg.check_mu(mu)?;
        if self.profiles.len() == 1 {
            let mut p = self.profiles[0].clone();
            p.mu = mu;
            return Ok(p);
        }
        let k = self
            .profiles
            .partition_point(|p| p.mu <= mu)
            .saturating_sub(1)
            .min(self.profiles.len() - 2);
        let (lo, hi) = (&self.profiles[k], &self.profiles[k + 1]);
        let t = ((mu - lo.mu) / (hi.mu - lo.mu)).clamp(0.0, 1.0);
        let mix = |a: &[f64], b: &[f64]| -> Vec<f64> {
            a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect()
        };
        Ok(VelocityProfile {
            mu,
            v: mix(&lo.v, &hi.v),
            a: mix(&lo.a, &hi.a),
        })
    }
}
