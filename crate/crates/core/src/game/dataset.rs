//! Race datasets stored as JSON Lines: one metadata line, then one race per
//! line.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{returns_to_go, rollout, sample_random_starts, GameConfig, RaceRecord, World};
use crate::dynamics::VehicleParams;
use crate::error::{Error, Result};
use crate::policy::{MpcConfig, PolicyParams};
use crate::track::VelocityProfileConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub schema: u32,
    pub seed: u64,
    pub n_races: usize,
    pub game: GameConfig,
    pub vehicle: VehicleParams,
    pub mpc: MpcConfig,
    pub profile: VelocityProfileConfig,
    pub mu: f64,
    /// Hash of the world (track, vehicle, MPC, profile).
    pub world_hash: String,
    /// Hash of the world hash, game config and seed.
    pub config_hash: String,
    pub git: String,
    /// Bound on the discounted utility beyond the recorded horizon:
    /// `gamma^T * max|u| / (1 - gamma)`.
    pub tail_bound: f64,
    /// Range of discounted returns-to-go over all cars and steps.
    pub return_min: f64,
    pub return_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub races: Vec<RaceRecord>,
}

/// Stream id separating the per-race random streams of one dataset.
fn race_rng(seed: u64, race_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(race_id);
    rng
}

/// Simulates `n_races` races with uniformly drawn policy parameters and
/// random starts. Each race has its own random stream derived from
/// `(seed, race_id)`, so the result does not depend on scheduling.
pub fn generate_dataset(
    world: &World,
    cfg: &GameConfig,
    n_races: usize,
    seed: u64,
) -> Result<Dataset> {
    cfg.validate_for(world)?;
    if n_races == 0 {
        return Err(Error::InvalidConfig("n_races must be at least 1".into()));
    }
    let races = (0..n_races as u64)
        .into_par_iter()
        .map(|id| {
            let mut rng = race_rng(seed, id);
            let theta: Vec<PolicyParams> = (0..cfg.n_cars)
                .map(|_| cfg.theta_box.sample(&mut rng))
                .collect();
            let start = sample_random_starts(world, cfg, &mut rng)?;
            let mut rec = rollout(world, cfg, &start, &theta, cfg.steps)?;
            rec.race_id = id;
            rec.seed = seed;
            Ok(rec)
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = describe(world, cfg, &races, seed)?;
    Ok(Dataset { meta, races })
}

fn describe(
    world: &World,
    cfg: &GameConfig,
    races: &[RaceRecord],
    seed: u64,
) -> Result<DatasetMeta> {
    let world_hash = world.fingerprint()?;
    let config_hash = crate::meta::config_hash(&(&world_hash, cfg, seed))?;
    let mut u_max: f64 = 0.0;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in races {
        for i in 0..r.n_cars() {
            let u = r.utilities_of(i);
            u_max = u.iter().fold(u_max, |m, v| m.max(v.abs()));
            for g in returns_to_go(&u, cfg.gamma) {
                lo = lo.min(g);
                hi = hi.max(g);
            }
        }
    }
    if !lo.is_finite() {
        (lo, hi) = (0.0, 0.0);
    }
    Ok(DatasetMeta {
        schema: SCHEMA_VERSION,
        seed,
        n_races: races.len(),
        game: cfg.clone(),
        vehicle: world.vp.clone(),
        mpc: world.mpc,
        profile: world.profile,
        mu: world.mu,
        world_hash,
        config_hash,
        git: crate::meta::git_describe(),
        tail_bound: cfg.gamma.powi(cfg.steps as i32) * u_max / (1.0 - cfg.gamma),
        return_min: lo,
        return_max: hi,
    })
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    #[serde(flatten)]
    meta: DatasetMeta,
}

impl Dataset {
    pub fn write_jsonl<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = BufWriter::new(writer);
        let header = Header {
            kind: "metadata".into(),
            meta: self.meta.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for r in &self.races {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: Read>(reader: R) -> Result<Self> {
        let mut lines = BufReader::new(reader).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::InvalidData("dataset has no metadata line".into()))??;
        let header: Header = serde_json::from_str(&first)?;
        if header.kind != "metadata" {
            return Err(Error::InvalidData("first line is not metadata".into()));
        }
        if header.meta.schema != SCHEMA_VERSION {
            return Err(Error::InvalidData(format!(
                "unsupported dataset schema {}",
                header.meta.schema
            )));
        }
        let mut races = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: RaceRecord = serde_json::from_str(&line)?;
            r.check()?;
            races.push(r);
        }
        if races.len() != header.meta.n_races {
            return Err(Error::InvalidData(format!(
                "metadata announces {} races, found {}",
                header.meta.n_races,
                races.len()
            )));
        }
        Ok(Self {
            meta: header.meta,
            races,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_jsonl(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_jsonl(std::fs::File::open(path)?)
    }

    /// Value range used to normalize gaps and regrets.
    pub fn return_range(&self) -> f64 {
        self.meta.return_max - self.meta.return_min
    }
}
