//! Experiment configuration and the pipeline steps shared by the command
//! line tool and the test suites: value and potential training, seeded race
//! series and equilibrium evaluation.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{CarState, VehicleParams};
use crate::equilibrium::{
    maximize_potential, nash_regret, race, random_candidates, region_assignment, rollout_payoff,
    ArgmaxConfig, ControllerKind, PotentialModel, PotentialObjective, RaceSettings, RegretReport,
};
use crate::error::{Error, Result};
use crate::game::{sample_starts, Dataset, GameConfig, RaceRecord, World};
use crate::learning::{
    build_potential_samples, train_potential, train_value, Featurizer, PotentialFit,
    PotentialSample, TrainConfig, ValueFit, ValueTarget,
};
use crate::policy::MpcConfig;
use crate::track::{Track, VelocityProfileConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValueStage {
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    pub target: ValueTarget,
}

impl Default for ValueStage {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            train: TrainConfig {
                learning_rate: 1e-3,
                epochs: 60,
                seed: 1,
                stride: 2,
                final_lr_fraction: 0.01,
                early_stopping: true,
                ..Default::default()
            },
            target: ValueTarget::ReturnToGo,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PotentialStage {
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    /// Number of deviation samples drawn from the value nets.
    pub samples: usize,
}

impl Default for PotentialStage {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            train: TrainConfig {
                learning_rate: 1e-3,
                epochs: 40,
                seed: 3,
                final_lr_fraction: 0.01,
                ..Default::default()
            },
            samples: 50_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    /// States at which the regret is measured.
    pub regret_states: usize,
    /// Random deviations tried per state (the computed parameters are
    /// always tried as well).
    pub regret_candidates: usize,
    /// Steps of each scoring rollout.
    pub rollout_horizon: usize,
    /// Potential maximization at each regret state.
    pub argmax: ArgmaxConfig,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            regret_states: 20,
            regret_candidates: 50,
            rollout_horizon: 50,
            argmax: ArgmaxConfig {
                restarts: 4,
                ..Default::default()
            },
        }
    }
}

/// Everything a run needs. Relative track and vehicle paths are resolved
/// against the directory of the config file, the output directory against
/// the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `x,y,w` centerline CSV.
    pub track: PathBuf,
    pub closed: bool,
    /// Vehicle parameter JSON.
    pub vehicle: PathBuf,
    /// Friction level of the raceline speed profile.
    pub mu: f64,
    pub mpc: MpcConfig,
    pub profile: VelocityProfileConfig,
    pub game: GameConfig,
    pub value: ValueStage,
    pub potential: PotentialStage,
    pub race: RaceSettings,
    pub evaluate: EvaluateConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            track: "track.csv".into(),
            closed: true,
            vehicle: "vehicle.json".into(),
            mu: 0.8,
            mpc: MpcConfig::default(),
            profile: VelocityProfileConfig::default(),
            game: GameConfig::default(),
            value: ValueStage::default(),
            potential: PotentialStage::default(),
            race: RaceSettings::default(),
            evaluate: EvaluateConfig::default(),
            output_dir: "out".into(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Reads a config, resolves its paths and checks it.
    pub fn load(path: &Path) -> Result<Self> {
        let file = require_file(path)?;
        let mut cfg: Self = serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.track, &mut cfg.vehicle] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        require_file(&self.track)?;
        require_file(&self.vehicle)?;
        self.game.validate()?;
        self.value.train.validate()?;
        self.potential.train.validate()?;
        if self.potential.samples == 0 {
            return Err(Error::InvalidConfig(
                "potential.samples must be at least 1".into(),
            ));
        }
        if self.evaluate.regret_states == 0 || self.evaluate.rollout_horizon == 0 {
            return Err(Error::InvalidConfig(
                "regret states and rollout horizon must be at least 1".into(),
            ));
        }
        if self.race.theta_box != self.game.theta_box {
            return Err(Error::InvalidConfig(
                "race.theta_box must equal game.theta_box".into(),
            ));
        }
        self.game.theta_box.validate()
    }

    /// Builds the world from the track and vehicle files.
    pub fn world(&self) -> Result<World> {
        let track = Track::load_csv(&self.track, self.closed)?;
        let vp = VehicleParams::load(&self.vehicle)?;
        let world = World::new(track, vp, self.mpc, self.profile, self.mu)?;
        self.game.validate_for(&world)?;
        Ok(world)
    }

    /// Hash of the config, with file paths reduced to their file names so
    /// that the hash does not depend on where the run happens.
    pub fn hash(&self) -> Result<String> {
        let name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned());
        let c = Self {
            track: name(&self.track).unwrap_or_default().into(),
            vehicle: name(&self.vehicle).unwrap_or_default().into(),
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        crate::meta::config_hash(&c)
    }
}

/// Opens a file that must exist, reporting a missing one as a validation
/// error.
pub fn require_file(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path)
        .map_err(|e| Error::InvalidConfig(format!("cannot open {}: {e}", path.display())))
}

pub fn featurizer(world: &World, game: &GameConfig) -> Result<Featurizer> {
    Featurizer::new(game.n_cars, world.track.length())
}

/// One value net per car.
pub fn train_values(
    dataset: &Dataset,
    featurizer: &Featurizer,
    stage: &ValueStage,
) -> Result<Vec<ValueFit>> {
    (0..featurizer.n_cars)
        .map(|i| {
            train_value(
                dataset,
                featurizer,
                i,
                &stage.hidden,
                &stage.train,
                stage.target,
            )
        })
        .collect()
}

/// Draws deviation samples from the value nets and fits the potential.
pub fn fit_potential(
    dataset: &Dataset,
    featurizer: &Featurizer,
    values: &[crate::learning::Mlp],
    stage: &PotentialStage,
    theta_box: &crate::policy::ThetaBox,
    seed: u64,
) -> Result<(Vec<PotentialSample>, PotentialFit)> {
    let samples =
        build_potential_samples(dataset, featurizer, values, theta_box, stage.samples, seed)?;
    let fit = train_potential(&samples, featurizer, &stage.hidden, &stage.train)?;
    Ok((samples, fit))
}

/// Runs `n` races. Race `k` starts its ego (car 0) in `region`, or in
/// region `k mod regions` when none is given; the other cars fill the
/// remaining regions in order.
#[allow(clippy::too_many_arguments)]
pub fn run_races(
    world: &World,
    game: &GameConfig,
    controllers: &[ControllerKind],
    model: Option<PotentialModel>,
    settings: &RaceSettings,
    n: usize,
    region: Option<usize>,
    seed: u64,
) -> Result<Vec<RaceRecord>> {
    let n_regions = game.start_regions.len();
    if controllers.len() > n_regions {
        return Err(Error::InvalidConfig(format!(
            "{} cars need at least as many start regions, found {n_regions}",
            controllers.len()
        )));
    }
    (0..n as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k);
            let ego = region.unwrap_or(k as usize % n_regions);
            let mut regions = region_assignment(ego, n_regions)?;
            regions.truncate(controllers.len());
            let start = sample_starts(world, game, &regions, &mut rng)?;
            let race_seed = rand::Rng::random(&mut rng);
            let mut rec = race(
                world,
                game,
                controllers,
                model,
                settings,
                &start,
                game.steps,
                race_seed,
            )?;
            rec.race_id = k;
            rec.seed = seed;
            Ok(rec)
        })
        .collect()
}

/// `n` evenly spaced states of one race in which car 0 plays the potential
/// controller against random opponents.
pub fn race_states(
    world: &World,
    game: &GameConfig,
    model: PotentialModel,
    settings: &RaceSettings,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<CarState>>> {
    let mut kinds = vec![ControllerKind::Random; game.n_cars];
    kinds[0] = ControllerKind::Potential;
    let rec = run_races(world, game, &kinds, Some(model), settings, 1, Some(0), seed)?.remove(0);
    Ok((0..n)
        .map(|k| rec.states[k * game.steps / n].clone())
        .collect())
}

/// Regret of car 0 at each state against the potential maximizer there,
/// scored by truncated rollouts and normalized by `range`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_regret(
    world: &World,
    game: &GameConfig,
    model: PotentialModel,
    states: &[Vec<CarState>],
    range: f64,
    cfg: &EvaluateConfig,
    theta_box: &crate::policy::ThetaBox,
    seed: u64,
) -> Result<Vec<RegretReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    states
        .iter()
        .enumerate()
        .map(|(id, x)| {
            let obj = PotentialObjective::new(model.net, model.featurizer, x)?;
            let am = ArgmaxConfig {
                seed: seed ^ id as u64,
                ..cfg.argmax.clone()
            };
            let star = maximize_potential(&obj, x.len(), theta_box, &am)?.theta;
            let mut cands = random_candidates(theta_box, cfg.regret_candidates, &mut rng);
            cands.push(star[0]);
            let payoff = rollout_payoff(world, game, x, &star, 0, cfg.rollout_horizon);
            nash_regret(id, payoff, &star[0], &cands, range)
        })
        .collect()
}
