//! Command line entry points: raceline, dataset generation, training, races
//! and equilibrium evaluation.
//!
//! Exit codes: 0 success, 2 invalid input, 3 runtime failure.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use potential_racing::equilibrium::{
    write_regret_csv, ControllerKind, PotentialModel, RaceSummary,
};
use potential_racing::experiment::{
    evaluate_regret, featurizer, fit_potential, race_states, require_file, run_races,
    ExperimentConfig,
};
use potential_racing::game::{generate_dataset, Dataset};
use potential_racing::learning::{
    approximation_gap, build_potential_samples, train_value, Mlp, PotentialSample,
};
use potential_racing::meta::ArtifactMeta;
use potential_racing::policy::PolicyParams;
use potential_racing::track::{
    compute_raceline, velocity_profile, ProfileLibrary, Track, VelocityProfileConfig,
};
use potential_racing::{Error, Result};

#[derive(Parser)]
#[command(
    name = "racing",
    version,
    about = "Multi-car racing with learned potential games"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Minimum-curvature raceline and velocity profiles for a track.
    Raceline {
        /// `x,y,w` centerline CSV.
        #[arg(long)]
        track: PathBuf,
        #[arg(long)]
        closed: bool,
        #[arg(long)]
        out: PathBuf,
        /// Experiment config supplying the profile settings and friction.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Simulates races with random parameters and starts.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        races: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trains a value net for one car or the potential.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        target: Target,
        /// Car index for value training.
        #[arg(long)]
        car: Option<usize>,
        /// Seed of the potential training samples.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory holding the models (written and read).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Runs a series of races between controllers.
    Race {
        #[arg(long)]
        config: PathBuf,
        /// potential, ibr, random or fixed:PARAMS.json
        #[arg(long)]
        ego: String,
        #[arg(long)]
        opp1: String,
        #[arg(long)]
        opp2: Option<String>,
        #[arg(long, default_value_t = 1)]
        n: usize,
        /// Ego start region by name; alternates over all regions if absent.
        #[arg(long)]
        region: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory with the trained potential.
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Approximation gap or Nash regret of the trained potential.
    Evaluate {
        #[arg(long, value_enum)]
        what: Metric,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Value,
    Potential,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Gap,
    Regret,
}

/// Training summary stored next to the potential; evaluation rebuilds the
/// held-out samples from it.
#[derive(Serialize, Deserialize)]
struct PotentialSummary {
    meta: ArtifactMeta,
    sample_seed: u64,
    samples: usize,
    held_out: Vec<usize>,
    alpha_hat: f64,
    alpha_rel: f64,
    train_loss: f64,
    value_range: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Raceline {
            track,
            closed,
            out,
            config,
        } => cmd_raceline(&track, closed, &out, config.as_deref()),
        Command::Generate {
            config,
            races,
            seed,
            out,
        } => cmd_generate(&config, races, seed, out),
        Command::Train {
            config,
            dataset,
            target,
            car,
            seed,
            out,
        } => cmd_train(&config, &dataset, target, car, seed, out),
        Command::Race {
            config,
            ego,
            opp1,
            opp2,
            n,
            region,
            seed,
            models,
            out,
        } => {
            let mut kinds = vec![ego, opp1];
            kinds.extend(opp2);
            cmd_race(&config, &kinds, n, region.as_deref(), seed, models, out)
        }
        Command::Evaluate {
            what,
            config,
            dataset,
            models,
            seed,
            out,
        } => cmd_evaluate(what, &config, &dataset, models, seed, out),
    }
}

fn out_dir(cfg: &ExperimentConfig, out: Option<PathBuf>) -> Result<PathBuf> {
    let dir = out.unwrap_or_else(|| cfg.output_dir.clone());
    std::fs::create_dir_all(&dir)
        .map_err(|e| Error::InvalidConfig(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// A CSV file whose first line is a `#` comment with the provenance.
fn csv_with_meta(path: &Path, meta: &ArtifactMeta) -> Result<BufWriter<File>> {
    let mut w = create(path)?;
    writeln!(w, "# {}", meta.comment())?;
    Ok(w)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(std::io::BufReader::new(
        require_file(path)?,
    ))?)
}

fn load_model(path: &Path) -> Result<Mlp> {
    require_file(path)?;
    Mlp::load(path)
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    require_file(path)?;
    Dataset::load(path)
}

fn value_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("value_{i}.json"))
}

fn cmd_raceline(track: &Path, closed: bool, out: &Path, config: Option<&Path>) -> Result<()> {
    require_file(track)?;
    let (profile, mu, hash) = match config {
        Some(c) => {
            let cfg = ExperimentConfig::load(c)?;
            (cfg.profile, cfg.mu, cfg.hash()?)
        }
        None => (
            VelocityProfileConfig::default(),
            0.8,
            potential_racing::meta::config_hash(&(VelocityProfileConfig::default(), 0.8))?,
        ),
    };
    let t = Track::load_csv(track, closed)?;
    let mut line = compute_raceline(&t, profile.w_veh)?;
    line.apply_profile(&velocity_profile(&line, &profile, mu)?)?;
    let library = ProfileLibrary::build(&line, &profile)?;
    std::fs::create_dir_all(out)?;
    let meta = ArtifactMeta::new(hash, 0);
    let mut w = csv_with_meta(&out.join("raceline.csv"), &meta)?;
    line.write_csv(&mut w)?;
    w.flush()?;
    write_json(
        &out.join("profiles.json"),
        &json!({ "meta": meta, "library": library }),
    )?;
    println!(
        "raceline: lap time {:.2} s, {} samples",
        line.lap_time(),
        line.points().len()
    );
    Ok(())
}

fn cmd_generate(
    config: &Path,
    races: usize,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let seed = seed.unwrap_or(cfg.seed);
    let world = cfg.world()?;
    let dir = out_dir(&cfg, out)?;
    let d = generate_dataset(&world, &cfg.game, races, seed)?;
    d.save(&dir.join("dataset.jsonl"))?;
    println!(
        "generated {races} races, return range {:.3}",
        d.return_range()
    );
    Ok(())
}

fn cmd_train(
    config: &Path,
    dataset: &Path,
    target: Target,
    car: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let dir = out_dir(&cfg, out)?;
    let d = load_dataset(dataset)?;
    let world = cfg.world()?;
    let f = featurizer(&world, &d.meta.game)?;
    let hash = cfg.hash()?;
    match target {
        Target::Value => {
            let i = car.ok_or_else(|| {
                Error::InvalidConfig("--car is required for value training".into())
            })?;
            if i >= f.n_cars {
                return Err(Error::InvalidConfig(format!("car {i} out of range")));
            }
            let fit = train_value(
                &d,
                &f,
                i,
                &cfg.value.hidden,
                &cfg.value.train,
                cfg.value.target,
            )?;
            let meta = ArtifactMeta::new(hash, cfg.value.train.seed);
            fit.net.save_with_meta(&value_path(&dir, i), Some(&meta))?;
            let mut w = csv_with_meta(&dir.join(format!("value_{i}_metrics.csv")), &meta)?;
            write_metrics(
                &mut w,
                &[
                    ("train_loss", fit.train_loss),
                    ("val_loss", fit.val_loss),
                    ("val_r2", fit.val_r2),
                ],
                &fit.history,
            )?;
            println!(
                "value {i}: train {:.4} val {:.4} r2 {:.3}",
                fit.train_loss, fit.val_loss, fit.val_r2
            );
        }
        Target::Potential => {
            let values = (0..f.n_cars)
                .map(|i| {
                    let p = value_path(&dir, i);
                    if !p.exists() {
                        return Err(Error::InvalidConfig(format!(
                            "value model {} is missing; train the value nets first",
                            p.display()
                        )));
                    }
                    Mlp::load(&p)
                })
                .collect::<Result<Vec<_>>>()?;
            let seed = seed.unwrap_or(cfg.seed);
            let (samples, fit) = fit_potential(
                &d,
                &f,
                &values,
                &cfg.potential,
                &d.meta.game.theta_box,
                seed,
            )?;
            let range = d.return_range();
            let meta = ArtifactMeta::new(hash, seed);
            fit.net
                .save_with_meta(&dir.join("potential.json"), Some(&meta))?;
            let alpha_rel = fit.alpha_hat / range;
            let mut w = csv_with_meta(&dir.join("potential_metrics.csv"), &meta)?;
            write_metrics(
                &mut w,
                &[
                    ("train_loss", fit.train_loss),
                    ("alpha_hat", fit.alpha_hat),
                    ("alpha_rel", alpha_rel),
                ],
                &fit.history,
            )?;
            write_json(
                &dir.join("potential_summary.json"),
                &PotentialSummary {
                    meta,
                    sample_seed: seed,
                    samples: samples.len(),
                    held_out: fit.held_out,
                    alpha_hat: fit.alpha_hat,
                    alpha_rel,
                    train_loss: fit.train_loss,
                    value_range: range,
                },
            )?;
            println!(
                "potential: alpha_hat {:.4} ({:.2}% of range)",
                fit.alpha_hat,
                100.0 * alpha_rel
            );
        }
    }
    Ok(())
}

/// `metric,value` rows, then one `epoch_loss` row per epoch.
fn write_metrics<W: Write>(w: &mut W, scalars: &[(&str, f64)], history: &[f64]) -> Result<()> {
    let mut c = csv::Writer::from_writer(w);
    c.write_record(["metric", "value"])?;
    for (k, v) in scalars {
        c.write_record([k.to_string(), v.to_string()])?;
    }
    for (e, l) in history.iter().enumerate() {
        c.write_record([format!("epoch_loss_{e}"), l.to_string()])?;
    }
    c.flush()?;
    Ok(())
}

fn parse_controller(s: &str) -> Result<ControllerKind> {
    match s {
        "potential" => Ok(ControllerKind::Potential),
        "ibr" => Ok(ControllerKind::Ibr),
        "random" => Ok(ControllerKind::Random),
        _ => match s.strip_prefix("fixed:") {
            Some(p) => {
                let theta: PolicyParams = read_json(Path::new(p))?;
                theta.validate()?;
                Ok(ControllerKind::Fixed(theta))
            }
            None => Err(Error::InvalidConfig(format!(
                "unknown controller `{s}` (expected potential, ibr, random or fixed:FILE)"
            ))),
        },
    }
}

fn cmd_race(
    config: &Path,
    kinds: &[String],
    n: usize,
    region: Option<&str>,
    seed: Option<u64>,
    models: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let seed = seed.unwrap_or(cfg.seed);
    let controllers = kinds
        .iter()
        .map(|k| parse_controller(k))
        .collect::<Result<Vec<_>>>()?;
    if controllers.len() != cfg.game.n_cars {
        return Err(Error::InvalidConfig(format!(
            "{} controllers given for {} cars",
            controllers.len(),
            cfg.game.n_cars
        )));
    }
    let region = region.map(|r| cfg.game.region_index(r)).transpose()?;
    let dir = out_dir(&cfg, out)?;
    let world = cfg.world()?;
    let f = featurizer(&world, &cfg.game)?;
    let net = if controllers.contains(&ControllerKind::Potential) {
        let m = models.unwrap_or_else(|| dir.clone());
        Some(load_model(&m.join("potential.json"))?)
    } else {
        None
    };
    let model = net.as_ref().map(|net| PotentialModel {
        net,
        featurizer: &f,
    });
    let records = run_races(
        &world,
        &cfg.game,
        &controllers,
        model,
        &cfg.race,
        n,
        region,
        seed,
    )?;

    let meta = ArtifactMeta::new(cfg.hash()?, seed);
    let n_regions = cfg.game.start_regions.len();
    let mut wins = vec![0usize; controllers.len()];
    let mut races = Vec::new();
    for r in &records {
        wins[r.winner] += 1;
        let ego_region = region.unwrap_or(r.race_id as usize % n_regions);
        races.push(json!({
            "race_id": r.race_id,
            "ego_region": cfg.game.start_regions[ego_region].name,
            "theta": r.theta,
            "summary": RaceSummary::new(r, &world),
        }));
    }
    write_json(
        &dir.join("results.json"),
        &json!({
            "meta": meta,
            "controllers": kinds,
            "n": n,
            "wins": wins,
            "ego_win_fraction": if n > 0 { wins[0] as f64 / n as f64 } else { 0.0 },
            "races": races,
        }),
    )?;
    let mut w = csv_with_meta(&dir.join("trajectories.csv"), &meta)?;
    {
        let mut c = csv::Writer::from_writer(&mut w);
        c.write_record([
            "race", "t", "car", "p_x", "p_y", "phi", "v_x", "v_y", "omega",
        ])?;
        for r in &records {
            for (t, x) in r.states.iter().enumerate() {
                for (car, s) in x.iter().enumerate() {
                    let mut row = vec![r.race_id.to_string(), t.to_string(), car.to_string()];
                    row.extend(s.to_array().iter().map(|v| v.to_string()));
                    c.write_record(&row)?;
                }
            }
        }
        c.flush()?;
    }
    w.flush()?;
    let svg = potential_racing::plot::track_svg(
        &world,
        &records[..records.len().min(1)],
        &meta.comment(),
    )?;
    std::fs::write(dir.join("track.svg"), svg)?;
    println!("wins per car over {n} races: {wins:?}");
    Ok(())
}

fn cmd_evaluate(
    what: Metric,
    config: &Path,
    dataset: &Path,
    models: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let dir = out_dir(&cfg, out)?;
    let models = models.unwrap_or_else(|| dir.clone());
    let phi = load_model(&models.join("potential.json"))?;
    let d = load_dataset(dataset)?;
    let world = cfg.world()?;
    let f = featurizer(&world, &d.meta.game)?;
    let range = d.return_range();
    let hash = cfg.hash()?;
    match what {
        Metric::Gap => {
            let summary: PotentialSummary = read_json(&models.join("potential_summary.json"))?;
            let values = (0..f.n_cars)
                .map(|i| load_model(&value_path(&models, i)))
                .collect::<Result<Vec<_>>>()?;
            let samples = build_potential_samples(
                &d,
                &f,
                &values,
                &d.meta.game.theta_box,
                summary.samples,
                summary.sample_seed,
            )?;
            let held: Vec<PotentialSample> = summary
                .held_out
                .iter()
                .map(|&k| {
                    samples.get(k).cloned().ok_or_else(|| {
                        Error::InvalidData(format!("held-out index {k} out of range"))
                    })
                })
                .collect::<Result<_>>()?;
            let rep = approximation_gap(&phi, &held, &f, range)?;
            let meta = ArtifactMeta::new(hash, summary.sample_seed);
            let mut w = csv_with_meta(&dir.join("gap.csv"), &meta)?;
            rep.write_csv(&mut w)?;
            w.flush()?;
            write_json(
                &dir.join("gap_summary.json"),
                &json!({
                    "meta": meta,
                    "samples": rep.gaps.len(),
                    "median": rep.median,
                    "max": rep.max,
                    "mean": rep.mean,
                    "range": rep.range,
                }),
            )?;
            println!("gap: median {:.4} max {:.4}", rep.median, rep.max);
        }
        Metric::Regret => {
            let seed = seed.unwrap_or(cfg.seed);
            let model = PotentialModel {
                net: &phi,
                featurizer: &f,
            };
            let states = race_states(
                &world,
                &cfg.game,
                model,
                &cfg.race,
                cfg.evaluate.regret_states,
                seed,
            )?;
            let reps = evaluate_regret(
                &world,
                &cfg.game,
                model,
                &states,
                range,
                &cfg.evaluate,
                &cfg.game.theta_box,
                seed,
            )?;
            let meta = ArtifactMeta::new(hash, seed);
            let mut w = csv_with_meta(&dir.join("regret.csv"), &meta)?;
            write_regret_csv(&reps, &mut w)?;
            w.flush()?;
            let rel: Vec<f64> = reps.iter().map(|r| r.regret_rel).collect();
            let max = rel.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mean = rel.iter().sum::<f64>() / rel.len() as f64;
            write_json(
                &dir.join("regret_summary.json"),
                &json!({
                    "meta": meta,
                    "states": reps.len(),
                    "candidates": cfg.evaluate.regret_candidates + 1,
                    "horizon": cfg.evaluate.rollout_horizon,
                    "range": range,
                    "max_rel": max,
                    "mean_rel": mean,
                }),
            )?;
            println!("regret: max {:.4} mean {:.4} of the value range", max, mean);
        }
    }
    Ok(())
}
