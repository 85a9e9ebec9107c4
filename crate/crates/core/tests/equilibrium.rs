use potential_racing::dynamics::CarState;
use potential_racing::equilibrium::{
    maximize_potential, nash_regret, race, random_candidates, rollout_payoff, value_net_payoff,
    ArgmaxConfig, ControllerKind, Objective, PotentialModel, PotentialObjective, RaceSettings,
};
use potential_racing::game::{rollout, start_state, GameConfig, World};
use potential_racing::learning::{Featurizer, Mlp};
use potential_racing::policy::{PolicyParams, ThetaBox, THETA_DIM};
use potential_racing::Result;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Bowl(Vec<f64>);

impl Objective for Bowl {
    fn value(&self, t: &[f64]) -> Result<f64> {
        Ok(-t
            .iter()
            .zip(&self.0)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>())
    }
    fn gradient(&self, t: &[f64]) -> Result<Vec<f64>> {
        Ok(t.iter().zip(&self.0).map(|(a, b)| -2.0 * (a - b)).collect())
    }
}

struct Ramp(Vec<f64>);

impl Objective for Ramp {
    fn value(&self, t: &[f64]) -> Result<f64> {
        Ok(t.iter().zip(&self.0).map(|(a, b)| a * b).sum())
    }
    fn gradient(&self, _: &[f64]) -> Result<Vec<f64>> {
        Ok(self.0.clone())
    }
}

#[test]
fn quadratic_peak_is_found() {
    let tb = ThetaBox::default();
    let target = [
        PolicyParams {
            q: 2.0,
            zeta: 0.9,
            s1: 1.2,
            s2: 0.2,
            s3: 0.4,
        },
        PolicyParams {
            q: 4.1,
            zeta: 0.7,
            s1: 2.5,
            s2: 0.05,
            s3: 0.8,
        },
    ];
    let flat: Vec<f64> = target.iter().flat_map(|t| t.to_array()).collect();
    let cfg = ArgmaxConfig {
        max_iters: 500,
        ..Default::default()
    };
    let r = maximize_potential(&Bowl(flat.clone()), 2, &tb, &cfg).unwrap();
    let got: Vec<f64> = r.theta.iter().flat_map(|t| t.to_array()).collect();
    for (a, b) in got.iter().zip(&flat) {
        assert!((a - b).abs() < 1e-3, "{a} vs {b}");
    }
}

#[test]
fn corner_warm_start_is_kept() {
    let tb = ThetaBox::default();
    let obj = Ramp(vec![1.0; THETA_DIM]);
    let cfg = ArgmaxConfig {
        warm_start: Some(vec![tb.hi]),
        ..Default::default()
    };
    let r = maximize_potential(&obj, 1, &tb, &cfg).unwrap();
    assert_eq!(r.theta, vec![tb.hi]);
    assert_eq!(r.value, r.warm_value.unwrap());
}

fn random_potential(n_cars: usize, seed: u64) -> (Featurizer, Mlp) {
    let f = Featurizer::new(n_cars, 300.0).unwrap();
    let net = Mlp::new(&[f.dim(), 16, 8, 1], seed).unwrap();
    (f, net)
}

fn some_states(n: usize) -> Vec<CarState> {
    (0..n)
        .map(|k| CarState {
            p_x: 40.0 + 7.0 * k as f64,
            p_y: 1.0 - k as f64,
            v_x: 12.0,
            ..Default::default()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn argmax_stays_feasible_and_beats_warm_start(seed in 0u64..10_000, restarts in 0usize..3) {
        let tb = ThetaBox::default();
        let (f, net) = random_potential(2, seed);
        let states = some_states(2);
        let obj = PotentialObjective::new(&net, &f, &states).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let warm = vec![tb.sample(&mut rng), tb.sample(&mut rng)];
        let cfg = ArgmaxConfig {
            warm_start: Some(warm),
            restarts,
            max_iters: 50,
            seed,
            ..Default::default()
        };
        let r = maximize_potential(&obj, 2, &tb, &cfg).unwrap();
        prop_assert!(r.theta.iter().all(|t| tb.contains(t)));
        prop_assert!(r.value >= r.warm_value.unwrap() - 1e-12);
        let flat: Vec<f64> = r.theta.iter().flat_map(|t| t.to_array()).collect();
        prop_assert_eq!(obj.value(&flat).unwrap(), r.value);
        prop_assert!(r.lambda >= 0.0);
        prop_assert_eq!(maximize_potential(&obj, 2, &tb, &cfg).unwrap(), r);
    }
}

#[test]
fn potential_objective_gradient_matches_differences() {
    let (f, net) = random_potential(3, 5);
    let states = some_states(3);
    let obj = PotentialObjective::new(&net, &f, &states).unwrap();
    let theta: Vec<f64> = (0..3)
        .flat_map(|_| ThetaBox::default().center().to_array())
        .collect();
    let g = obj.gradient(&theta).unwrap();
    assert_eq!(g.len(), 15);
    for k in 0..15 {
        let h = 1e-6;
        let (mut a, mut b) = (theta.clone(), theta.clone());
        a[k] += h;
        b[k] -= h;
        let fd = (obj.value(&a).unwrap() - obj.value(&b).unwrap()) / (2.0 * h);
        assert!(
            (g[k] - fd).abs() <= 1e-4 * fd.abs().max(1e-3),
            "{k}: {} vs {fd}",
            g[k]
        );
    }
}

fn three_car_start(w: &World) -> Vec<CarState> {
    vec![
        start_state(w, 100.0, 0.0).unwrap(),
        start_state(w, 70.0, 2.0).unwrap(),
        start_state(w, 40.0, -2.0).unwrap(),
    ]
}

#[test]
fn fixed_controllers_reduce_to_rollout() {
    let w = World::bundled().unwrap();
    let game = GameConfig::default();
    let start = three_car_start(&w);
    let theta = [
        PolicyParams::default(),
        PolicyParams {
            q: 3.0,
            ..Default::default()
        },
        PolicyParams {
            zeta: 1.05,
            ..Default::default()
        },
    ];
    let kinds: Vec<ControllerKind> = theta.iter().map(|t| ControllerKind::Fixed(*t)).collect();
    let a = race(
        &w,
        &game,
        &kinds,
        None,
        &RaceSettings::default(),
        &start,
        40,
        1,
    )
    .unwrap();
    let b = rollout(&w, &game, &start, &theta, 40).unwrap();
    assert_eq!(a, b);
}

#[test]
fn potential_race_is_deterministic() {
    let w = World::bundled().unwrap();
    let game = GameConfig::default();
    let start = three_car_start(&w);
    let (f, net) = random_potential(3, 8);
    let f = Featurizer {
        track_length: w.track.length(),
        ..f
    };
    let model = PotentialModel {
        net: &net,
        featurizer: &f,
    };
    let kinds = [
        ControllerKind::Potential,
        ControllerKind::Random,
        ControllerKind::Random,
    ];
    let settings = RaceSettings {
        argmax: ArgmaxConfig {
            max_iters: 30,
            ..Default::default()
        },
        ..Default::default()
    };
    let a = race(&w, &game, &kinds, Some(model), &settings, &start, 25, 3).unwrap();
    let b = race(&w, &game, &kinds, Some(model), &settings, &start, 25, 3).unwrap();
    assert_eq!(a, b);
    assert!(a.check().is_ok());
    let c = race(&w, &game, &kinds, Some(model), &settings, &start, 25, 4).unwrap();
    assert_ne!(a.states, c.states);
    // the potential controller needs a model
    assert!(race(&w, &game, &kinds, None, &settings, &start, 5, 3).is_err());
}

#[test]
fn rollout_regret_is_nonnegative_with_own_candidate() {
    let w = World::bundled().unwrap();
    let game = GameConfig::default();
    let start = three_car_start(&w);
    let star = vec![PolicyParams::default(); 3];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut cands = random_candidates(&ThetaBox::default(), 4, &mut rng);
    cands.push(star[1]);
    let payoff = rollout_payoff(&w, &game, &start, &star, 1, 15);
    let r = nash_regret(0, payoff, &star[1], &cands, 10.0).unwrap();
    assert!(r.regret >= -1e-9);
    assert_eq!(r.candidates, 5);
}

#[test]
fn value_net_regret_of_own_parameters_is_zero() {
    let (f, net) = random_potential(2, 1);
    let states = some_states(2);
    let star = vec![PolicyParams::default(); 2];
    let payoff = value_net_payoff(&net, &f, &states, &star, 0).unwrap();
    let r = nash_regret(7, payoff, &star[0], &[star[0]], 1.0).unwrap();
    assert_eq!((r.state_id, r.regret), (7, 0.0));
}
