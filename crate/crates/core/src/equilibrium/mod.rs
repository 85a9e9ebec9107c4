//! Online equilibrium computation: potential maximization, Nash regret,
//! the approximation certificate, iterated best response and races.

mod argmax;
mod ibr;
mod race;
mod regret;

pub use argmax::{maximize_potential, ArgmaxConfig, ArgmaxResult, Objective, PotentialObjective};
pub use ibr::{ibr, local_grid};
pub use race::{
    race, region_assignment, ControllerKind, PotentialModel, RaceSettings, RaceSummary,
};
pub use regret::{
    certify_prop1, nash_regret, random_candidates, rollout_payoff, value_net_payoff,
    write_regret_csv, Certificate, GridGame, RegretReport,
};
