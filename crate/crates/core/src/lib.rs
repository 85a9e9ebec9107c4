//! Multi-car racing as an infinite-horizon dynamic game.
//!
//! The crate simulates cars with a dynamic bicycle model on a Frenet track,
//! drives them with parameterized MPC racing policies, learns value and
//! potential functions from simulated races, and computes approximate Nash
//! equilibria online by maximizing the learned potential.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod equilibrium;
pub mod error;
pub mod experiment;
pub mod game;
pub mod learning;
mod linalg;
pub mod meta;
pub mod plot;
pub mod policy;
pub mod track;

pub use error::{Error, Result};
