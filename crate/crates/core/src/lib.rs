//! Concurrent randomized least-squares value iteration on tabular MDPs.
//!
//! The crate provides tabular MDPs with exact solvers, state aggregations,
//! the finite-horizon and pseudo-episode (discounted) concurrent learners,
//! exact regret computation, and an experiment harness that sweeps the number
//! of agents.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod error;
pub mod harness;
pub mod mdp;
pub mod regret;
pub mod rlsvi;
pub mod seeding;
pub mod solver;

pub use error::{Error, Result};
