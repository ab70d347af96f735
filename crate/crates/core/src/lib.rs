//! Distributed stochastic approximation over a gossip network: simulation,
//! reference ODE, and numerical checks of tracking and trapping bounds.

// Negated comparisons below are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod config;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod gossip;
pub mod hnorm;
pub mod ode;
pub mod problem;
pub mod schedule;

pub use error::{Error, Result};
