//! Projection-free optimization over nuclear-norm balls: Frank-Wolfe and its
//! stochastic, distributed, asynchronous, and variance-reduced variants, with
//! a deterministic staleness simulator and a threaded live executor.

pub mod algorithms;
pub mod error;
pub mod executor;
pub mod harness;
pub mod linalg;
pub mod objectives;
pub mod schedules;
pub mod simulator;
