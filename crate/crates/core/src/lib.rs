//! Cost-model driven planning and simulation of hybrid-parallel training.
//!
//! A model is a chain of components. Each component runs data parallel,
//! model parallel or hybrid across a homogeneous cluster; the planner picks
//! the per-component strategy that minimises predicted step time under the
//! device memory budget, and the simulator replays whole training runs
//! (optionally re-planning when measured costs drift).

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cluster;
pub mod config;
pub mod cost;
pub mod error;
pub mod experiment;
pub mod io;
pub mod planner;
pub mod reftrainer;
pub mod rng;
pub mod sim;
pub mod workload;

pub use error::{Error, Result};
