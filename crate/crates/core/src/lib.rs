//! Simulator for federated learning with heterogeneous communication
//! frequencies.
//!
//! The library models a cross-device federated setup in which every active
//! client performs the same number of local gradient updates per round, but
//! clients differ in how often they synchronize with the server. A
//! high-frequency subset (synchronizing after every few updates, in the limit
//! after every update like FedSGD) is chosen each round so that the joint
//! label distribution of the subset stays close to the global label
//! distribution, subject to per-client and server communication budgets. The
//! remaining clients synchronize rarely, like FedAvg.
//!
//! Modules:
//! - [`datastats`]: label distributions, KL divergence, non-IID partitioning,
//!   and synthetic datasets.
//! - [`dynacomm`]: budget-constrained subset selection (ensemble dynamic
//!   program, brute force, genetic and random baselines).
//! - [`comms`]: interval levels, sync schedules, communication budgets and
//!   cost accounting.
//! - [`models`]: small framework-free objectives with analytic gradients and
//!   SGD.
//! - [`engine`]: round orchestration (client sampling, selection, interleaved
//!   local updates with group averaging).
//! - [`theory`]: closed-form three-client quadratic analysis and
//!   simulation-vs-theory comparison.
//! - [`metrics`]: per-round metrics records and CSV rendering.
//!
//! All randomness flows from a single 64-bit master seed through tagged
//! stream derivation (see [`seeding`]), so every run is reproducible
//! bit-for-bit, independent of thread count.

pub mod comms;
pub mod datastats;
pub mod dynacomm;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod models;
pub mod seeding;
pub mod theory;

pub use error::{Error, Result};
