//! Simulation of continual model refinement: a deployed classifier meets a
//! non-stationary stream of queries, is corrected online on the queries it
//! gets wrong, and is scored on how well it fixes errors without forgetting.
//!
//! The pieces, bottom-up:
//! - [`cluster_store`]: Gaussian-mixture data pools, one upstream and several
//!   shifted out-of-distribution clusters.
//! - [`stream`]: query streams mixing those pools with decaying upstream
//!   share and a Markov-switching major cluster.
//! - [`learner`]: the refinable classifier and its optimizer.
//! - [`memory`]: upstream and online replay memories with random, max-loss
//!   and maximally-interfered selection.
//! - [`refiners`]: the online refinement methods and offline/frozen references.
//! - [`metrics`]: per-step retention and error-fixing metrics and aggregates.
//! - [`harness`]: the episode loop, run files, sweeps and stream-dynamics grids.

pub mod cluster_store;
pub mod error;
pub mod harness;
mod jsonl;
pub mod learner;
pub mod memory;
pub mod metrics;
pub mod refiners;
pub mod rng;
pub mod stream;

pub use error::{Error, Result};
