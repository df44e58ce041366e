//! Randomized k-server simulation over dynamic embeddings into a universal hierarchically
//! separated tree (HST) with cluster fusion and fission.
//!
//! The crate is organized bottom-up:
//! - [`metric`]: finite metrics, balls, point measures.
//! - [`transport`]: exact and tree Wasserstein-1 distances.
//! - [`hst`]: the arena-backed universal HST, fusion maps and pushforwards.
//! - [`partition`]: ball carving, r-fusion of semi-partitions and the induced embedding.
//! - [`embedder`]: the online state machine producing embeddings and fusion maps per request.
//! - [`solver`]: a fractional k-server solver on the tree with its potential function.
//! - [`rounding`]: online rounding of the fractional solution to integral servers.
//! - [`instrumentation`]: per-step potentials and isolation statistics.
//! - [`harness`]: offline optimum, adversaries and the end-to-end experiment driver.

pub mod error;
pub mod metric;
pub mod transport;
pub mod hst;
pub mod partition;
pub mod embedder;
pub mod solver;
pub mod rounding;
pub mod instrumentation;
pub mod harness;

pub use error::{Error, Result};
