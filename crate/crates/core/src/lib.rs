//! Recovering the page order of shuffled documents from page embeddings.
//!
//! The crate bundles a small autodiff engine ([`numcore`]), a seeded
//! synthetic corpus ([`corpus`]), ordering metrics ([`metrics`]), zero-parameter
//! baselines ([`heuristics`]), five neural orderers ([`models`]), training
//! strategies ([`training`]) and the experiment harness ([`bench`]).

pub mod bench;
pub mod corpus;
pub mod heuristics;
pub mod metrics;
pub mod models;
pub mod numcore;
pub mod training;
pub mod util;
