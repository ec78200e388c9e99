//! Toolkit for studying how unstructured weight pruning reshapes
//! sparse-autoencoder feature dictionaries.
//!
//! The pipeline is: capture residual-stream activations ([`toymodel`] or
//! imported [`tensorio`] files), prune weight sets ([`pruning`]), train TopK
//! SAEs ([`sae`]), compare dictionaries ([`matching`]), relate survival to
//! firing rate ([`fragility`]) and measure causal relevance by single-feature
//! ablation ([`toymodel::ablation_kl`]). [`synthgen`] provides a ground-truth
//! sparse dictionary for verifying training and matching.
//!
//! Data-parallel inner loops run through [`exec::Exec`]; with the default
//! `parallel` feature they use rayon, otherwise they run sequentially. Both
//! paths produce identical results.

pub mod error;
pub mod exec;
pub mod fragility;
pub mod matching;
pub mod pruning;
pub mod sae;
pub mod synthgen;
pub mod tensorio;
pub mod toymodel;

pub use error::{Error, Result};
pub use exec::Exec;
