//! A desk-scale laboratory for LLM unlearning on a tiny deterministic language
//! model: representation-misdirection and preference-optimization objectives,
//! random noise augmentation of the retain targets, synthetic corpora and
//! multiple-choice tasks, Monte Carlo validators for the underlying
//! probabilistic claims, and evaluation metrics with sweep tooling.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod methods;
pub mod nn;
pub mod profile;
pub mod rng;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
pub use methods::{Method, UnlearnConfig};
pub use nn::{Tensor, TinyLM};
