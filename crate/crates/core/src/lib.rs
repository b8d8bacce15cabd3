//! In-context preference personalization on a synthetic contextual bandit.
//!
//! A single causal transformer is trained with a per-turn DPO loss on
//! group-stratified preference histories, then adapts online to a new user
//! from the preferences it observes. A weight-interpolation ensemble of
//! per-group models ("personalized soups") serves as the baseline.

pub mod config;
pub mod datagen;
pub mod dpo;
pub mod env;
pub mod error;
pub mod eval;
pub mod model;
pub mod numcore;
pub mod selftest;
pub mod soups;

pub use error::{Error, Result};
