//! Holdout-loss data valuation with the in-context approximation score, its
//! baselines, and score-reweighted fine-tuning of a tiny transformer.

pub mod cli;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod model;
pub mod reweight;
pub mod score;
pub mod train;

pub use error::{Error, Result};
