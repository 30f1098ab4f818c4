//! Audit toolkit for stigmatizing language (SL) in clinical notes: a
//! from-scratch Transformer classifier, perturbation-based explanations,
//! group fairness metrics, and clinician-network-guided SL removal.

pub mod carenet;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod explain;
pub mod fairmetrics;
pub mod lexicon;
pub mod synthgen;
pub mod tinyformer;

pub use error::{Error, Result};
