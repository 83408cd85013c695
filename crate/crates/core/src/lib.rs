//! Desk-scale laboratory for robust discrete image tokenizers.
//!
//! The pipeline: a vector-quantized patch tokenizer trained with latent
//! perturbation ([`perturbation`]), evaluated with Fréchet distances on clean
//! and perturbed reconstructions ([`metrics`]), a toy autoregressive generator
//! over token grids ([`generator`]), and decoder post-training on partially
//! teacher-forced generations ([`posttrain`]). [`harness`] wires these into
//! datasets, config files, checkpoints, reports and recipes.

pub mod codebook;
pub mod error;
pub mod generator;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod perturbation;
pub mod posttrain;
pub mod rng;
pub mod tokenizer;

pub use error::{Result, RtkError};
