//! Detection of anomalous connections in dynamic functional brain networks.
//!
//! The pipeline runs from region time series ([`synthcohort`]) through
//! windowed correlation graphs ([`connectome`]), a spatiotemporal graph
//! transformer ([`sgtmodel`]) trained with contrastive and reconstruction
//! objectives ([`contrastive`]), per-connection scoring against a control
//! group ([`detector`]) and evaluation against planted ground truth
//! ([`evaluation`]). [`cli`] orchestrates the stages.
//!
//! Numeric code is generic over [`Scalar`]; the aliases below fix it to `f64`,
//! which every pipeline stage uses.

pub mod cli;
pub mod connectome;
pub mod contrastive;
pub mod detector;
pub mod diffcore;
mod error;
pub mod evaluation;
mod scalar;
pub mod sgtmodel;
pub mod synthcohort;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Tape over 64-bit floats.
pub type Tape = diffcore::Tape<f64>;
pub type ParameterStore = diffcore::ParameterStore<f64>;
pub type DynamicBrainNetwork = connectome::DynamicBrainNetwork<f64>;
pub type BrainGraphSnapshot = connectome::BrainGraphSnapshot<f64>;
