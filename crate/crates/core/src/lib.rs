//! Toolkit for generating and validating synthetic tabular data at desk
//! scale: toy style-based generators, an evaluation metric battery, latent
//! projection and editing, a federated-averaging simulator and a classifier
//! harness for predictive-performance scenarios.

pub mod classifier;
pub mod dataio;
pub mod error;
pub mod fedsim;
pub mod metrics;
pub mod nn;
pub mod numerics;
pub mod pipeline;
pub mod projector;
pub mod rng;
pub mod sefa;
pub mod toygen;
pub mod viz;

pub use error::{Error, ErrorKind, Result};
