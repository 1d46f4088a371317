//! Embedding of driving-scenario trajectories and pool-based active
//! learning over the embedded points.

pub mod al;
pub mod autoencoder;
pub mod classifiers;
pub mod dtw;
pub mod embedding;
pub mod error;
pub mod experiments;
pub mod generator;
pub mod io;
pub mod metrics;
pub mod params;
pub mod partition;
pub mod trajectory;
pub mod tsne;

pub use error::{Error, Result};
