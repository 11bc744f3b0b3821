//! Semi-supervised anomaly detection for dynamic networks.
//!
//! Trains a hierarchical variational graph recurrent autoencoder on normal
//! snapshots, then flags edges and node attributes whose reconstruction
//! probabilities fall below automatically selected thresholds.

pub mod detect;
pub mod error;
pub mod graph;
pub mod harness;
pub mod latent;
pub mod model;
pub mod nn;
pub mod params;
pub mod tape;
pub mod train;

pub use error::{HvgraeError, Result};
