//! Tract-specific streamline tracking: a reinforcement-learned tracking policy
//! distilled into a return-conditioned decoder-only transformer.
//!
//! Pipeline pieces, bottom-up:
//!
//! - [`field`], [`sh`], [`phantom`]: voxel grids, spherical-harmonic fields,
//!   fODF peaks, and synthetic phantoms with analytic ground truth.
//! - [`env`]: the tracking environment (state assembly, reward, termination).
//! - [`diffcore`], [`nn`]: a small reverse-mode autodiff core and layers.
//! - [`td3`]: the level-1 actor-critic agent.
//! - [`traj`]: return-to-go trajectories and dataset selection.
//! - [`trlf`]: the transformer policy, its training and autoregressive tracking.
//! - [`mrm`]: the per-voxel mask refinement classifier.
//! - [`post`]: streamline cleaning and Dice / overlap / overreach scoring.
//! - [`io`]: binary file formats.
//!
//! Numeric code is generic over [`scalar::Real`]; the aliases below fix the
//! common instantiations.

pub mod diffcore;
pub mod env;
pub mod field;
pub mod io;
pub mod mrm;
pub mod nn;
pub mod phantom;
pub mod post;
pub mod rng;
pub mod scalar;
pub mod sh;
pub mod td3;
pub mod traj;
pub mod trlf;

mod error;

pub use error::{Error, Result};
pub use scalar::Real;

pub type GridSpec = field::GridSpec<f64>;
pub type GridSpec32 = field::GridSpec<f32>;
pub type ShField = field::ShField<f64>;
pub type ShField32 = field::ShField<f32>;
pub type TrackingMask = field::TrackingMask<f64>;
pub type Streamline = field::Streamline<f64>;
pub type Streamline32 = field::Streamline<f32>;
pub type PeakSet = sh::PeakSet<f64>;
pub type ShBasis = sh::ShBasis<f64>;
pub type Phantom = phantom::Phantom<f64>;
pub type Tensor = diffcore::Tensor<f64>;
pub type Tensor32 = diffcore::Tensor<f32>;
pub type Graph = diffcore::Graph<f64>;
pub type ModelParams = diffcore::ModelParams<f64>;
pub type ModelParams32 = diffcore::ModelParams<f32>;
pub type TractScores = post::TractScores;

/// Crate version recorded in artifact metadata.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
