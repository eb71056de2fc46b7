//! Differentiable LiDAR odometry at desk scale.
//!
//! The pipeline: a reverse-mode tape ([`autodiff`]) differentiates through a
//! fixed-unroll, softly damped Levenberg-Marquardt scan aligner
//! ([`registration`]). Chaining pairwise alignments gives odometry
//! trajectories ([`trajectory`]); the squared waypoint error between the
//! trajectory of predicted scans and the trajectory of reference scans is a
//! self-supervised training signal ([`losses`]) for small point-cloud models
//! ([`tasks`]). Synthetic labeled sequences come from [`synthworld`].
//!
//! Core math is generic over the scalar type via [`scalar::Scalar`]; the
//! pipeline itself runs in double precision through the aliases below.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod nn;
pub mod registration;
pub mod scalar;
pub mod scan;
pub mod synthworld;
pub mod tasks;
pub mod trajectory;

pub use error::{Error, Result};


/// Double-precision aliases used by the whole pipeline.
pub type Tape = autodiff::Tape<f64>;
pub type Value = autodiff::Value<f64>;
pub type Var<'t> = autodiff::Var<'t, f64>;
// aliases filled in as modules land
