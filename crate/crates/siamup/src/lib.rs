//! An updatable Siamese visual tracker.
//!
//! The tracker matches small template features of the target object against
//! a search region around its previous location. On top of that baseline it
//! carries an update path: confident tracking results are buffered and
//! periodically fused into the active template through a residual fusion
//! network, so the template follows appearance changes without ever losing
//! the initial exemplar.
//!
//! Everything runs on a small self-contained f64 tensor substrate in
//! [`nn`], which keeps training, inference and finite-difference gradient
//! verification on one code path.

pub mod backbone;
pub mod data;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradsuite;
pub mod geometry;
pub mod img;
pub mod loss;
pub mod model;
pub mod nn;
pub mod plot;
pub mod rpn;
pub mod tracker;
pub mod trainer;

pub use error::{Error, Result};
