//! Unsupervised adaptation of a single-view gaze estimator to an
//! arbitrarily placed, uncalibrated pair of cameras.
//!
//! The pipeline is: simulate data ([`simdata`]), pre-train the toy estimator
//! on one camera ([`engine::pretrain`]), adapt it to a dual-camera rig using
//! only unlabeled pairs ([`engine::adapt`]), then score it ([`eval`]).

pub mod engine;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod simdata;

mod error;

pub use error::Error;
