//! Binary segmentation with cross-entropy / soft Dice loss combinations.
//!
//! The crate bundles everything needed to compare the five loss strategies
//! end to end: a small reverse-mode differentiation engine ([`tensor`]), the
//! losses ([`losses`]) and their epoch schedules ([`schedule`]), a cascaded
//! encoder-decoder network ([`segnet`]), a synthetic lesion dataset
//! ([`data`]), training ([`train`]), out-of-distribution aware evaluation
//! with ensembling and flip test-time augmentation ([`eval`]), and the
//! experiment driver used by the command-line tool ([`experiment`]).

pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod mask;
pub mod schedule;
pub mod segnet;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
