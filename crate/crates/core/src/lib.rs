//! Multi-annotator bounding-box aggregation and consensus-weighted detector
//! training.
//!
//! The pipeline: several annotators label the same images
//! ([`annotations`]); their boxes are fused into estimated ground truth with a
//! per-box agreement score ([`fusion`]); a small anchor detector
//! ([`detector`]) is trained with a loss that scales every anchor term by that
//! agreement ([`loss`]); detections are scored with mAP ([`evaluation`]).
//! [`simulator`] produces synthetic corpora with controllable annotator noise
//! and [`experiment`] runs the full method comparison.

pub mod annotations;
pub mod cli;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod loss;
pub mod render;
pub mod rng;
pub mod simulator;

pub use error::{Error, Result};
pub use geometry::BBox;
