//! Pedestrian-sensitive proposal labeling.
//!
//! Proposals are labeled by IoU against ground truth; negatives that a small
//! frozen patch classifier still recognises as pedestrians are dropped from
//! training instead of being used as background. The crate also carries the
//! pieces needed to study that at desk scale: a synthetic scene and proposal
//! generator, a from-scratch CNN, static cost analysis and miss-rate/FPPI
//! evaluation.

pub mod classifier;
pub mod cost;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod io;
pub mod labeling;
pub mod nn;
pub mod report;
pub mod seeds;
pub mod synth;

pub use error::{Error, Result};
pub use geometry::{coverage, iou, nms, BoundingBox, ScoredBox};
pub use nn::{LayerSpec, Network, Shape, Tensor, TrainConfig};
