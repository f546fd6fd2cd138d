//! State-aware video object segmentation.
//!
//! Each target is tracked as a tracklet: crop around the current box,
//! segment, score the prediction's state, then feed the state back into the
//! next crop (mask-box or smoothed regression-box) and into a running
//! global appearance feature.

pub mod davis;
pub mod error;
pub mod eval;
pub mod feedback;
pub mod geometry;
pub mod grid;
pub mod harness;
pub mod maskops;
pub mod segnet;
pub mod synthdata;
pub mod tensor;
pub mod tracker;
pub mod train;

pub use error::{Error, Result};
pub use feedback::{GlobalFeature, SmoothedBoxState, Strategy};
pub use geometry::{Box, CropTransform};
pub use grid::{Grid, Image};
pub use maskops::{BinaryMask, ProbabilityMap, StateEstimate};
pub use segnet::{NetworkConfig, SegNet};
pub use tensor::Tensor;
pub use tracker::{Tracker, TrackerConfig, TrackletState};
