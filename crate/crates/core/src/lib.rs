//! Weakly supervised 3D human pose estimation from LiDAR and camera keypoints.
//!
//! The crate covers the whole pipeline: a synthetic scene generator, 3D
//! pseudo-label construction from 2D detections and projected LiDAR returns,
//! a small dense network library with hand-written gradients, the lifting,
//! point and fusion models, training, evaluation and a CLI.

pub mod cli;
pub mod dataio;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod nn;
pub mod pseudolabel;
pub mod rng;
pub mod synth;
pub mod train;

// The guide's code blocks run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/pseudo-labels.md")]
    mod pseudo_labels {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
