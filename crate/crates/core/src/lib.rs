//! Single-person global motion forecasting.
//!
//! Joint trajectories are encoded with an orthonormal DCT, completed by a
//! residual graph convolutional network with learnable adjacency, and decoded
//! back to poses. The crate also ships the full data-processing stack
//! (centering/scaling, gap interpolation, visibility padding, boundary
//! filtering, window extraction, reversal/flip augmentation), a from-scratch
//! training loop (smooth-L1 with online hard keypoint mining, curriculum
//! frame unmasking, Adam with exponential decay), the VIM/VAM evaluation
//! metrics, and a seeded synthetic motion generator for desk-scale runs.

pub mod dct;
pub mod error;
pub mod gcnet;
pub mod io;
pub mod metrics;
pub mod pose;
pub mod predict;
pub mod preprocess;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use pose::{Dataset, MotionSample, PoseSequence, SkeletonSpec};
