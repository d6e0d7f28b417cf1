//! Graph-conditioned, energy-guided diffusion motion retargeting across
//! heterogeneous robot skeletons.
//!
//! The crate is organized around the data flow of a retargeting run:
//!
//! - [`skeleton`] — robot kinematic graphs parsed from URDF, joint
//!   correspondence maps between embodiments, and their augmentation.
//! - [`motion`] — padded `T x J x 9` motion clips with validity masks,
//!   preprocessing, and persistence.
//! - [`kinematics`] — forward kinematics over a skeleton graph, leg-length
//!   body scaling, both as plain evaluation and as differentiable graph ops.
//! - [`guidance`] — the kinematic energy (keypoint tracking, forward-kinematics
//!   consistency, velocity tracking, regularization), its gradient, and a
//!   learning-free direct-optimization baseline.
//! - [`denoiser`] — the graph-conditioned transformer denoiser with
//!   relation-biased spatial attention, windowed temporal attention, and
//!   correspondence-masked multi-conditional cross attention.
//! - [`diffusion`] — noise schedule, perturbation, the guided training
//!   objective, and the sampler.
//! - [`pipeline`] — dataset assembly, training/adaptation loops, and metrics.
//! - [`tensor`] — the small dense `f64` tensor type and reverse-mode
//!   autodiff tape everything numeric is built on.

pub mod diffusion;
pub mod denoiser;
pub mod error;
pub mod fixtures;
pub mod guidance;
pub mod kinematics;
pub mod motion;
pub mod pipeline;
pub mod rng;
pub mod skeleton;
pub mod tensor;

pub use error::{Error, Result};
