//! Stochastic skeletal-motion prediction with mix-and-match hidden-state
//! perturbation.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`tape`], [`optim`], [`checkpoint`], [`gradcheck`]: a small
//!   reverse-mode differentiation engine over dense `f64` arrays, the Adam
//!   optimizer, gradient clipping, parameter serialization, and a
//!   finite-difference verification harness.
//! - [`quaternion`], [`skeleton`]: quaternion algebra, skeleton forward
//!   kinematics, root alignment, and Euler conversion.
//! - [`sampling`]: index sampling, vector resampling (the mix step), the
//!   curriculum index schedule, and the pluggable fusion modes.
//! - [`gru`], [`model`]: the recurrent encoder/decoder network with a CVAE
//!   block fused into the hidden state.
//! - [`losses`], [`training`]: rotation / skeleton / KL loss terms, KL
//!   annealing, teacher forcing, and the mini-batch training loop.
//! - [`metrics`]: pairwise diversity, classifier-based quality, best-of-K
//!   Euler error, and the sweep drivers.
//! - [`data`]: the deterministic synthetic multimodal dataset and its
//!   serialization.
//! - [`rng`]: one global seed expanded into named, counter-split substreams.

pub mod checkpoint;
pub mod data;
pub mod gradcheck;
pub mod gru;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numfmt;
pub mod optim;
pub mod quaternion;
pub mod rng;
pub mod sampling;
pub mod skeleton;
pub mod tape;
pub mod tensor;
pub mod training;

pub use tape::{NodeId, Tape, TapeError};
pub use tensor::Tensor;
