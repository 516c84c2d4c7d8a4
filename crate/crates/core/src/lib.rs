//! Semi-supervised cross-modal pixel classification.
//!
//! Two co-registered image modalities are available while training; only the
//! first is available when predicting. The crate holds a small reverse-mode
//! autodiff engine, the hybrid two-stream network with its self-adversarial
//! and interactive-learning blocks, graph label propagation for pseudo-labels,
//! a synthetic paired-scene generator, and the training runtime.

pub mod container;
pub mod error;
pub mod experiments;
pub mod linear;
pub mod losses;
pub mod network;
pub mod propagation;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::RngState;
pub use tensor::{Tape, Tensor, Var};
