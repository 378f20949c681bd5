//! Single-image dehazing engine.
//!
//! A hazy RGB image is paired with its haze density map (a dark-channel
//! estimate computed by max pooling so gradients can flow through it) and
//! fed to a U-Net whose bottleneck mixes spatial convolutions with
//! convolutions in the Fourier domain. The crate also carries a small
//! training loop on synthetic haze and an inference throughput harness.

pub mod bench;
pub mod density;
pub mod error;
pub mod image_synth;
pub mod losses;
pub mod network;
pub mod par;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Tensor, Var};
