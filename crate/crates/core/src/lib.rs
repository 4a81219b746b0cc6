//! Lifelong imitation learning with multi-modal feature distillation and
//! Gaussian-mixture policy distillation.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: dense tensors and a reverse-mode tape
//! - [`gmm`]: mixture densities, sampling and KL estimation
//! - [`synth`]: a 2-d pick-and-place task suite with scripted experts
//! - [`policy`]: per-modality encoders, temporal attention, GMM head
//! - [`losses`]: behavioural cloning and the distillation terms
//! - [`trainer`]: replay buffer, optimiser and the sequential task loop
//! - [`eval`]: rollouts, transfer metrics and latent drift
//! - [`io`]: on-disk formats for demos and checkpoints

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod gmm;
pub mod io;
pub mod losses;
pub mod policy;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
