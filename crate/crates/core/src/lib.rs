//! Desk-scale video diffusion adversarial attack lab.
//!
//! The pipeline: DDIM-invert a benign clip into the latent space, optimize an
//! adversarial latent timestep by timestep against a surrogate video
//! classifier, and route every self-attention block through recursive
//! cross-frame token merging so the crafted frames stay temporally
//! consistent. Everything runs on a small tape-based autodiff core over toy
//! denoisers and classifiers, with an evaluation and ablation harness.

pub mod attack;
pub mod checkpoint;
pub mod classifier;
pub mod clip;
pub mod dataset;
pub mod denoiser;
pub mod harness;
pub mod metrics;
pub mod retome;
pub mod scheduler;
pub mod tensor;

pub use tensor::tape::{Gradients, Tape, Var};
pub use tensor::{AdamW, Real, Tensor};
