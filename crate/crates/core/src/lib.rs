//! Desk-scale dyadic audio-visual dialogue generation.
//!
//! Two coupled generation pipelines over fully synthetic data: a latent
//! diffusion path for facial-motion video and a token-based path for speech
//! (text -> semantic tokens -> mel -> waveform), joined by interactive motion
//! features and speaker embeddings. Everything runs in f64 on one thread and
//! is reproducible from a single seed.

pub mod autodiff;
pub mod consts;
pub mod data;
pub mod error;
pub mod metrics;
pub mod motion;
pub mod nn;
pub mod rng;
pub mod speaker;
pub mod speech;
pub mod tensor;
pub mod visual;

pub use error::{Error, Result};
pub use tensor::Tensor;
