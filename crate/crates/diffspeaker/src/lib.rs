//! Diffusion-transformer for speech-driven 3D facial animation.
//!
//! The model denoises a full motion sequence `x^{1:T}` (per-vertex offsets
//! over a template mesh) in parallel, conditioned on per-frame audio
//! features, a speaking-style one-hot, and the diffusion step. Conditioning
//! enters attention as prepended key/value tokens together with static
//! additive biases that keep cross-attention time-aligned and self-attention
//! local in time.
//!
//! Modules:
//! - [`data`]: domain types, synthetic audio-4D dataset generator, binary I/O
//! - [`attention`]: bias construction and biased conditional attention
//! - [`denoiser`]: the denoising network G(x_n, a, s_k, n)
//! - [`diffusion`]: noise schedule, forward noising, DDIM sampling, guidance
//! - [`training`]: losses, AdamW, the training step
//! - [`eval`]: LVE / FDD metrics, motion-std maps, the ablation harness
//! - [`latency`]: autoregressive baseline and the decoding latency benchmark
//! - [`cli`]: config file parsing and the command implementations

pub mod attention;
pub mod cli;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod latency;
pub mod nn;
pub mod training;

/// A motion sequence flattened to (T, V*3), f64 for model math.
pub type Motion = ndarray::Array2<f64>;

pub use error::{Error, Result};
