//! Staged, noise-guided diffusion editing on small latent grids.
//!
//! A deterministic pilot run locates an editing stage (early, high-frequency
//! steps) and a boosting stage (late, low-gradient steps). Source and target
//! prompts are blended per step, modulated by token covariance differences,
//! and stochastic noise is injected only during boosting.

// `!(x >= 0.0)` style checks deliberately reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod denoiser;
mod error;
pub mod objective;
pub mod pipeline;
pub mod promptmix;
pub mod sampler;
pub mod schedule;
pub mod stagefinder;

pub use error::{Error, Result};

/// Derives an independent stream seed from a base seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
