//! Noise predictors and the latent-to-pixel decoder.

mod analytic;
mod toy;

pub use analytic::{analytic_epsilon, AnalyticDenoiser, GaussianMixtureWorld};
pub use toy::{train_toy_denoiser, LabeledSample, ToyDenoiser, ToyMetadata, TrainOptions};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::promptmix::PromptEmbedding;

/// A real `(channels, height, width)` grid: latents, noises and images alike.
pub type Grid = Array3<f64>;

/// `z_t` together with the diffusion time it lives at.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub data: Grid,
    pub timestep: usize,
}

impl LatentCode {
    pub fn new(data: Grid, timestep: usize) -> Result<Self> {
        check_finite(&data, "latent")?;
        Ok(Self { data, timestep })
    }

    pub fn shape(&self) -> [usize; 3] {
        grid_shape(&self.data)
    }
}

pub fn grid_shape(grid: &Grid) -> [usize; 3] {
    let s = grid.shape();
    [s[0], s[1], s[2]]
}

pub(crate) fn check_finite(grid: &Grid, what: &'static str) -> Result<()> {
    if grid.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

pub(crate) fn check_same_shape(expected: &Grid, found: &Grid) -> Result<()> {
    if expected.shape() != found.shape() {
        return Err(Error::ShapeMismatch {
            expected: expected.shape().to_vec(),
            found: found.shape().to_vec(),
        });
    }
    Ok(())
}

/// The noise predictor `eps_theta(z_t, t, c)`.
///
/// Implementations must be deterministic and shape-preserving. `cond = None`
/// requests the unconditional prediction used by classifier-free guidance.
pub trait DenoiserBackend: Send + Sync {
    fn predict(&self, z: &Grid, t: usize, cond: Option<&PromptEmbedding>) -> Result<Grid>;

    /// Whether `predict(.., None)` is meaningful.
    fn supports_unconditional(&self) -> bool {
        true
    }

    /// Latent shape the backend accepts, when fixed.
    fn latent_shape(&self) -> Option<[usize; 3]> {
        None
    }

    /// Cumulative alphas the backend was built for, when fixed.
    fn alphas(&self) -> Option<&[f64]> {
        None
    }
}

/// Maps latents to pixel space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Decoder {
    /// Latent space is pixel space.
    #[default]
    Identity,
    /// Channel average followed by nearest-neighbour upsampling by `factor`,
    /// giving a `(1, factor*H, factor*W)` image.
    Upsample { factor: usize },
}

impl Decoder {
    pub fn decode(&self, z: &Grid) -> Result<Grid> {
        check_finite(z, "decoder input")?;
        match *self {
            Decoder::Identity => Ok(z.clone()),
            Decoder::Upsample { factor } => {
                if factor == 0 {
                    return Err(Error::InvalidArgument("upsample factor must be positive".into()));
                }
                let [c, h, w] = grid_shape(z);
                let inv_c = 1.0 / c as f64;
                Ok(Array3::from_shape_fn((1, h * factor, w * factor), |(_, y, x)| {
                    let (sy, sx) = (y / factor, x / factor);
                    (0..c).map(|ch| z[[ch, sy, sx]]).sum::<f64>() * inv_c
                }))
            }
        }
    }

    /// Pixel image to latent: the identity, or block averaging replicated
    /// over the latent channels. `decode(encode(x)) = x` for images that are
    /// constant on blocks.
    pub fn encode(&self, image: &Grid, latent_shape: [usize; 3]) -> Result<Grid> {
        check_finite(image, "image")?;
        match *self {
            Decoder::Identity => {
                if grid_shape(image) != latent_shape {
                    return Err(Error::ShapeMismatch {
                        expected: latent_shape.to_vec(),
                        found: image.shape().to_vec(),
                    });
                }
                Ok(image.clone())
            }
            Decoder::Upsample { factor } => {
                let [c, h, w] = latent_shape;
                let expected = [1, h * factor, w * factor];
                if factor == 0 || grid_shape(image) != expected {
                    return Err(Error::ShapeMismatch {
                        expected: expected.to_vec(),
                        found: image.shape().to_vec(),
                    });
                }
                let inv = 1.0 / (factor * factor) as f64;
                Ok(Array3::from_shape_fn((c, h, w), |(_, y, x)| {
                    let mut acc = 0.0;
                    for yy in y * factor..(y + 1) * factor {
                        for xx in x * factor..(x + 1) * factor {
                            acc += image[[0, yy, xx]];
                        }
                    }
                    acc * inv
                }))
            }
        }
    }
}
