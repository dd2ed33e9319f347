use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::{check_finite, grid_shape, Grid};
use crate::error::{Error, Result};
use crate::promptmix::PromptEmbedding;

/// Image and text encoders into one shared embedding space.
pub trait JointEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode_image(&self, image: &Grid) -> Result<Array1<f64>>;
    fn encode_text(&self, prompt: &PromptEmbedding) -> Result<Array1<f64>>;
}

/// Multi-scale feature extractor.
pub trait PerceptualNet: Send + Sync {
    fn features(&self, image: &Grid) -> Result<Vec<Grid>>;
}

/// Fixed linear maps from flattened pixels and mean-pooled prompt rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearJointEncoder {
    image_shape: [usize; 3],
    image_proj: Array2<f64>,
    text_proj: Array2<f64>,
    text_bias: Array1<f64>,
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let scale = 1.0 / (cols as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| {
        let n: f64 = StandardNormal.sample(rng);
        scale * n
    })
}

impl LinearJointEncoder {
    /// Independent seeded Gaussian projections for both modalities.
    pub fn random(image_shape: [usize; 3], text_dims: usize, dim: usize, seed: u64) -> Result<Self> {
        let pixels: usize = image_shape.iter().product();
        if pixels == 0 || text_dims == 0 || dim == 0 {
            return Err(Error::InvalidArgument("encoder dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image_proj = gaussian_matrix(dim, pixels, &mut rng);
        let text_proj = gaussian_matrix(dim, text_dims, &mut rng);
        Ok(Self {
            image_shape,
            image_proj,
            text_proj,
            text_bias: Array1::zeros(dim),
        })
    }

    /// Random image projection with a text head fitted by ridge least squares
    /// so that `encode_text(prompt)` approximates the image embeddings of the
    /// images paired with that prompt.
    pub fn aligned(
        image_shape: [usize; 3],
        dim: usize,
        seed: u64,
        pairs: &[(&PromptEmbedding, &Grid)],
        ridge: f64,
    ) -> Result<Self> {
        let text_dims = pairs
            .first()
            .map(|(p, _)| p.dims())
            .ok_or_else(|| Error::InvalidArgument("alignment needs at least one pair".into()))?;
        if !(ridge >= 0.0 && ridge.is_finite()) {
            return Err(Error::InvalidArgument(format!("ridge {ridge} must be finite and >= 0")));
        }
        let mut enc = Self::random(image_shape, text_dims, dim, seed)?;
        let m = pairs.len();
        let cols = text_dims + 1;
        let mut x = DMatrix::<f64>::zeros(m, cols);
        let mut y = DMatrix::<f64>::zeros(m, dim);
        for (i, (prompt, image)) in pairs.iter().enumerate() {
            if prompt.dims() != text_dims {
                return Err(Error::ShapeMismatch {
                    expected: vec![text_dims],
                    found: vec![prompt.dims()],
                });
            }
            for (j, v) in prompt.pooled().iter().enumerate() {
                x[(i, j)] = *v;
            }
            x[(i, text_dims)] = 1.0;
            for (j, v) in enc.encode_image(image)?.iter().enumerate() {
                y[(i, j)] = *v;
            }
        }
        let mut gram = x.transpose() * &x;
        for j in 0..text_dims {
            gram[(j, j)] += ridge;
        }
        // A tiny jitter keeps the system solvable when prompts are collinear.
        for j in 0..cols {
            gram[(j, j)] += 1e-12 * (1.0 + gram[(j, j)]);
        }
        let rhs = x.transpose() * &y;
        let solution = gram
            .cholesky()
            .ok_or_else(|| Error::InvalidArgument("alignment system is not positive definite".into()))?
            .solve(&rhs);
        enc.text_proj = Array2::from_shape_fn((dim, text_dims), |(r, c)| solution[(c, r)]);
        enc.text_bias = Array1::from_shape_fn(dim, |r| solution[(text_dims, r)]);
        Ok(enc)
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }
}

impl JointEncoder for LinearJointEncoder {
    fn dim(&self) -> usize {
        self.image_proj.nrows()
    }

    fn encode_image(&self, image: &Grid) -> Result<Array1<f64>> {
        if grid_shape(image) != self.image_shape {
            return Err(Error::ShapeMismatch {
                expected: self.image_shape.to_vec(),
                found: image.shape().to_vec(),
            });
        }
        check_finite(image, "encoder image")?;
        let flat = Array1::from_iter(image.iter().copied());
        Ok(self.image_proj.dot(&flat))
    }

    fn encode_text(&self, prompt: &PromptEmbedding) -> Result<Array1<f64>> {
        if prompt.dims() != self.text_proj.ncols() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.text_proj.ncols()],
                found: vec![prompt.dims()],
            });
        }
        Ok(self.text_proj.dot(&prompt.pooled()) + &self.text_bias)
    }
}

/// Identity plus 2x and 4x box-downsampled copies (by default).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxPyramid {
    pub scales: usize,
}

impl Default for BoxPyramid {
    fn default() -> Self {
        Self { scales: 3 }
    }
}

/// Averages `factor x factor` blocks; edge blocks average what they cover.
pub fn box_downsample(image: &Grid, factor: usize) -> Grid {
    let [c, h, w] = grid_shape(image);
    let (oh, ow) = (h.div_ceil(factor), w.div_ceil(factor));
    Array3::from_shape_fn((c, oh, ow), |(ch, y, x)| {
        let (y1, x1) = ((y * factor + factor).min(h), (x * factor + factor).min(w));
        let mut acc = 0.0;
        for yy in y * factor..y1 {
            for xx in x * factor..x1 {
                acc += image[[ch, yy, xx]];
            }
        }
        acc / ((y1 - y * factor) * (x1 - x * factor)) as f64
    })
}

impl PerceptualNet for BoxPyramid {
    fn features(&self, image: &Grid) -> Result<Vec<Grid>> {
        if self.scales == 0 {
            return Err(Error::InvalidArgument("pyramid needs at least one scale".into()));
        }
        check_finite(image, "perceptual input")?;
        Ok((0..self.scales).map(|k| box_downsample(image, 1 << k)).collect())
    }
}
