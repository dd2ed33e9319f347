//! Procedural two-attribute blob images: position (left/right) by intensity
//! (bright/dim) over a smooth per-image background.

use std::fmt;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Grid, LabeledSample};
use crate::error::{Error, Result};

pub const MIN_SIZE: usize = 8;
pub const MAX_SIZE: usize = 32;

/// A blob pixel belongs to the edit region when its profile exceeds this.
const MASK_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Position {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Intensity {
    Bright,
    Dim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlobClass {
    pub position: Position,
    pub intensity: Intensity,
}

impl BlobClass {
    pub const ALL: [BlobClass; 4] = [
        BlobClass::new(Position::Left, Intensity::Bright),
        BlobClass::new(Position::Left, Intensity::Dim),
        BlobClass::new(Position::Right, Intensity::Bright),
        BlobClass::new(Position::Right, Intensity::Dim),
    ];

    pub const fn new(position: Position, intensity: Intensity) -> Self {
        Self { position, intensity }
    }

    pub fn prompt(&self) -> String {
        self.to_string()
    }

    pub fn from_prompt(text: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.prompt() == text.trim())
    }

    fn amplitude(&self) -> f64 {
        match self.intensity {
            Intensity::Bright => 1.4,
            Intensity::Dim => 0.7,
        }
    }

    fn center_x(&self, size: usize) -> f64 {
        let s = size as f64;
        match self.position {
            Position::Left => 0.28 * s,
            Position::Right => 0.72 * s - 1.0,
        }
    }
}

impl fmt::Display for BlobClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = match self.intensity {
            Intensity::Bright => "bright",
            Intensity::Dim => "dim",
        };
        let p = match self.position {
            Position::Left => "left",
            Position::Right => "right",
        };
        write!(f, "a {i} blob on the {p}")
    }
}

/// Per-image nuisance parameters shared by an edit's source and target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobContext {
    pub offset: f64,
    pub slope_x: f64,
    pub slope_y: f64,
    pub jitter_y: f64,
}

impl BlobContext {
    pub fn sample<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Self {
        Self {
            offset: rng.random_range(-0.6..-0.4),
            slope_x: rng.random_range(-0.2..0.2),
            slope_y: rng.random_range(-0.2..0.2),
            jitter_y: rng.random_range(-1.0..1.0) * size as f64 / 8.0,
        }
    }
}

fn check_size(size: usize) -> Result<()> {
    if !(MIN_SIZE..=MAX_SIZE).contains(&size) {
        return Err(Error::InvalidArgument(format!(
            "blob images must be {MIN_SIZE}..={MAX_SIZE} pixels wide, got {size}"
        )));
    }
    Ok(())
}

/// Unit-peak Gaussian footprint of the blob.
pub fn blob_profile(size: usize, class: BlobClass, ctx: &BlobContext) -> Result<Grid> {
    check_size(size)?;
    let s = size as f64;
    let (cx, cy) = (class.center_x(size), 0.5 * s - 0.5 + ctx.jitter_y);
    let sigma = s / 8.0;
    Ok(Array3::from_shape_fn((1, size, size), |(_, y, x)| {
        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
        (-d2 / (2.0 * sigma * sigma)).exp()
    }))
}

pub fn background(size: usize, ctx: &BlobContext) -> Result<Grid> {
    check_size(size)?;
    let s = size as f64;
    Ok(Array3::from_shape_fn((1, size, size), |(_, y, x)| {
        let (u, v) = ((x as f64 + 0.5) / s - 0.5, (y as f64 + 0.5) / s - 0.5);
        ctx.offset + ctx.slope_x * u + ctx.slope_y * v
    }))
}

pub fn render(size: usize, class: BlobClass, ctx: &BlobContext) -> Result<Grid> {
    Ok(background(size, ctx)? + blob_profile(size, class, ctx)? * class.amplitude())
}

/// Pixels covered by the blob of either class (the edit region).
pub fn edit_mask(size: usize, a: BlobClass, b: BlobClass, ctx: &BlobContext) -> Result<Grid> {
    let pa = blob_profile(size, a, ctx)?;
    let pb = blob_profile(size, b, ctx)?;
    Ok(ndarray::Zip::from(&pa)
        .and(&pb)
        .map_collect(|u, v| if u.max(*v) > MASK_THRESHOLD { 1.0 } else { 0.0 }))
}

/// One benchmark edit: a source image, its target-class counterpart under the
/// same context, and the edit mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditCase {
    pub source_class: BlobClass,
    pub target_class: BlobClass,
    pub context: BlobContext,
    pub source: Grid,
    pub target_reference: Grid,
    pub mask: Grid,
}

impl EditCase {
    pub fn new(size: usize, source_class: BlobClass, target_class: BlobClass, context: BlobContext) -> Result<Self> {
        Ok(Self {
            source_class,
            target_class,
            context,
            source: render(size, source_class, &context)?,
            target_reference: render(size, target_class, &context)?,
            mask: edit_mask(size, source_class, target_class, &context)?,
        })
    }

    pub fn sample(size: usize, source_class: BlobClass, target_class: BlobClass, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ctx = BlobContext::sample(size, &mut rng);
        Self::new(size, source_class, target_class, ctx)
    }
}

/// `count` labelled images cycling through the four classes.
pub fn generate(size: usize, count: usize, seed: u64) -> Result<Vec<LabeledSample>> {
    check_size(size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let class = BlobClass::ALL[i % 4];
            let ctx = BlobContext::sample(size, &mut rng);
            Ok(LabeledSample {
                image: render(size, class, &ctx)?,
                label: class.prompt(),
            })
        })
        .collect()
}
