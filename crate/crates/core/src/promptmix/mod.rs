//! Prompt embeddings and the source/target mixing used to condition each step.
//!
//! Plain mixing blends the two prompts with a per-step weight `lambda_t`.
//! Covariance guidance additionally scales each token row of the blend by
//! its CovDiff weight while the step lies in the editing stage.

mod covariance;
mod embedding;

pub use covariance::{covariance, covdiff, CovDiffWeights};
pub use embedding::{load_embeddings, pad_align, HashedTokenizer, PromptEmbedding, PAD_TOKEN, START_TOKEN};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::Conditioning;
use crate::stagefinder::LambdaInit;

/// Default lower bound applied to CovDiff weights before modulation.
pub const DEFAULT_COVDIFF_FLOOR: f64 = 0.1;

fn check_aligned(src: &PromptEmbedding, tgt: &PromptEmbedding) -> Result<()> {
    if src.len() != tgt.len() || src.dims() != tgt.dims() {
        return Err(Error::ShapeMismatch {
            expected: vec![src.len(), src.dims()],
            found: vec![tgt.len(), tgt.dims()],
        });
    }
    Ok(())
}

/// `(1 - lambda) src + lambda tgt`.
pub fn mix(src: &PromptEmbedding, tgt: &PromptEmbedding, lambda: f64) -> Result<PromptEmbedding> {
    check_aligned(src, tgt)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("mixing weight {lambda} outside [0, 1]")));
    }
    let matrix = src.matrix() * (1.0 - lambda) + tgt.matrix() * lambda;
    let tokens = if lambda == 0.0 { src.tokens() } else { tgt.tokens() };
    Ok(PromptEmbedding::from_parts_unchecked(tokens.to_vec(), matrix))
}

/// Covariance-guided mix: inside the editing stage (`t >= t_edit`) row `i` of
/// the plain mix is scaled by `max(cd[i], floor)`; otherwise the plain mix.
pub fn guided_mix(
    src: &PromptEmbedding,
    tgt: &PromptEmbedding,
    lambda: f64,
    cd: &CovDiffWeights,
    t: usize,
    t_edit: usize,
    floor: f64,
) -> Result<PromptEmbedding> {
    if cd.len() != src.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![src.len()],
            found: vec![cd.len()],
        });
    }
    if !(0.0..=1.0).contains(&floor) {
        return Err(Error::InvalidArgument(format!("covdiff floor {floor} outside [0, 1]")));
    }
    let mixed = mix(src, tgt, lambda)?;
    if t < t_edit {
        return Ok(mixed);
    }
    let weights = ndarray::Array1::from_iter(cd.values.iter().map(|w| w.max(floor)));
    let matrix: Array2<f64> = mixed.matrix() * &weights.insert_axis(Axis(1));
    Ok(PromptEmbedding::from_parts_unchecked(mixed.tokens().to_vec(), matrix))
}

/// Everything needed to produce the per-step condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixSchedule {
    pub lambda: LambdaInit,
    /// `None` disables covariance modulation (plain weighted mixing).
    pub covdiff: Option<CovDiffWeights>,
    pub t_edit: usize,
    pub covdiff_floor: f64,
}

impl MixSchedule {
    pub fn new(lambda: LambdaInit, covdiff: Option<CovDiffWeights>, covdiff_floor: f64) -> Self {
        let t_edit = lambda.t_edit;
        Self {
            lambda,
            covdiff,
            t_edit,
            covdiff_floor,
        }
    }

    /// Whether step `t` receives token modulation.
    pub fn modulated(&self, t: usize) -> bool {
        self.covdiff.is_some() && t >= self.t_edit
    }
}

/// Per-step mixed embeddings, precomputed for `t = 1..=T`.
#[derive(Debug, Clone)]
pub struct MixedConditioning {
    per_step: Vec<PromptEmbedding>,
}

impl MixedConditioning {
    /// Builds the conditioning stream from pad-aligned prompts.
    pub fn new(schedule: &MixSchedule, src: &PromptEmbedding, tgt: &PromptEmbedding) -> Result<Self> {
        check_aligned(src, tgt)?;
        let steps = schedule.lambda.values.len();
        let mut per_step = Vec::with_capacity(steps);
        for t in 1..=steps {
            let lambda = schedule.lambda.at(t);
            let e = match &schedule.covdiff {
                Some(cd) => guided_mix(src, tgt, lambda, cd, t, schedule.t_edit, schedule.covdiff_floor)?,
                None => mix(src, tgt, lambda)?,
            };
            per_step.push(e);
        }
        Ok(Self { per_step })
    }

    pub fn steps(&self) -> usize {
        self.per_step.len()
    }

    /// Mixed embedding at step `t` (`1..=T`).
    pub fn at(&self, t: usize) -> &PromptEmbedding {
        &self.per_step[t - 1]
    }
}

impl Conditioning for MixedConditioning {
    fn condition_at(&self, t: usize) -> Option<PromptEmbedding> {
        self.per_step.get(t.wrapping_sub(1)).cloned()
    }
}
