use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::embedding::{PromptEmbedding, PAD_TOKEN};
use crate::error::{Error, Result};

/// Token-by-token covariance of an embedding.
///
/// The uncentered form is `c c^T / (n - 1)`. The centered form treats each
/// token row as a variable observed over the embedding dimensions: rows are
/// mean-centered and the product is divided by `d - 1`.
pub fn covariance(c: &PromptEmbedding, centered: bool) -> Result<Array2<f64>> {
    let n = c.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "token covariance needs at least 2 tokens, got {n}"
        )));
    }
    if centered {
        let d = c.dims();
        if d < 2 {
            return Err(Error::InvalidArgument("centered covariance needs at least 2 dims".into()));
        }
        let means = c.matrix().mean_axis(Axis(1)).expect("non-empty");
        let x = c.matrix() - &means.insert_axis(Axis(1));
        Ok(x.dot(&x.t()) / (d - 1) as f64)
    } else {
        let m = c.matrix();
        Ok(m.dot(&m.t()) / (n - 1) as f64)
    }
}

/// Per-token weights in `[0, 1]` marking where the target prompt's token
/// covariance departs from the source's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovDiffWeights {
    pub values: Vec<f64>,
    /// True when the two covariances are identical (all weights zero).
    pub degenerate: bool,
}

impl CovDiffWeights {
    /// Weights of exactly one: modulation becomes the identity.
    pub fn ones(n: usize) -> Self {
        Self {
            values: vec![1.0; n],
            degenerate: false,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        best
    }
}

/// Rowwise maximum of `|Cov(tgt) - Cov(src)|`, min-max normalized over the
/// rows that are not padding in both prompts.
pub fn covdiff(src: &PromptEmbedding, tgt: &PromptEmbedding, centered: bool) -> Result<CovDiffWeights> {
    if src.len() != tgt.len() || src.dims() != tgt.dims() {
        return Err(Error::ShapeMismatch {
            expected: vec![src.len(), src.dims()],
            found: vec![tgt.len(), tgt.dims()],
        });
    }
    let diff = covariance(tgt, centered)? - covariance(src, centered)?;
    let row_max: Vec<f64> = diff
        .rows()
        .into_iter()
        .map(|row| row.iter().fold(0.0_f64, |m, v| m.max(v.abs())))
        .collect();
    let real: Vec<bool> = src
        .tokens()
        .iter()
        .zip(tgt.tokens())
        .map(|(a, b)| !(a == PAD_TOKEN && b == PAD_TOKEN))
        .collect();

    let (lo, hi) = row_max
        .iter()
        .zip(&real)
        .filter(|(_, r)| **r)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (v, _)| (lo.min(*v), hi.max(*v)));

    let n = row_max.len();
    if !(hi > 0.0) {
        return Ok(CovDiffWeights {
            values: vec![0.0; n],
            degenerate: true,
        });
    }
    let range = hi - lo;
    let values = row_max
        .iter()
        .zip(&real)
        .map(|(v, r)| match (*r, range > 0.0) {
            (false, _) => 0.0,
            (true, true) => (v - lo) / range,
            (true, false) => 1.0,
        })
        .collect();
    Ok(CovDiffWeights {
        values,
        degenerate: false,
    })
}
