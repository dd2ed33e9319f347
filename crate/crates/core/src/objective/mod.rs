//! Directional and perceptual losses and derivative-free tuning of the
//! mixing weights.

mod encoder;

pub use encoder::{box_downsample, BoxPyramid, JointEncoder, LinearJointEncoder, PerceptualNet};

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{check_same_shape, Grid};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::promptmix::PromptEmbedding;
use crate::stagefinder::LambdaInit;

pub const DEFAULT_GAMMA_PERC: f64 = 1.0;
pub const DEFAULT_OPT_ITERATIONS: usize = 3;
pub const DEFAULT_OPT_STEP: f64 = 5e-2;
/// SPSA perturbation half-width.
pub const DEFAULT_PERTURBATION: f64 = 5e-2;

/// `1 - cos(a, b)`, or `None` when either vector is zero.
pub fn cosine_distance(a: &Array1<f64>, b: &Array1<f64>) -> Result<Option<f64>> {
    cosine_similarity(a, b).map(|c| c.map(|c| 1.0 - c))
}

/// Cosine similarity clamped to `[-1, 1]`, or `None` when either vector is zero.
pub fn cosine_similarity(a: &Array1<f64>, b: &Array1<f64>) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![a.len()],
            found: vec![b.len()],
        });
    }
    let (na, nb) = (a.dot(a).sqrt(), b.dot(b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return Ok(None);
    }
    Ok(Some((a.dot(b) / (na * nb)).clamp(-1.0, 1.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionalLoss {
    pub value: f64,
    /// Either difference vector was zero; `value` is then 1 by convention.
    pub degenerate: bool,
}

/// `1 - cos(dI, dT)` between the image-embedding change and the
/// text-embedding change.
pub fn directional_loss(
    enc: &dyn JointEncoder,
    x_src: &Grid,
    x_edit: &Grid,
    y_src: &PromptEmbedding,
    y_tgt: &PromptEmbedding,
) -> Result<DirectionalLoss> {
    let dt = enc.encode_text(y_tgt)? - enc.encode_text(y_src)?;
    let di = enc.encode_image(x_edit)? - enc.encode_image(x_src)?;
    directional_from_deltas(&di, &dt)
}

pub fn directional_from_deltas(di: &Array1<f64>, dt: &Array1<f64>) -> Result<DirectionalLoss> {
    Ok(match cosine_distance(di, dt)? {
        Some(value) => DirectionalLoss {
            value,
            degenerate: false,
        },
        None => DirectionalLoss {
            value: 1.0,
            degenerate: true,
        },
    })
}

/// Mean absolute feature difference, averaged over scales.
pub fn perceptual_loss(net: &dyn PerceptualNet, x_s: &Grid, x_t: &Grid) -> Result<f64> {
    check_same_shape(x_s, x_t)?;
    let fs = net.features(x_s)?;
    let ft = net.features(x_t)?;
    let per_scale: Vec<f64> = fs
        .iter()
        .zip(&ft)
        .map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v).abs()).sum::<f64>() / a.len() as f64)
        .collect();
    Ok(per_scale.iter().sum::<f64>() / per_scale.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub dclip: f64,
    pub perc: f64,
    pub total: f64,
    pub gamma_perc: f64,
}

pub fn total_loss(dclip: f64, perc: f64, gamma_perc: f64) -> Result<LossReport> {
    if !(gamma_perc >= 0.0 && gamma_perc.is_finite()) {
        return Err(Error::InvalidArgument(format!("gamma_perc {gamma_perc} must be finite and >= 0")));
    }
    Ok(LossReport {
        dclip,
        perc,
        total: dclip + gamma_perc * perc,
        gamma_perc,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpsaOptions {
    pub iterations: usize,
    pub step: f64,
    pub perturbation: f64,
    pub seed: u64,
}

impl Default for SpsaOptions {
    fn default() -> Self {
        Self {
            iterations: DEFAULT_OPT_ITERATIONS,
            step: DEFAULT_OPT_STEP,
            perturbation: DEFAULT_PERTURBATION,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaOptimization {
    /// Best λ seen over the initial point, every perturbation and every iterate.
    pub lambda: LambdaInit,
    pub best: LossReport,
    pub initial: LossReport,
    /// Total loss of the iterate after each iteration.
    pub history: Vec<f64>,
    pub evaluations: usize,
}

fn with_window(base: &LambdaInit, window: &[f64]) -> LambdaInit {
    let mut out = base.clone();
    out.values[base.window_indices()].copy_from_slice(window);
    out
}

/// Simultaneous-perturbation stochastic approximation over the editing-window
/// entries of λ. The two perturbed evaluations run concurrently.
pub fn optimize_lambda<F>(evaluate: F, lambda0: &LambdaInit, options: &SpsaOptions) -> Result<LambdaOptimization>
where
    F: Fn(&LambdaInit) -> Result<LossReport> + Sync,
{
    if !(options.step > 0.0 && options.step.is_finite()) {
        return Err(Error::InvalidArgument(format!("step {} must be positive", options.step)));
    }
    if !(options.perturbation > 0.0 && options.perturbation.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "perturbation {} must be positive",
            options.perturbation
        )));
    }
    if lambda0.values.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("initial lambda outside [0, 1]".into()));
    }
    let wrap = |iteration: usize| {
        move |e: Error| Error::Iteration {
            iteration,
            source: Box::new(e),
        }
    };
    let initial = evaluate(lambda0).map_err(wrap(0))?;
    let mut best = (lambda0.clone(), initial);
    let mut evaluations = 1;
    let mut history = Vec::with_capacity(options.iterations);
    let mut current: Vec<f64> = lambda0.values[lambda0.window_indices()].to_vec();
    let c = options.perturbation;

    let consider = |candidate: &LambdaInit, report: LossReport, best: &mut (LambdaInit, LossReport)| {
        if report.total < best.1.total {
            *best = (candidate.clone(), report);
        }
    };

    for iteration in 1..=options.iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(options.seed, iteration as u64));
        let delta: Vec<f64> = (0..current.len())
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let shifted = |sign: f64| -> Vec<f64> {
            current
                .iter()
                .zip(&delta)
                .map(|(v, d)| (v + sign * c * d).clamp(0.0, 1.0))
                .collect()
        };
        let plus = with_window(lambda0, &shifted(1.0));
        let minus = with_window(lambda0, &shifted(-1.0));
        let (lp, lm) = rayon::join(|| evaluate(&plus), || evaluate(&minus));
        let (lp, lm) = (lp.map_err(wrap(iteration))?, lm.map_err(wrap(iteration))?);
        evaluations += 2;
        consider(&plus, lp, &mut best);
        consider(&minus, lm, &mut best);

        let slope = (lp.total - lm.total) / (2.0 * c);
        for (v, d) in current.iter_mut().zip(&delta) {
            *v = (*v - options.step * slope * d).clamp(0.0, 1.0);
        }
        let iterate = with_window(lambda0, &current);
        let report = evaluate(&iterate).map_err(wrap(iteration))?;
        evaluations += 1;
        history.push(report.total);
        consider(&iterate, report, &mut best);
    }

    Ok(LambdaOptimization {
        lambda: best.0,
        best: best.1,
        initial,
        history,
        evaluations,
    })
}
