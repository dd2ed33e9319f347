//! Editing/boosting stage discernment from a deterministic pilot run.
//!
//! The editing stage is the contiguous run of early steps (large `t`) whose
//! decoded latents carry high-frequency energy at or above a quantile of the
//! whole trace. The boosting stage is the contiguous run of late steps (small
//! `t`) whose predicted-noise change stays at or below a quantile. All traces
//! are indexed so that `trace[t - 1]` belongs to step `t`.

mod spectrum;

pub use spectrum::{centered_power_spectrum, high_freq_energy};

use serde::{Deserialize, Serialize};

use crate::denoiser::{check_same_shape, Decoder, Grid};
use crate::error::{Error, Result};
use crate::sampler::Trajectory;

pub const DEFAULT_FREQ_QUANTILE: f64 = 0.75;
pub const DEFAULT_GRAD_QUANTILE: f64 = 0.25;
pub const DEFAULT_HF_RADIUS: f64 = 0.25;
pub const DEFAULT_LAMBDA_PRIME: f64 = 0.2;

/// Fallback stage boundaries as fractions of `T`.
const FALLBACK_EDIT_FRACTION: f64 = 0.6;
const FALLBACK_BOOST_FRACTION: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMetric {
    /// `||eps_t - eps_{t+1}||_2 / n` across consecutive steps.
    #[default]
    Temporal,
    /// Mean forward-difference magnitude within each predicted-noise frame.
    Spatial,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageOptions {
    pub freq_quantile: f64,
    pub grad_quantile: f64,
    pub hf_radius: f64,
    pub gradient_metric: GradientMetric,
}

impl Default for StageOptions {
    fn default() -> Self {
        Self {
            freq_quantile: DEFAULT_FREQ_QUANTILE,
            grad_quantile: DEFAULT_GRAD_QUANTILE,
            hf_radius: DEFAULT_HF_RADIUS,
            gradient_metric: GradientMetric::Temporal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    /// Smallest `t` of the editing stage `[t_edit, T]`.
    pub t_edit: usize,
    /// Noise is injected for `t < t_boost`.
    pub t_boost: usize,
    pub freq_trace: Vec<f64>,
    pub grad_trace: Vec<f64>,
    pub freq_quantile: f64,
    pub grad_quantile: f64,
    pub edit_fallback: bool,
    pub boost_fallback: bool,
}

impl StagePlan {
    pub fn steps(&self) -> usize {
        self.freq_trace.len()
    }

    pub fn in_editing_stage(&self, t: usize) -> bool {
        t >= self.t_edit
    }

    pub fn noise_on(&self, t: usize) -> bool {
        t < self.t_boost
    }

    /// Number of steps that inject noise.
    pub fn boost_len(&self) -> usize {
        self.t_boost.saturating_sub(1)
    }

    /// Number of steps in the editing stage.
    pub fn edit_len(&self) -> usize {
        (self.steps() + 1).saturating_sub(self.t_edit)
    }

    pub fn validate(&self) -> Result<()> {
        let steps = self.steps();
        if self.grad_trace.len() != steps || steps < 2 {
            return Err(Error::InvalidArgument("stage traces must share a length >= 2".into()));
        }
        if !(self.t_boost <= self.t_edit && self.t_edit <= steps) {
            return Err(Error::InvalidArgument(format!(
                "stage bounds violate 0 <= t_boost ({}) <= t_edit ({}) <= T ({steps})",
                self.t_boost, self.t_edit
            )));
        }
        Ok(())
    }
}

/// Linear-interpolation quantile (the "type 7" definition).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Predicted-noise change per step from a record in sampling order
/// (`eps[0]` belongs to `t = T`). The returned trace is indexed by `t - 1`.
pub fn noise_gradient_trace(eps: &[&Grid], metric: GradientMetric) -> Result<Vec<f64>> {
    let steps = eps.len();
    if steps < 2 {
        return Err(Error::InvalidArgument(format!(
            "gradient trace needs at least 2 steps, got {steps}"
        )));
    }
    for e in eps {
        check_same_shape(eps[0], e)?;
    }
    let at = |t: usize| eps[steps - t];
    let mut trace = vec![0.0; steps];
    match metric {
        GradientMetric::Temporal => {
            let n = eps[0].len() as f64;
            for t in 1..steps {
                let d2: f64 = at(t).iter().zip(at(t + 1)).map(|(a, b)| (a - b).powi(2)).sum();
                trace[t - 1] = d2.sqrt() / n;
            }
            trace[steps - 1] = trace[steps - 2];
        }
        GradientMetric::Spatial => {
            for t in 1..=steps {
                trace[t - 1] = spatial_gradient(at(t));
            }
        }
    }
    Ok(trace)
}

fn spatial_gradient(g: &Grid) -> f64 {
    let [c, h, w] = [g.shape()[0], g.shape()[1], g.shape()[2]];
    let mut acc = 0.0;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = g[[ch, y, x]];
                let dx = if x + 1 < w { g[[ch, y, x + 1]] - v } else { 0.0 };
                let dy = if y + 1 < h { g[[ch, y + 1, x]] - v } else { 0.0 };
                acc += (dx * dx + dy * dy).sqrt();
            }
        }
    }
    acc / g.len() as f64
}

fn check_trace(trace: &[f64], name: &str) -> Result<()> {
    if trace.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidArgument(format!("{name} must be finite and nonnegative")));
    }
    Ok(())
}

fn check_quantile(q: f64, name: &str) -> Result<()> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidArgument(format!("{name} {q} outside (0, 1)")));
    }
    Ok(())
}

/// Places the stage boundaries on recorded traces.
pub fn plan_from_traces(
    freq_trace: Vec<f64>,
    grad_trace: Vec<f64>,
    freq_quantile: f64,
    grad_quantile: f64,
) -> Result<StagePlan> {
    let steps = freq_trace.len();
    if steps < 2 || grad_trace.len() != steps {
        return Err(Error::InvalidArgument(format!(
            "traces need equal lengths >= 2, got {} and {}",
            steps,
            grad_trace.len()
        )));
    }
    check_trace(&freq_trace, "frequency trace")?;
    check_trace(&grad_trace, "gradient trace")?;
    check_quantile(freq_quantile, "frequency quantile")?;
    check_quantile(grad_quantile, "gradient quantile")?;

    let freq_cut = quantile(&freq_trace, freq_quantile);
    let mut t_edit = steps + 1;
    while t_edit > 1 && freq_trace[t_edit - 2] >= freq_cut {
        t_edit -= 1;
    }
    let edit_fallback = t_edit == steps + 1;
    if edit_fallback {
        t_edit = fallback_step(steps, FALLBACK_EDIT_FRACTION);
    }

    let grad_cut = quantile(&grad_trace, grad_quantile);
    let mut t_boost = 1;
    while t_boost <= steps && grad_trace[t_boost - 1] <= grad_cut {
        t_boost += 1;
    }
    let boost_fallback = t_boost == 1;
    if boost_fallback {
        t_boost = fallback_step(steps, FALLBACK_BOOST_FRACTION);
    }
    let t_boost = t_boost.min(t_edit);

    Ok(StagePlan {
        t_edit,
        t_boost,
        freq_trace,
        grad_trace,
        freq_quantile,
        grad_quantile,
        edit_fallback,
        boost_fallback,
    })
}

fn fallback_step(steps: usize, fraction: f64) -> usize {
    ((fraction * steps as f64).round() as usize).clamp(1, steps)
}

/// Frequency trace of a pilot run: high-frequency energy of `decode(z_t)`.
pub fn frequency_trace(pilot: &Trajectory, decoder: &Decoder, hf_radius: f64) -> Result<Vec<f64>> {
    let steps = pilot.steps.len();
    (1..=steps)
        .map(|t| {
            let z = pilot
                .latent_at(t)
                .ok_or_else(|| Error::InvalidArgument(format!("pilot has no latent for t = {t}")))?;
            high_freq_energy(&decoder.decode(z)?, hf_radius)
        })
        .collect()
}

/// Builds both traces from a deterministic pilot run and places the stages.
pub fn discern_stages(pilot: &Trajectory, decoder: &Decoder, options: &StageOptions) -> Result<StagePlan> {
    if pilot.steps.iter().any(|s| s.noise_on) {
        return Err(Error::InvalidArgument("pilot run must be deterministic".into()));
    }
    let freq = frequency_trace(pilot, decoder, options.hf_radius)?;
    let grad = noise_gradient_trace(&pilot.eps_record(), options.gradient_metric)?;
    plan_from_traces(freq, grad, options.freq_quantile, options.grad_quantile)
}

/// Per-step mixing weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaInit {
    /// `values[t - 1]` is `lambda_t`.
    pub values: Vec<f64>,
    pub lambda_prime: f64,
    pub t_edit: usize,
    /// Set when the frequency trace is flat over the editing window.
    pub degenerate: bool,
}

impl LambdaInit {
    /// The same weight at every step.
    pub fn constant(steps: usize, value: f64, t_edit: usize) -> Result<Self> {
        check_unit(value, "lambda")?;
        Ok(Self {
            values: vec![value; steps],
            lambda_prime: value,
            t_edit,
            degenerate: false,
        })
    }

    pub fn at(&self, t: usize) -> f64 {
        self.values[t - 1]
    }

    pub fn steps(&self) -> usize {
        self.values.len()
    }

    pub fn in_window(&self, t: usize) -> bool {
        t >= self.t_edit
    }

    /// Indices into `values` that belong to the editing window.
    pub fn window_indices(&self) -> std::ops::Range<usize> {
        self.t_edit.saturating_sub(1).min(self.values.len())..self.values.len()
    }
}

fn check_unit(v: f64, name: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::InvalidArgument(format!("{name} {v} outside [0, 1]")));
    }
    Ok(())
}

/// Min-max normalized frequency trace inside `[t_edit, T]`, `lambda_prime`
/// elsewhere.
pub fn init_lambda(plan: &StagePlan, lambda_prime: f64) -> Result<LambdaInit> {
    plan.validate()?;
    check_unit(lambda_prime, "lambda_prime")?;
    let steps = plan.steps();
    let window = &plan.freq_trace[plan.t_edit - 1..];
    let lo = window.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = window.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let degenerate = !(hi > lo);
    let values = (1..=steps)
        .map(|t| {
            if t < plan.t_edit {
                lambda_prime
            } else if degenerate {
                1.0
            } else {
                (plan.freq_trace[t - 1] - lo) / (hi - lo)
            }
        })
        .collect();
    Ok(LambdaInit {
        values,
        lambda_prime,
        t_edit: plan.t_edit,
        degenerate,
    })
}
