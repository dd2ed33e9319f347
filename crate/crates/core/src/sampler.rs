//! DDIM reverse steps, classifier-free guidance, staged sampling and inversion.
//!
//! One reverse step splits into three parts:
//!
//! ```text
//! z_{t-1} = sqrt(a_{t-1}) * x0_pred            (predicted x_0)
//!         + sqrt(1 - a_{t-1} - s_t^2) * eps    (direction towards z_t)
//!         + s_t * noise                        (only inside the boosting window)
//! ```
//!
//! Outside the boosting window `s_t` is forced to zero, so a single schedule
//! drives both the deterministic and the stochastic phase.

use ndarray::Zip;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::denoiser::{check_finite, check_same_shape, DenoiserBackend, Grid, LatentCode};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::promptmix::PromptEmbedding;
use crate::schedule::Schedule;

/// Supplies the condition for each sampling step.
pub trait Conditioning: Sync {
    fn condition_at(&self, t: usize) -> Option<PromptEmbedding>;
}

/// Always the null condition.
#[derive(Debug, Clone, Copy, Default)]
pub struct Unconditional;

impl Conditioning for Unconditional {
    fn condition_at(&self, _t: usize) -> Option<PromptEmbedding> {
        None
    }
}

impl Conditioning for PromptEmbedding {
    fn condition_at(&self, _t: usize) -> Option<PromptEmbedding> {
        Some(self.clone())
    }
}

/// Adapts a closure `t -> condition`.
pub struct ConditionFn<F>(pub F);

impl<F> Conditioning for ConditionFn<F>
where
    F: Fn(usize) -> Option<PromptEmbedding> + Sync,
{
    fn condition_at(&self, t: usize) -> Option<PromptEmbedding> {
        (self.0)(t)
    }
}

/// The three additive parts of one reverse step and their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub next_latent: LatentCode,
    pub predicted_x0: Grid,
    pub direction_term: Grid,
    /// Zero grid when no noise was injected.
    pub injected_noise: Grid,
}

impl StepOutput {
    /// Recombines the parts, `sqrt(a_{t-1}) x0 + direction + noise`.
    pub fn reassemble(&self, schedule: &Schedule) -> Grid {
        let scale = schedule.alpha(self.next_latent.timestep).sqrt();
        let mut out = &self.predicted_x0 * scale;
        out += &self.direction_term;
        out += &self.injected_noise;
        out
    }
}

/// One DDIM reverse step from `z_t` (at `z_t.timestep`) using noise estimate
/// `eps`. With `noise_on` the step uses the schedule's `sigma_t` and injects
/// `sigma_t * N(0, I)` drawn from `rng_seed`; otherwise `sigma_t = 0`.
pub fn ddim_step(
    z_t: &LatentCode,
    eps: &Grid,
    schedule: &Schedule,
    noise_on: bool,
    rng_seed: u64,
) -> Result<StepOutput> {
    let t = z_t.timestep;
    schedule.check_step(t)?;
    check_same_shape(&z_t.data, eps)?;
    check_finite(&z_t.data, "latent")?;
    check_finite(eps, "noise estimate")?;

    let alpha = schedule.alpha(t);
    let alpha_prev = schedule.alpha(t - 1);
    let sigma = if noise_on { schedule.sigma(t) } else { 0.0 };
    let (sqrt_alpha, sqrt_one_minus) = (alpha.sqrt(), (1.0 - alpha).sqrt());
    let dir_coef = (1.0 - alpha_prev - sigma * sigma).max(0.0).sqrt();
    let x0_coef = alpha_prev.sqrt();

    let predicted_x0 = Zip::from(&z_t.data)
        .and(eps)
        .map_collect(|z, e| (z - sqrt_one_minus * e) / sqrt_alpha);
    let direction_term = eps * dir_coef;
    let injected_noise = if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        Grid::from_shape_simple_fn(eps.raw_dim(), || {
            let n: f64 = StandardNormal.sample(&mut rng);
            sigma * n
        })
    } else {
        Grid::zeros(eps.raw_dim())
    };
    let next = Zip::from(&predicted_x0)
        .and(&direction_term)
        .and(&injected_noise)
        .map_collect(|x0, d, n| x0_coef * x0 + d + n);
    Ok(StepOutput {
        next_latent: LatentCode::new(next, t - 1)?,
        predicted_x0,
        direction_term,
        injected_noise,
    })
}

/// `eps_uncond + scale (eps_cond - eps_uncond)`; `cond = None` returns the
/// unconditional prediction.
pub fn cfg_epsilon(
    backend: &dyn DenoiserBackend,
    z: &Grid,
    t: usize,
    cond: Option<&PromptEmbedding>,
    scale: f64,
) -> Result<Grid> {
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(Error::InvalidArgument(format!("guidance scale {scale} must be >= 0")));
    }
    let Some(cond) = cond else {
        return backend.predict(z, t, None);
    };
    if scale == 1.0 {
        return backend.predict(z, t, Some(cond));
    }
    if !backend.supports_unconditional() {
        return Err(Error::NoUnconditional);
    }
    let uncond = backend.predict(z, t, None)?;
    if scale == 0.0 {
        return Ok(uncond);
    }
    let cond_eps = backend.predict(z, t, Some(cond))?;
    Ok(Zip::from(&uncond)
        .and(&cond_eps)
        .map_collect(|u, c| u + scale * (c - u)))
}

/// One recorded reverse step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub t: usize,
    pub noise_on: bool,
    pub eps: Grid,
    pub output: StepOutput,
}

/// A full `T -> 0` run.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub start: LatentCode,
    /// Ordered by sampling time: `steps[0]` is `t = T`.
    pub steps: Vec<StepRecord>,
}

impl Trajectory {
    pub fn final_latent(&self) -> &LatentCode {
        self.steps
            .last()
            .map(|s| &s.output.next_latent)
            .unwrap_or(&self.start)
    }

    /// The latent fed into step `t` (`z_t`), for `t` in `0..=T`.
    pub fn latent_at(&self, t: usize) -> Option<&Grid> {
        let top = self.start.timestep;
        if t == top {
            return Some(&self.start.data);
        }
        if t > top {
            return None;
        }
        self.steps.get(top - t - 1).map(|s| &s.output.next_latent.data)
    }

    /// Noise estimates in sampling order (`t = T` first).
    pub fn eps_record(&self) -> Vec<&Grid> {
        self.steps.iter().map(|s| &s.eps).collect()
    }
}

/// Summary of a trajectory suitable for the JSON run trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepSummary {
    pub t: usize,
    pub noise_on: bool,
    pub latent_norm: f64,
    pub eps_norm: f64,
    pub noise_norm: f64,
}

impl Trajectory {
    pub fn summaries(&self) -> Vec<StepSummary> {
        let norm = |g: &Grid| g.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.steps
            .iter()
            .map(|s| StepSummary {
                t: s.t,
                noise_on: s.noise_on,
                latent_norm: norm(&s.output.next_latent.data),
                eps_norm: norm(&s.eps),
                noise_norm: norm(&s.output.injected_noise),
            })
            .collect()
    }
}

/// Result of DDIM inversion.
#[derive(Debug, Clone)]
pub struct Inversion {
    pub latent: LatentCode,
    /// `eps[t - 1]` is the estimate used for the step `t - 1 -> t`.
    pub eps: Vec<Grid>,
}

/// A backend, a schedule and a guidance scale.
#[derive(Clone, Copy)]
pub struct Sampler<'a> {
    backend: &'a dyn DenoiserBackend,
    schedule: &'a Schedule,
    guidance_scale: f64,
}

impl<'a> Sampler<'a> {
    /// Plain conditional sampling (guidance scale 1).
    pub fn new(backend: &'a dyn DenoiserBackend, schedule: &'a Schedule) -> Self {
        Self {
            backend,
            schedule,
            guidance_scale: 1.0,
        }
    }

    /// Classifier-free guided sampling; the backend must predict unconditionally
    /// unless `scale == 1`.
    pub fn with_guidance(backend: &'a dyn DenoiserBackend, schedule: &'a Schedule, scale: f64) -> Result<Self> {
        if !(scale >= 0.0) || !scale.is_finite() {
            return Err(Error::InvalidArgument(format!("guidance scale {scale} must be >= 0")));
        }
        if scale != 1.0 && !backend.supports_unconditional() {
            return Err(Error::NoUnconditional);
        }
        Ok(Self {
            backend,
            schedule,
            guidance_scale: scale,
        })
    }

    pub fn schedule(&self) -> &Schedule {
        self.schedule
    }

    pub fn guidance_scale(&self) -> f64 {
        self.guidance_scale
    }

    pub fn epsilon(&self, z: &Grid, t: usize, cond: Option<&PromptEmbedding>) -> Result<Grid> {
        cfg_epsilon(self.backend, z, t, cond, self.guidance_scale)
    }

    /// Runs `t = T..1`. Step `t` injects noise exactly when `t < t_boost`;
    /// the per-step noise seed is derived from `(rng_seed, t)`.
    pub fn sample(
        &self,
        cond: &dyn Conditioning,
        t_boost: usize,
        z_top: &LatentCode,
        rng_seed: u64,
    ) -> Result<Trajectory> {
        let steps = self.schedule.steps();
        if t_boost > steps + 1 {
            return Err(Error::InvalidArgument(format!(
                "t_boost {t_boost} exceeds T + 1 = {}",
                steps + 1
            )));
        }
        if z_top.timestep != steps {
            return Err(Error::InvalidArgument(format!(
                "sampling starts at t = {steps}, latent is at t = {}",
                z_top.timestep
            )));
        }
        let mut records = Vec::with_capacity(steps);
        let mut current = z_top.clone();
        for t in (1..=steps).rev() {
            let condition = cond.condition_at(t);
            let eps = self
                .epsilon(&current.data, t, condition.as_ref())
                .map_err(|e| e.at_step(t))?;
            let noise_on = t < t_boost;
            let output = ddim_step(&current, &eps, self.schedule, noise_on, derive_seed(rng_seed, t as u64))
                .map_err(|e| e.at_step(t))?;
            current = output.next_latent.clone();
            records.push(StepRecord {
                t,
                noise_on,
                eps,
                output,
            });
        }
        Ok(Trajectory {
            start: z_top.clone(),
            steps: records,
        })
    }

    /// Deterministic DDIM inversion `x_0 -> z_T`, reusing the estimate at
    /// `z_{t-1}` for the step to `t`. Requires `eta = 0`.
    pub fn invert(&self, cond: &dyn Conditioning, x0: &Grid) -> Result<Inversion> {
        if self.schedule.eta() != 0.0 {
            return Err(Error::InvalidSchedule(format!(
                "inversion needs eta = 0, schedule has eta = {}",
                self.schedule.eta()
            )));
        }
        check_finite(x0, "image")?;
        let steps = self.schedule.steps();
        let mut z = x0.clone();
        let mut eps_record = Vec::with_capacity(steps);
        for t in 1..=steps {
            let condition = cond.condition_at(t);
            let eps = self
                .epsilon(&z, t, condition.as_ref())
                .map_err(|e| e.at_step(t))?;
            let a_prev = self.schedule.alpha(t - 1);
            let a = self.schedule.alpha(t);
            let (sp, np) = (a_prev.sqrt(), (1.0 - a_prev).sqrt());
            let (sa, na) = (a.sqrt(), (1.0 - a).sqrt());
            z = Zip::from(&z)
                .and(&eps)
                .map_collect(|zv, e| sa * ((zv - np * e) / sp) + na * e);
            check_finite(&z, "inverted latent").map_err(|e| e.at_step(t))?;
            eps_record.push(eps);
        }
        Ok(Inversion {
            latent: LatentCode::new(z, steps)?,
            eps: eps_record,
        })
    }
}
