//! Discrete variance schedule shared by every DDIM step.
//!
//! Diffusion time runs `t = 0..=T`; sampling walks it downwards from `T`.
//! `alphas[t]` is the cumulative signal coefficient (alpha-bar in the DDPM
//! literature), so `z_t = sqrt(alphas[t]) x_0 + sqrt(1 - alphas[t]) eps`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Length of the dense training grid that the sampling steps are drawn from.
pub const TRAIN_STEPS: usize = 1000;

const LINEAR_BETA_START: f64 = 1e-4;
const LINEAR_BETA_END: f64 = 2e-2;
const COSINE_OFFSET: f64 = 0.008;
const COSINE_MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BetaProfile {
    /// Betas linear in `[1e-4, 2e-2]` over the dense grid.
    #[default]
    LinearBeta,
    /// Squared-cosine alpha-bar with the usual 0.008 offset and 0.999 beta cap.
    Cosine,
}

impl std::str::FromStr for BetaProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear-beta" | "linear" => Ok(BetaProfile::LinearBeta),
            "cosine" => Ok(BetaProfile::Cosine),
            other => Err(Error::InvalidArgument(format!("unknown beta profile `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSchedule")]
pub struct Schedule {
    steps: usize,
    alphas: Vec<f64>,
    eta: f64,
    sigmas: Vec<f64>,
}

#[derive(Deserialize)]
struct RawSchedule {
    steps: usize,
    alphas: Vec<f64>,
    eta: f64,
    sigmas: Vec<f64>,
}

impl TryFrom<RawSchedule> for Schedule {
    type Error = Error;

    fn try_from(raw: RawSchedule) -> Result<Self> {
        let schedule = Schedule::from_alphas(raw.alphas, raw.eta)?;
        if schedule.steps != raw.steps || schedule.sigmas.len() != raw.sigmas.len() {
            return Err(Error::InvalidSchedule(
                "step count disagrees with alpha grid".into(),
            ));
        }
        // Keep the stored sigmas verbatim so a round trip is bit-identical.
        Ok(Schedule {
            sigmas: raw.sigmas,
            ..schedule
        })
    }
}

impl Schedule {
    /// Builds a `steps`-point schedule subsampled from the dense training grid.
    pub fn build(steps: usize, profile: BetaProfile, eta: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidSchedule(format!(
                "need at least 2 timesteps, got {steps}"
            )));
        }
        if steps > TRAIN_STEPS {
            return Err(Error::InvalidSchedule(format!(
                "at most {TRAIN_STEPS} timesteps supported, got {steps}"
            )));
        }
        check_eta(eta)?;

        let dense = dense_alpha_bars(profile);
        let mut alphas = Vec::with_capacity(steps + 1);
        alphas.push(1.0);
        for i in 1..=steps {
            let tau = i * TRAIN_STEPS / steps - 1;
            alphas.push(dense[tau]);
        }
        Self::from_alphas(alphas, eta)
    }

    /// Wraps an explicit alpha-bar grid (`alphas[0]` must be 1).
    pub fn from_alphas(alphas: Vec<f64>, eta: f64) -> Result<Self> {
        check_eta(eta)?;
        if alphas.len() < 3 {
            return Err(Error::InvalidSchedule(
                "alpha grid needs at least 3 entries".into(),
            ));
        }
        if alphas[0] != 1.0 {
            return Err(Error::InvalidSchedule(format!(
                "alphas[0] must be 1, got {}",
                alphas[0]
            )));
        }
        for t in 1..alphas.len() {
            if !alphas[t].is_finite() || alphas[t] <= 0.0 {
                return Err(Error::InvalidSchedule(format!(
                    "alphas[{t}] = {} is not positive",
                    alphas[t]
                )));
            }
            if alphas[t] >= alphas[t - 1] {
                return Err(Error::InvalidSchedule(format!(
                    "alphas not strictly decreasing at t={t}"
                )));
            }
        }
        let steps = alphas.len() - 1;
        let sigmas = (1..=steps)
            .map(|t| sigma_for(alphas[t - 1], alphas[t], eta))
            .collect();
        Ok(Schedule {
            steps,
            alphas,
            eta,
            sigmas,
        })
    }

    /// Same alpha grid with a different stochasticity knob.
    pub fn with_eta(&self, eta: f64) -> Result<Self> {
        Self::from_alphas(self.alphas.clone(), eta)
    }

    /// Number of sampling steps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// `sigmas()[t - 1]` is `sigma_t`.
    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    /// `sigma_t` for `t` in `1..=T`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::TimestepOutOfRange {
                t,
                min: 1,
                max: self.steps,
            });
        }
        Ok(())
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidSchedule(format!("eta must lie in [0, 1], got {eta}")));
    }
    Ok(())
}

fn sigma_for(alpha_prev: f64, alpha: f64, eta: f64) -> f64 {
    if eta == 0.0 {
        return 0.0;
    }
    eta * ((1.0 - alpha_prev) / (1.0 - alpha)).sqrt() * (1.0 - alpha / alpha_prev).sqrt()
}

fn dense_alpha_bars(profile: BetaProfile) -> Vec<f64> {
    let betas: Vec<f64> = match profile {
        BetaProfile::LinearBeta => (0..TRAIN_STEPS)
            .map(|i| {
                LINEAR_BETA_START
                    + (LINEAR_BETA_END - LINEAR_BETA_START) * i as f64 / (TRAIN_STEPS - 1) as f64
            })
            .collect(),
        BetaProfile::Cosine => {
            let f = |s: f64| {
                let x = (s / TRAIN_STEPS as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)
                    * std::f64::consts::FRAC_PI_2;
                x.cos().powi(2)
            };
            (0..TRAIN_STEPS)
                .map(|i| (1.0 - f(i as f64 + 1.0) / f(i as f64)).min(COSINE_MAX_BETA))
                .collect()
        }
    };
    betas
        .iter()
        .scan(1.0, |acc, beta| {
            *acc *= 1.0 - beta;
            Some(*acc)
        })
        .collect()
}
