use ndarray::Array3;
use rand::Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{check_finite, grid_shape, DenoiserBackend, Grid};
use crate::error::{Error, Result};
use crate::promptmix::PromptEmbedding;
use crate::schedule::Schedule;

/// Isotropic Gaussian mixture over flattened grids, the data distribution
/// whose noised marginals have a closed-form score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixtureWorld {
    pub means: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub variance: f64,
}

impl GaussianMixtureWorld {
    pub fn new(means: Vec<Vec<f64>>, weights: Vec<f64>, variance: f64) -> Result<Self> {
        let world = Self {
            means,
            weights,
            variance,
        };
        world.validate()?;
        Ok(world)
    }

    pub fn validate(&self) -> Result<()> {
        if self.means.is_empty() {
            return Err(Error::InvalidArgument("mixture needs at least one component".into()));
        }
        if self.weights.len() != self.means.len() {
            return Err(Error::InvalidArgument(format!(
                "{} weights for {} means",
                self.weights.len(),
                self.means.len()
            )));
        }
        let dim = self.means[0].len();
        if dim == 0 || self.means.iter().any(|m| m.len() != dim) {
            return Err(Error::InvalidArgument("mixture means must share a nonzero dimension".into()));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidArgument("mixture weights must be nonnegative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("mixture weights sum to {total}")));
        }
        if !(self.variance > 0.0) || !self.variance.is_finite() {
            return Err(Error::InvalidArgument("mixture variance must be positive".into()));
        }
        if self.means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("mixture means must be finite".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Draws one clean sample `x_0` from the mixture.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let k = WeightedIndex::new(&self.weights)
            .expect("validated weights")
            .sample(rng);
        let sd = self.variance.sqrt();
        self.means[k]
            .iter()
            .map(|m| {
                let n: f64 = StandardNormal.sample(rng);
                m + sd * n
            })
            .collect()
    }
}

/// Exact `eps = -sqrt(1 - alpha) * grad log p_alpha(z)` for the mixture noised
/// to signal level `alpha`.
///
/// The noised marginal is `sum_k w_k N(sqrt(alpha) m_k, s2 I)` with
/// `s2 = alpha v + 1 - alpha`, so `eps = sqrt(1 - alpha) sum_k r_k (z - sqrt(alpha) m_k) / s2`
/// where `r_k` are the posterior component responsibilities.
pub fn analytic_epsilon(world: &GaussianMixtureWorld, alpha: f64, z: &[f64]) -> Result<Vec<f64>> {
    if z.len() != world.dim() {
        return Err(Error::ShapeMismatch {
            expected: vec![world.dim()],
            found: vec![z.len()],
        });
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("latent"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "signal level {alpha} leaves no noise to predict"
        )));
    }
    let sqrt_alpha = alpha.sqrt();
    let s2 = alpha * world.variance + 1.0 - alpha;

    let log_r: Vec<f64> = world
        .means
        .iter()
        .zip(&world.weights)
        .map(|(m, &w)| {
            let d2: f64 = z
                .iter()
                .zip(m)
                .map(|(zi, mi)| (zi - sqrt_alpha * mi).powi(2))
                .sum();
            w.ln() - 0.5 * d2 / s2
        })
        .collect();
    let max = log_r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = log_r.iter().map(|l| (l - max).exp()).collect();
    let norm: f64 = unnorm.iter().sum();

    let scale = (1.0 - alpha).sqrt() / s2;
    let mut eps = vec![0.0; z.len()];
    for (m, u) in world.means.iter().zip(&unnorm) {
        let r = u / norm;
        if r == 0.0 {
            continue;
        }
        for ((e, zi), mi) in eps.iter_mut().zip(z).zip(m) {
            *e += r * scale * (zi - sqrt_alpha * mi);
        }
    }
    Ok(eps)
}

/// Oracle backend returning the exact noise for a [`GaussianMixtureWorld`].
/// Conditioning is ignored.
#[derive(Debug, Clone)]
pub struct AnalyticDenoiser {
    world: GaussianMixtureWorld,
    schedule: Schedule,
    shape: [usize; 3],
}

impl AnalyticDenoiser {
    pub fn new(world: GaussianMixtureWorld, schedule: Schedule, shape: [usize; 3]) -> Result<Self> {
        world.validate()?;
        if shape.iter().product::<usize>() != world.dim() {
            return Err(Error::ShapeMismatch {
                expected: vec![world.dim()],
                found: shape.to_vec(),
            });
        }
        Ok(Self {
            world,
            schedule,
            shape,
        })
    }

    pub fn world(&self) -> &GaussianMixtureWorld {
        &self.world
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }
}

impl DenoiserBackend for AnalyticDenoiser {
    fn predict(&self, z: &Grid, t: usize, _cond: Option<&PromptEmbedding>) -> Result<Grid> {
        self.schedule.check_step(t)?;
        if grid_shape(z) != self.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.to_vec(),
                found: z.shape().to_vec(),
            });
        }
        check_finite(z, "latent")?;
        let flat: Vec<f64> = z.iter().copied().collect();
        let eps = analytic_epsilon(&self.world, self.schedule.alpha(t), &flat)?;
        Ok(Array3::from_shape_vec(self.shape, eps).expect("shape checked"))
    }

    fn latent_shape(&self) -> Option<[usize; 3]> {
        Some(self.shape)
    }

    fn alphas(&self) -> Option<&[f64]> {
        Some(self.schedule.alphas())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::BetaProfile;

    fn single(mean: f64, variance: f64, dim: usize) -> GaussianMixtureWorld {
        GaussianMixtureWorld::new(vec![vec![mean; dim]], vec![1.0], variance).unwrap()
    }

    #[test]
    fn single_gaussian_is_linear() {
        // For N(0, v): eps(z) = z sqrt(1 - a) / (1 - a + a v).
        let world = single(0.0, 0.3, 3);
        for &alpha in &[0.9, 0.5, 0.01] {
            let z = [0.4, -1.2, 2.5];
            let eps = analytic_epsilon(&world, alpha, &z).unwrap();
            for (e, zi) in eps.iter().zip(&z) {
                let expected = zi * (1.0 - alpha).sqrt() / (1.0 - alpha + alpha * 0.3);
                assert!((e - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn mode_of_nearly_clean_marginal_has_no_noise() {
        let world = single(0.7, 1.0, 4);
        let alpha: f64 = 1.0 - 1e-10;
        let z = vec![0.7 * alpha.sqrt(); 4];
        let eps = analytic_epsilon(&world, alpha, &z).unwrap();
        assert!(eps.iter().all(|e| e.abs() < 1e-12));
    }

    #[test]
    fn symmetric_pair_vanishes_at_midpoint() {
        let world =
            GaussianMixtureWorld::new(vec![vec![1.5, -0.5], vec![-1.5, 0.5]], vec![0.5, 0.5], 0.2).unwrap();
        let eps = analytic_epsilon(&world, 0.4, &[0.0, 0.0]).unwrap();
        assert!(eps.iter().all(|e| e.abs() < 1e-15));
    }

    #[test]
    fn epsilon_matches_finite_difference_score() {
        let world = GaussianMixtureWorld::new(
            vec![vec![1.0, 0.0], vec![-0.5, 0.8], vec![0.2, -1.0]],
            vec![0.2, 0.5, 0.3],
            0.15,
        )
        .unwrap();
        let alpha: f64 = 0.6;
        let s2 = alpha * world.variance + 1.0 - alpha;
        let log_p = |z: &[f64]| -> f64 {
            world
                .means
                .iter()
                .zip(&world.weights)
                .map(|(m, w)| {
                    let d2: f64 = z.iter().zip(m).map(|(a, b)| (a - alpha.sqrt() * b).powi(2)).sum();
                    w * (-0.5 * d2 / s2).exp()
                })
                .sum::<f64>()
                .ln()
        };
        let z = [0.3, -0.2];
        let eps = analytic_epsilon(&world, alpha, &z).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            let mut zp = z;
            let mut zm = z;
            zp[i] += h;
            zm[i] -= h;
            let score = (log_p(&zp) - log_p(&zm)) / (2.0 * h);
            let expected = -(1.0 - alpha).sqrt() * score;
            assert!((eps[i] - expected).abs() < 1e-7, "{} vs {}", eps[i], expected);
        }
    }

    #[test]
    fn backend_rejects_t_zero_and_nan() {
        let schedule = Schedule::build(10, BetaProfile::LinearBeta, 0.0).unwrap();
        let den = AnalyticDenoiser::new(single(0.0, 1.0, 4), schedule, [1, 2, 2]).unwrap();
        let z = Array3::zeros((1, 2, 2));
        assert!(matches!(den.predict(&z, 0, None), Err(Error::TimestepOutOfRange { .. })));
        let mut bad = z.clone();
        bad[[0, 0, 0]] = f64::INFINITY;
        assert!(den.predict(&bad, 3, None).is_err());
        assert_eq!(den.predict(&z, 3, None).unwrap().shape(), z.shape());
    }

    #[test]
    fn world_validation() {
        assert!(GaussianMixtureWorld::new(vec![], vec![], 1.0).is_err());
        assert!(GaussianMixtureWorld::new(vec![vec![0.0]], vec![0.9], 1.0).is_err());
        assert!(GaussianMixtureWorld::new(vec![vec![0.0]], vec![1.0], 0.0).is_err());
        assert!(GaussianMixtureWorld::new(vec![vec![0.0], vec![0.0, 1.0]], vec![0.5, 0.5], 1.0).is_err());
    }
}
