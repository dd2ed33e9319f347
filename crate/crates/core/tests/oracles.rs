//! Library results checked against independently coded references.

mod common;

use ndarray::{Array2, Array3};
use rand::Rng;

use common::*;
use stagediff::denoiser::{analytic_epsilon, AnalyticDenoiser, DenoiserBackend, GaussianMixtureWorld, Grid, LatentCode};
use stagediff::promptmix::{covariance, PromptEmbedding};
use stagediff::sampler::{cfg_epsilon, Sampler, Unconditional};
use stagediff::schedule::{BetaProfile, Schedule};
use stagediff::stagefinder::{high_freq_energy, noise_gradient_trace, plan_from_traces, GradientMetric};

#[test]
fn spectrum_matches_direct_dft_on_odd_and_multichannel_grids() {
    let mut r = rng(21);
    for shape in [(1, 8, 8), (3, 7, 9), (2, 4, 6), (1, 5, 5)] {
        for radius in [0.25, 0.5, 0.9] {
            let g = random_grid(shape, &mut r);
            let fast = high_freq_energy(&g, radius).unwrap();
            let slow = naive_high_freq_energy(&g, radius);
            assert!((fast - slow).abs() < 1e-9, "{shape:?} r={radius}: {fast} vs {slow}");
        }
    }
}

#[test]
fn covariance_matches_loops() {
    let mut r = rng(22);
    for (n, d) in [(2, 3), (5, 16), (9, 4)] {
        let m = random_matrix(n, d, &mut r);
        let e = embedding(m.clone());
        let fast = covariance(&e, false).unwrap();
        let slow = triple_loop_covariance(&m);
        assert!((&fast - &slow).iter().all(|v| v.abs() < 1e-12));

        // Centered form: each row is a variable observed over the d columns.
        let centered = covariance(&e, true).unwrap();
        for i in 0..n {
            for j in 0..n {
                let (mi, mj) = (m.row(i).mean().unwrap(), m.row(j).mean().unwrap());
                let s: f64 = (0..d).map(|k| (m[[i, k]] - mi) * (m[[j, k]] - mj)).sum();
                assert!((centered[[i, j]] - s / (d - 1) as f64).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn single_gaussian_epsilon_matches_posterior_mean() {
    // eps = (z - sqrt(a) E[x0 | z]) / sqrt(1 - a) with the Gaussian posterior mean.
    let mut r = rng(23);
    for _ in 0..50 {
        let m: Vec<f64> = (0..3).map(|_| normal(&mut r)).collect();
        let v = r.random_range(0.05..2.0);
        let a = r.random_range(0.01..0.99);
        let world = GaussianMixtureWorld::new(vec![m.clone()], vec![1.0], v).unwrap();
        let z: Vec<f64> = (0..3).map(|_| 2.0 * normal(&mut r)).collect();
        let eps = analytic_epsilon(&world, a, &z).unwrap();
        let gain = a.sqrt() * v / (a * v + 1.0 - a);
        for i in 0..3 {
            let post = m[i] + gain * (z[i] - a.sqrt() * m[i]);
            let want = (z[i] - a.sqrt() * post) / (1.0 - a).sqrt();
            assert!((eps[i] - want).abs() < 1e-10);
        }
    }
}

fn mixture_log_density(world: &GaussianMixtureWorld, a: f64, z: &[f64]) -> f64 {
    let s2 = a * world.variance + 1.0 - a;
    let d = z.len() as f64;
    world
        .means
        .iter()
        .zip(&world.weights)
        .map(|(m, w)| {
            let q: f64 = z.iter().zip(m).map(|(zi, mi)| (zi - a.sqrt() * mi).powi(2)).sum();
            w * (-0.5 * q / s2).exp() / (2.0 * std::f64::consts::PI * s2).powf(d / 2.0)
        })
        .sum::<f64>()
        .ln()
}

#[test]
fn mixture_epsilon_is_scaled_negative_score() {
    // eps = -sqrt(1 - a) grad log p_a(z), with the gradient by central differences.
    let world = GaussianMixtureWorld::new(
        vec![vec![1.0, -0.5], vec![-1.0, 0.5], vec![0.2, 1.2]],
        vec![0.3, 0.5, 0.2],
        0.15,
    )
    .unwrap();
    let mut r = rng(24);
    for _ in 0..40 {
        let a = r.random_range(0.05..0.95);
        let z = vec![normal(&mut r), normal(&mut r)];
        let eps = analytic_epsilon(&world, a, &z).unwrap();
        let h = 1e-5;
        for i in 0..2 {
            let (mut up, mut down) = (z.clone(), z.clone());
            up[i] += h;
            down[i] -= h;
            let g = (mixture_log_density(&world, a, &up) - mixture_log_density(&world, a, &down)) / (2.0 * h);
            assert!((eps[i] + (1.0 - a).sqrt() * g).abs() < 1e-6, "{} vs {}", eps[i], -(1.0 - a).sqrt() * g);
        }
    }
}

/// Unit-variance world with mean `m`: the deviation `z_t - sqrt(a_t) m` shrinks by
/// `cos(theta_t - theta_{t-1})` per deterministic step, `theta = acos(sqrt(a))`.
fn closed_form_deviation(schedule: &Schedule, t: usize, top: f64) -> f64 {
    let theta = |s: usize| schedule.alpha(s).sqrt().acos();
    let shrink: f64 = (t + 1..=schedule.steps()).map(|s| (theta(s) - theta(s - 1)).cos()).product();
    top * shrink
}

#[test]
fn deterministic_trajectory_matches_closed_form() {
    let mean = vec![0.7, -0.3, 0.0, 1.1];
    let world = GaussianMixtureWorld::new(vec![mean.clone()], vec![1.0], 1.0).unwrap();
    for profile in [BetaProfile::LinearBeta, BetaProfile::Cosine] {
        let schedule = Schedule::build(STEPS, profile, 0.0).unwrap();
        let backend = AnalyticDenoiser::new(world.clone(), schedule.clone(), [1, 2, 2]).unwrap();
        let sampler = Sampler::new(&backend, &schedule);
        let mut r = rng(25);
        let top = random_grid((1, 2, 2), &mut r);
        let traj = sampler.sample(&Unconditional, 0, &LatentCode::new(top.clone(), STEPS).unwrap(), 0).unwrap();
        let a_top = schedule.alpha(STEPS).sqrt();
        for rec in &traj.steps {
            let t = rec.t - 1;
            let a = schedule.alpha(t).sqrt();
            for (i, v) in rec.output.next_latent.data.iter().enumerate() {
                let want = a * mean[i] + closed_form_deviation(&schedule, t, top.as_slice().unwrap()[i] - a_top * mean[i]);
                assert!((v - want).abs() < 1e-4, "{profile:?} t={t}: {v} vs {want}");
            }
        }
    }
}

#[test]
fn temporal_gradient_trace_matches_closed_form() {
    // Mean-zero unit-variance world: eps_t = sqrt(1 - a_t) z_t along the closed-form path.
    let world = GaussianMixtureWorld::new(vec![vec![0.0; 4]], vec![1.0], 1.0).unwrap();
    let schedule = schedule();
    let backend = AnalyticDenoiser::new(world, schedule.clone(), [1, 2, 2]).unwrap();
    let sampler = Sampler::new(&backend, &schedule);
    let top = random_grid((1, 2, 2), &mut rng(26));
    let traj = sampler.sample(&Unconditional, 0, &LatentCode::new(top.clone(), STEPS).unwrap(), 0).unwrap();
    let trace = noise_gradient_trace(&traj.eps_record(), GradientMetric::Temporal).unwrap();
    let eps_at = |t: usize| -> Vec<f64> {
        let s = (1.0 - schedule.alpha(t)).sqrt();
        top.iter().map(|z| s * closed_form_deviation(&schedule, t, *z)).collect()
    };
    for t in 1..STEPS {
        let (a, b) = (eps_at(t), eps_at(t + 1));
        let want = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt() / 4.0;
        assert!((trace[t - 1] - want).abs() < 1e-6, "t={t}: {} vs {want}", trace[t - 1]);
    }
    assert_eq!(trace[STEPS - 1], trace[STEPS - 2]);
}

#[test]
fn stage_plans_match_exhaustive_scan_on_step_traces() {
    let mut r = rng(27);
    for _ in 0..300 {
        let steps = r.random_range(2..=40);
        // Few distinct levels, so quantile cuts often coincide with trace values.
        let levels: Vec<f64> = (0..3).map(|_| r.random_range(0.0..1.0)).collect();
        let freq: Vec<f64> = (0..steps).map(|_| levels[r.random_range(0..3)]).collect();
        let grad: Vec<f64> = (0..steps).map(|_| levels[r.random_range(0..3)]).collect();
        let (fq, gq) = (r.random_range(0.0..=1.0), r.random_range(0.0..=1.0));
        let plan = plan_from_traces(freq.clone(), grad.clone(), fq, gq).unwrap();
        assert_eq!(
            (plan.t_edit, plan.t_boost, plan.edit_fallback, plan.boost_fallback),
            exhaustive_stages(&freq, &grad, fq, gq),
            "freq {freq:?} grad {grad:?} fq {fq} gq {gq}"
        );
    }
}

/// A conditional backend whose two predictions are simple known functions.
struct Affine;

impl DenoiserBackend for Affine {
    fn predict(&self, z: &Grid, t: usize, cond: Option<&PromptEmbedding>) -> stagediff::Result<Grid> {
        Ok(match cond {
            None => z * (t as f64 / 10.0),
            Some(c) => z.mapv(|v| v.sin()) + c.matrix().sum(),
        })
    }
}

#[test]
fn guidance_matches_hand_combination() {
    let mut r = rng(28);
    let cond = embedding(random_matrix(3, 4, &mut r));
    for scale in [0.0, 0.5, 1.0, 5.0, 7.5] {
        let z = random_grid((1, 3, 3), &mut r);
        let got = cfg_epsilon(&Affine, &z, 7, Some(&cond), scale).unwrap();
        let shift = cond.matrix().sum();
        let want: Array3<f64> = z.mapv(|v| {
            let u = v * 0.7;
            u + scale * (v.sin() + shift - u)
        });
        assert!((&got - &want).iter().all(|d| d.abs() < 1e-12), "scale {scale}");
    }
}

#[test]
fn toy_guidance_is_affine_in_scale() {
    let model = toy_model();
    let tok = tokenizer();
    let cond = tok.encode("a dim blob on the right").unwrap();
    let z = random_grid((1, SIZE, SIZE), &mut rng(29));
    let at = |s: f64| cfg_epsilon(model, &z, 30, Some(&cond), s).unwrap();
    let (u, c, five) = (at(0.0), at(1.0), at(5.0));
    let want: Array2<f64> = (&u + &((&c - &u) * 5.0)).index_axis_move(ndarray::Axis(0), 0);
    let got = five.index_axis_move(ndarray::Axis(0), 0);
    assert!((&got - &want).iter().all(|d| d.abs() < 1e-10));
}
