//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::OnceLock;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use stagediff::denoiser::{train_toy_denoiser, Decoder, Grid, ToyDenoiser, TrainOptions};
use stagediff::objective::{BoxPyramid, LinearJointEncoder};
use stagediff::pipeline::benchmark::{generate, BlobClass, EditCase, Intensity, Position};
use stagediff::pipeline::{EditInputs, EditSettings, EncoderConfig};
use stagediff::promptmix::{HashedTokenizer, PromptEmbedding};
use stagediff::schedule::{BetaProfile, Schedule};

pub const SIZE: usize = 8;
pub const STEPS: usize = 50;
/// Guidance and stochasticity used for the blob benchmark edits. Scale 5
/// diverges on the toy denoiser (see README).
pub const BENCH_CFG: f64 = 2.0;
pub const BENCH_ETA: f64 = 0.15;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_grid(shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Grid {
    Array3::from_shape_simple_fn(shape, || normal(rng))
}

pub fn random_matrix(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || normal(rng))
}

pub fn embedding(m: Array2<f64>) -> PromptEmbedding {
    let tokens = (0..m.nrows()).map(|i| format!("tok{i}")).collect();
    PromptEmbedding::new(tokens, m).unwrap()
}

pub fn schedule() -> Schedule {
    Schedule::build(STEPS, BetaProfile::LinearBeta, 0.0).unwrap()
}

pub fn tokenizer() -> HashedTokenizer {
    HashedTokenizer::new(16, 0)
}

/// The toy denoiser trained once per test binary.
pub fn toy_model() -> &'static ToyDenoiser {
    static MODEL: OnceLock<ToyDenoiser> = OnceLock::new();
    MODEL.get_or_init(|| {
        let tok = tokenizer();
        let data = generate(SIZE, 512, 11).unwrap();
        let conds: BTreeMap<_, _> = BlobClass::ALL
            .iter()
            .map(|c| (c.prompt(), tok.encode(&c.prompt()).unwrap()))
            .collect();
        train_toy_denoiser(&data, &conds, &schedule(), &TrainOptions::default()).unwrap()
    })
}

pub struct Encoders {
    pub main: LinearJointEncoder,
    pub alt: LinearJointEncoder,
    pub perceptual: BoxPyramid,
}

pub fn encoders() -> &'static Encoders {
    static ENC: OnceLock<Encoders> = OnceLock::new();
    ENC.get_or_init(|| {
        let tok = tokenizer();
        let cfg = EncoderConfig::default();
        Encoders {
            main: cfg.build([1, SIZE, SIZE], &tok).unwrap(),
            alt: cfg.build_alt([1, SIZE, SIZE], &tok).unwrap(),
            perceptual: BoxPyramid::default(),
        }
    })
}

pub fn case_inputs(case: &EditCase) -> EditInputs<'static> {
    let tok = tokenizer();
    let enc = encoders();
    EditInputs {
        backend: toy_model(),
        decoder: Decoder::Identity,
        source: case.source.clone(),
        source_prompt: tok.encode(&case.source_class.prompt()).unwrap(),
        target_prompt: tok.encode(&case.target_class.prompt()).unwrap(),
        encoder: &enc.main,
        alt_encoder: &enc.alt,
        perceptual: &enc.perceptual,
        target_reference: Some(case.target_reference.clone()),
        mask: Some(case.mask.clone()),
    }
}

pub fn bench_settings(seed: u64) -> EditSettings {
    let mut s = EditSettings::new(schedule().with_eta(BENCH_ETA).unwrap(), seed);
    s.cfg_scale = BENCH_CFG;
    s
}

/// Every one-attribute edit of every class: flip the position or the intensity.
pub fn one_attribute_edits() -> Vec<(BlobClass, BlobClass)> {
    let mut out = Vec::new();
    for c in BlobClass::ALL {
        let moved = match c.position {
            Position::Left => Position::Right,
            Position::Right => Position::Left,
        };
        let toned = match c.intensity {
            Intensity::Bright => Intensity::Dim,
            Intensity::Dim => Intensity::Bright,
        };
        out.push((c, BlobClass::new(moved, c.intensity)));
        out.push((c, BlobClass::new(c.position, toned)));
    }
    out
}

/// High-frequency energy ratio by direct DFT summation.
pub fn naive_high_freq_energy(image: &Grid, radius_fraction: f64) -> f64 {
    let (c, h, w) = image.dim();
    let mut acc = 0.0;
    for ch in 0..c {
        let (mut total, mut high) = (0.0, 0.0);
        for u in 0..h {
            for v in 0..w {
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..h {
                    for x in 0..w {
                        let phase = -2.0 * PI * (u as f64 * y as f64 / h as f64 + v as f64 * x as f64 / w as f64);
                        re += image[[ch, y, x]] * phase.cos();
                        im += image[[ch, y, x]] * phase.sin();
                    }
                }
                let p = re * re + im * im;
                // Signed frequency of bin u, with the Nyquist bin at -N/2.
                let signed = |k: usize, n: usize| if k >= n.div_ceil(2) { k as f64 - n as f64 } else { k as f64 };
                let fy = signed(u, h) / (h as f64 / 2.0);
                let fx = signed(v, w) / (w as f64 / 2.0);
                total += p;
                if (fy * fy + fx * fx).sqrt() > radius_fraction {
                    high += p;
                }
            }
        }
        if total > 0.0 {
            acc += high / total;
        }
    }
    acc / c as f64
}

pub fn oracle_quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (v.len() - 1) as f64;
    let i = pos as usize;
    if i + 1 >= v.len() {
        return v[v.len() - 1];
    }
    v[i] * (1.0 - (pos - i as f64)) + v[i + 1] * (pos - i as f64)
}

/// Scans every candidate boundary pair satisfying the window definitions and
/// keeps the smallest `t_edit` and largest `t_boost`, with the fixed-fraction
/// fallbacks for empty windows. Returns `(t_edit, t_boost, edit_fallback, boost_fallback)`.
pub fn exhaustive_stages(freq: &[f64], grad: &[f64], fq: f64, gq: f64) -> (usize, usize, bool, bool) {
    let steps = freq.len();
    let fcut = oracle_quantile(freq, fq);
    let gcut = oracle_quantile(grad, gq);
    let mut pairs = Vec::new();
    for te in 1..=steps {
        for tb in 2..=steps + 1 {
            let edit_ok = (te..=steps).all(|t| freq[t - 1] >= fcut);
            let boost_ok = (1..tb).all(|t| grad[t - 1] <= gcut);
            pairs.push((te, tb, edit_ok, boost_ok));
        }
    }
    let te = pairs.iter().filter(|p| p.2).map(|p| p.0).min();
    let tb = pairs.iter().filter(|p| p.3).map(|p| p.1).max();
    let te_final = te.unwrap_or((0.6 * steps as f64).round() as usize);
    let tb_final = tb.unwrap_or((0.4 * steps as f64).round() as usize);
    (te_final, tb_final.min(te_final), te.is_none(), tb.is_none())
}

pub fn triple_loop_covariance(m: &Array2<f64>) -> Array2<f64> {
    let (n, d) = m.dim();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..d {
                s += m[[i, k]] * m[[j, k]];
            }
            out[[i, j]] = s / (n - 1) as f64;
        }
    }
    out
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}
