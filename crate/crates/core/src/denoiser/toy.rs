//! A small conditional MLP noise predictor trained from scratch.
//!
//! Architecture: two SiLU hidden layers. Noise-level features and a learned
//! projection of the mean-pooled prompt embedding are added to both hidden
//! pre-activations. The unconditional branch uses a zero condition vector and
//! is trained by condition dropout.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{check_finite, grid_shape, DenoiserBackend, Grid};
use crate::error::{Error, Result};
use crate::promptmix::PromptEmbedding;
use crate::schedule::Schedule;

const LOG_SNR_FREQS: [f64; 7] = [0.05, 0.1, 0.2, 0.4, 0.8, 1.6, 3.2];
const TIME_FEATURES: usize = 2 + 2 * LOG_SNR_FREQS.len();

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub seed: u64,
    pub hidden: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probability of replacing the condition with the null condition.
    pub cond_dropout: f64,
    /// Probability of scaling each prompt row by an independent weight drawn
    /// from `[reweight_floor, 1]` before pooling.
    #[serde(default = "default_token_reweight")]
    pub token_reweight: f64,
    #[serde(default = "default_reweight_floor")]
    pub reweight_floor: f64,
}

fn default_token_reweight() -> f64 {
    0.5
}

fn default_reweight_floor() -> f64 {
    0.1
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 200,
            seed: 0,
            hidden: 128,
            batch_size: 32,
            learning_rate: 2e-3,
            cond_dropout: 0.1,
            token_reweight: default_token_reweight(),
            reweight_floor: default_reweight_floor(),
        }
    }
}

/// One clean training image and the label selecting its prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: Grid,
    pub label: String,
}

/// Sidecar describing a persisted weight file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyMetadata {
    pub input_shape: [usize; 3],
    pub hidden: usize,
    pub time_features: usize,
    pub cond_dim: usize,
    pub seed: u64,
    pub epochs: usize,
    pub final_loss: f64,
    pub loss_history: Vec<f64>,
    pub schedule: Schedule,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone)]
struct Layout {
    entries: Vec<(&'static str, Vec<usize>, usize)>,
    total: usize,
}

impl Layout {
    fn new(input: usize, hidden: usize, cond: usize) -> Self {
        let shapes: [(&'static str, Vec<usize>); 10] = [
            ("w1", vec![hidden, input]),
            ("wt1", vec![hidden, TIME_FEATURES]),
            ("wc1", vec![hidden, cond]),
            ("b1", vec![hidden]),
            ("w2", vec![hidden, hidden]),
            ("wt2", vec![hidden, TIME_FEATURES]),
            ("wc2", vec![hidden, cond]),
            ("b2", vec![hidden]),
            ("w3", vec![input, hidden]),
            ("b3", vec![input]),
        ];
        let mut offset = 0;
        let mut entries = Vec::with_capacity(shapes.len());
        for (name, shape) in shapes {
            let len = shape.iter().product::<usize>();
            entries.push((name, shape, offset));
            offset += len;
        }
        Layout {
            entries,
            total: offset,
        }
    }

    fn range(&self, idx: usize) -> std::ops::Range<usize> {
        let (_, shape, off) = &self.entries[idx];
        *off..off + shape.iter().product::<usize>()
    }

    fn mat<'a>(&self, buf: &'a [f64], idx: usize) -> ArrayView2<'a, f64> {
        let shape = &self.entries[idx].1;
        ArrayView2::from_shape((shape[0], shape[1]), &buf[self.range(idx)]).expect("layout")
    }

    fn vec<'a>(&self, buf: &'a [f64], idx: usize) -> ArrayView1<'a, f64> {
        ArrayView1::from(&buf[self.range(idx)])
    }
}

// Tensor indices into `Layout::entries`.
const W1: usize = 0;
const WT1: usize = 1;
const WC1: usize = 2;
const B1: usize = 3;
const W2: usize = 4;
const WT2: usize = 5;
const WC2: usize = 6;
const B2: usize = 7;
const W3: usize = 8;
const B3: usize = 9;

/// Trained (or freshly initialised) conditional MLP denoiser.
#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    layout: Layout,
    params: Vec<f64>,
    shape: [usize; 3],
    hidden: usize,
    cond_dim: usize,
    schedule: Schedule,
    seed: u64,
    epochs: usize,
    loss_history: Vec<f64>,
}

struct Activations {
    a1: Array2<f64>,
    h1: Array2<f64>,
    a2: Array2<f64>,
    h2: Array2<f64>,
    out: Array2<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn time_features(alpha: f64) -> [f64; TIME_FEATURES] {
    let mut f = [0.0; TIME_FEATURES];
    f[0] = alpha.sqrt();
    f[1] = (1.0 - alpha).sqrt();
    let log_snr = (alpha / (1.0 - alpha)).ln();
    for (k, w) in LOG_SNR_FREQS.iter().enumerate() {
        f[2 + 2 * k] = (w * log_snr).sin();
        f[3 + 2 * k] = (w * log_snr).cos();
    }
    f
}

impl ToyDenoiser {
    fn init(shape: [usize; 3], hidden: usize, cond_dim: usize, schedule: Schedule, seed: u64) -> Self {
        let input = shape.iter().product();
        let layout = Layout::new(input, hidden, cond_dim);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for idx in [W1, WT1, WC1, W2, WT2, WC2] {
            let fan_in = layout.entries[idx].1[1] as f64;
            let scale = (1.0 / fan_in).sqrt();
            for p in &mut params[layout.range(idx)] {
                let n: f64 = StandardNormal.sample(&mut rng);
                *p = scale * n;
            }
        }
        // Output layer starts at zero so the untrained model predicts eps = 0.
        Self {
            layout,
            params,
            shape,
            hidden,
            cond_dim,
            schedule,
            seed,
            epochs: 0,
            loss_history: Vec::new(),
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    /// Mean training loss of the last epoch (or of the evaluation pass when
    /// trained for zero epochs).
    pub fn final_loss(&self) -> f64 {
        self.loss_history.last().copied().unwrap_or(f64::NAN)
    }

    pub fn loss_history(&self) -> &[f64] {
        &self.loss_history
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    fn forward(&self, x: &Array2<f64>, tf: &Array2<f64>, cf: &Array2<f64>) -> Activations {
        let l = &self.layout;
        let p = &self.params;
        let mut a1 = x.dot(&l.mat(p, W1).t()) + tf.dot(&l.mat(p, WT1).t()) + cf.dot(&l.mat(p, WC1).t());
        a1 += &l.vec(p, B1);
        let h1 = a1.mapv(silu);
        let mut a2 = h1.dot(&l.mat(p, W2).t()) + tf.dot(&l.mat(p, WT2).t()) + cf.dot(&l.mat(p, WC2).t());
        a2 += &l.vec(p, B2);
        let h2 = a2.mapv(silu);
        let mut out = h2.dot(&l.mat(p, W3).t());
        out += &l.vec(p, B3);
        Activations { a1, h1, a2, h2, out }
    }

    /// Returns the batch MSE and writes parameter gradients into `grad`.
    fn backward(
        &self,
        x: &Array2<f64>,
        tf: &Array2<f64>,
        cf: &Array2<f64>,
        target: &Array2<f64>,
        grad: &mut [f64],
    ) -> f64 {
        let l = &self.layout;
        let p = &self.params;
        let act = self.forward(x, tf, cf);
        let diff = &act.out - target;
        let count = diff.len() as f64;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / count;
        let dout = diff * (2.0 / count);

        let mut put = |idx: usize, values: &[f64]| {
            grad[l.range(idx)].copy_from_slice(values);
        };
        let dw3 = dout.t().dot(&act.h2);
        put(W3, dw3.as_standard_layout().as_slice().unwrap());
        put(B3, dout.sum_axis(Axis(0)).as_slice().unwrap());

        let mut da2 = dout.dot(&l.mat(p, W3));
        da2.zip_mut_with(&act.a2, |g, &a| *g *= silu_grad(a));
        put(W2, da2.t().dot(&act.h1).as_standard_layout().as_slice().unwrap());
        put(WT2, da2.t().dot(tf).as_standard_layout().as_slice().unwrap());
        put(WC2, da2.t().dot(cf).as_standard_layout().as_slice().unwrap());
        put(B2, da2.sum_axis(Axis(0)).as_slice().unwrap());

        let mut da1 = da2.dot(&l.mat(p, W2));
        da1.zip_mut_with(&act.a1, |g, &a| *g *= silu_grad(a));
        put(W1, da1.t().dot(x).as_standard_layout().as_slice().unwrap());
        put(WT1, da1.t().dot(tf).as_standard_layout().as_slice().unwrap());
        put(WC1, da1.t().dot(cf).as_standard_layout().as_slice().unwrap());
        put(B1, da1.sum_axis(Axis(0)).as_slice().unwrap());
        loss
    }

    fn cond_vector(&self, cond: Option<&PromptEmbedding>) -> Result<Array1<f64>> {
        match cond {
            None => Ok(Array1::zeros(self.cond_dim)),
            Some(c) => {
                if c.dims() != self.cond_dim {
                    return Err(Error::ShapeMismatch {
                        expected: vec![self.cond_dim],
                        found: vec![c.dims()],
                    });
                }
                Ok(c.pooled())
            }
        }
    }

    /// Writes the flat little-endian weights to `path` and the JSON sidecar
    /// next to it (same stem, `.json` extension).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.params.len() * 8);
        for p in &self.params {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        fs::write(path, bytes)?;
        let meta = self.metadata();
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta: ToyMetadata = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
        if meta.time_features != TIME_FEATURES {
            return Err(Error::parse(
                path.display().to_string(),
                format!("expected {TIME_FEATURES} time features, sidecar says {}", meta.time_features),
            ));
        }
        let bytes = fs::read(path)?;
        let mut model = Self::init(meta.input_shape, meta.hidden, meta.cond_dim, meta.schedule.clone(), meta.seed);
        let expected_tensors: Vec<TensorEntry> = model.tensor_entries();
        if expected_tensors != meta.tensors {
            return Err(Error::parse(path.display().to_string(), "tensor layout mismatch"));
        }
        if bytes.len() != model.params.len() * 8 {
            return Err(Error::parse(
                path.display().to_string(),
                format!("expected {} bytes, found {}", model.params.len() * 8, bytes.len()),
            ));
        }
        for (p, chunk) in model.params.iter_mut().zip(bytes.chunks_exact(8)) {
            *p = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        if model.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("stored weights"));
        }
        model.epochs = meta.epochs;
        model.loss_history = meta.loss_history;
        Ok(model)
    }

    fn tensor_entries(&self) -> Vec<TensorEntry> {
        self.layout
            .entries
            .iter()
            .map(|(name, shape, _)| TensorEntry {
                name: name.to_string(),
                shape: shape.clone(),
            })
            .collect()
    }

    pub fn metadata(&self) -> ToyMetadata {
        ToyMetadata {
            input_shape: self.shape,
            hidden: self.hidden,
            time_features: TIME_FEATURES,
            cond_dim: self.cond_dim,
            seed: self.seed,
            epochs: self.epochs,
            final_loss: self.final_loss(),
            loss_history: self.loss_history.clone(),
            schedule: self.schedule.clone(),
            tensors: self.tensor_entries(),
        }
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

impl DenoiserBackend for ToyDenoiser {
    fn predict(&self, z: &Grid, t: usize, cond: Option<&PromptEmbedding>) -> Result<Grid> {
        self.schedule.check_step(t)?;
        if grid_shape(z) != self.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.to_vec(),
                found: z.shape().to_vec(),
            });
        }
        check_finite(z, "latent")?;
        let input = z.len();
        let x = Array2::from_shape_vec((1, input), z.iter().copied().collect()).expect("flat");
        let tf = Array2::from_shape_vec((1, TIME_FEATURES), time_features(self.schedule.alpha(t)).to_vec())
            .expect("features");
        let cf = self.cond_vector(cond)?.insert_axis(Axis(0));
        let out = self.forward(&x, &tf, &cf).out;
        Ok(Grid::from_shape_vec(self.shape, out.into_raw_vec_and_offset().0).expect("shape"))
    }

    fn latent_shape(&self) -> Option<[usize; 3]> {
        Some(self.shape)
    }

    fn alphas(&self) -> Option<&[f64]> {
        Some(self.schedule.alphas())
    }
}

/// Trains a [`ToyDenoiser`] on `dataset` with the standard eps-prediction MSE.
///
/// Each sample draws a fresh timestep in `1..=T` and fresh Gaussian noise every
/// epoch. Training is single-threaded and fully determined by `options.seed`.
pub fn train_toy_denoiser(
    dataset: &[LabeledSample],
    conditions: &BTreeMap<String, PromptEmbedding>,
    schedule: &Schedule,
    options: &TrainOptions,
) -> Result<ToyDenoiser> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::Training("empty dataset".into()))?;
    let shape = grid_shape(&first.image);
    for (i, item) in dataset.iter().enumerate() {
        if grid_shape(&item.image) != shape {
            return Err(Error::Training(format!(
                "item {i} has shape {:?}, expected {:?}",
                item.image.shape(),
                shape
            )));
        }
        check_finite(&item.image, "training image")?;
    }
    let cond_dim = conditions
        .values()
        .next()
        .map(|c| c.dims())
        .ok_or_else(|| Error::Training("empty condition table".into()))?;
    let mut pooled = BTreeMap::new();
    let mut matrices = BTreeMap::new();
    for (label, emb) in conditions {
        if emb.dims() != cond_dim {
            return Err(Error::Training(format!("condition `{label}` has {} dims", emb.dims())));
        }
        pooled.insert(label.as_str(), emb.pooled());
        matrices.insert(label.as_str(), emb.matrix());
    }
    let labels: Vec<&Array1<f64>> = dataset
        .iter()
        .map(|item| {
            pooled
                .get(item.label.as_str())
                .ok_or_else(|| Error::Training(format!("no condition for label `{}`", item.label)))
        })
        .collect::<Result<_>>()?;
    if options.batch_size == 0 || options.hidden == 0 {
        return Err(Error::Training("batch size and hidden width must be positive".into()));
    }
    if !(0.0..=1.0).contains(&options.token_reweight) || !(0.0..=1.0).contains(&options.reweight_floor) {
        return Err(Error::Training("token reweighting settings must lie in [0, 1]".into()));
    }
    if !(0.0..=1.0).contains(&options.cond_dropout) {
        return Err(Error::Training("condition dropout must lie in [0, 1]".into()));
    }

    let mut model = ToyDenoiser::init(shape, options.hidden, cond_dim, schedule.clone(), options.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ 0x9e37_79b9_7f4a_7c15);
    let input = model.layout.entries[B3].1[0];
    let steps = schedule.steps();
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    let mut grad = vec![0.0; model.params.len()];
    let mut m = vec![0.0; model.params.len()];
    let mut v = vec![0.0; model.params.len()];
    let mut update = 0i32;
    let batches_per_epoch = dataset.len().div_ceil(options.batch_size);
    let total_updates = (options.epochs * batches_per_epoch).max(1);

    // With zero epochs one pass still measures the untrained loss.
    let passes = options.epochs.max(1);
    for epoch in 0..passes {
        let training = options.epochs > 0;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0usize;
        for (batch_idx, chunk) in order.chunks(options.batch_size).enumerate() {
            let b = chunk.len();
            let mut x = Array2::zeros((b, input));
            let mut tf = Array2::zeros((b, TIME_FEATURES));
            let mut cf = Array2::zeros((b, cond_dim));
            let mut target = Array2::zeros((b, input));
            for (row, &idx) in chunk.iter().enumerate() {
                let t = rng.random_range(1..=steps);
                let alpha = schedule.alpha(t);
                let (sa, sn) = (alpha.sqrt(), (1.0 - alpha).sqrt());
                for (col, x0) in dataset[idx].image.iter().enumerate() {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    target[[row, col]] = e;
                    x[[row, col]] = sa * x0 + sn * e;
                }
                tf.row_mut(row).assign(&ArrayView1::from(&time_features(alpha)[..]));
                if rng.random::<f64>() >= options.cond_dropout {
                    if options.token_reweight > 0.0 && rng.random::<f64>() < options.token_reweight {
                        let m = matrices[dataset[idx].label.as_str()];
                        let mut acc = Array1::zeros(cond_dim);
                        for r in m.rows() {
                            acc.scaled_add(rng.random_range(options.reweight_floor..=1.0), &r);
                        }
                        cf.row_mut(row).assign(&(acc / m.nrows() as f64));
                    } else {
                        cf.row_mut(row).assign(labels[idx]);
                    }
                }
            }
            let loss = model.backward(&x, &tf, &cf, &target, &mut grad);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite loss {loss} at epoch {epoch}, batch {batch_idx} (lr {})",
                    options.learning_rate
                )));
            }
            epoch_loss += loss * b as f64;
            epoch_count += b;
            if !training {
                continue;
            }
            update += 1;
            let progress = update as f64 / total_updates as f64;
            let lr = options.learning_rate
                * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
            let bc1 = 1.0 - ADAM_BETA1.powi(update);
            let bc2 = 1.0 - ADAM_BETA2.powi(update);
            for i in 0..model.params.len() {
                let g = grad[i];
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                model.params[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
        model.loss_history.push(epoch_loss / epoch_count as f64);
    }
    model.epochs = options.epochs;
    Ok(model)
}
