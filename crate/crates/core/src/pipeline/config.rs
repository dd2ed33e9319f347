use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::benchmark::{self, BlobClass, EditCase};
use super::{io, EditInputs, EditSettings, DEFAULT_CFG_SCALE};
use crate::denoiser::{AnalyticDenoiser, Decoder, DenoiserBackend, GaussianMixtureWorld, Grid, ToyDenoiser};
use crate::error::{Error, Result};
use crate::objective::{BoxPyramid, LinearJointEncoder, DEFAULT_GAMMA_PERC, DEFAULT_OPT_ITERATIONS, DEFAULT_OPT_STEP, DEFAULT_PERTURBATION};
use crate::promptmix::{load_embeddings, HashedTokenizer, PromptEmbedding, DEFAULT_COVDIFF_FLOOR};
use crate::schedule::{BetaProfile, Schedule};
use crate::stagefinder::{StageOptions, DEFAULT_LAMBDA_PRIME};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub profile: BetaProfile,
    pub eta: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            profile: BetaProfile::LinearBeta,
            eta: 1.0,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<Schedule> {
        Schedule::build(self.steps, self.profile, self.eta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BackendConfig {
    Analytic {
        means: Vec<Vec<f64>>,
        weights: Vec<f64>,
        variance: f64,
        shape: [usize; 3],
    },
    Toy {
        weights: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    pub source: String,
    pub target: String,
    /// Precomputed embedding files; they replace the tokenized text.
    #[serde(default)]
    pub source_file: Option<PathBuf>,
    #[serde(default)]
    pub target_file: Option<PathBuf>,
    #[serde(default = "default_tokenizer_dims")]
    pub tokenizer_dims: usize,
    #[serde(default)]
    pub tokenizer_seed: u64,
}

fn default_tokenizer_dims() -> usize {
    16
}

impl PromptConfig {
    pub fn tokenizer(&self) -> HashedTokenizer {
        HashedTokenizer::new(self.tokenizer_dims, self.tokenizer_seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ImageConfig {
    /// A generated blob image; classes are read from the prompt texts.
    Benchmark { size: usize, seed: u64 },
    Pgm {
        path: PathBuf,
        #[serde(default)]
        target_reference: Option<PathBuf>,
        /// Pixels above 0.5 mark the edit region, so 0/1 masks and
        /// black/white images both work.
        #[serde(default)]
        mask: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixingConfig {
    pub use_covdiff: bool,
    pub centered_covariance: bool,
    pub covdiff_floor: f64,
}

impl Default for MixingConfig {
    fn default() -> Self {
        Self {
            use_covdiff: true,
            centered_covariance: false,
            covdiff_floor: DEFAULT_COVDIFF_FLOOR,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeConfig {
    pub enabled: bool,
    pub iterations: usize,
    pub step: f64,
    pub perturbation: f64,
    pub gamma_perc: f64,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            iterations: DEFAULT_OPT_ITERATIONS,
            step: DEFAULT_OPT_STEP,
            perturbation: DEFAULT_PERTURBATION,
            gamma_perc: DEFAULT_GAMMA_PERC,
        }
    }
}

/// Joint encoder construction. With `align`, the text head is fitted to blob
/// benchmark images of the source image's size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub dim: usize,
    pub seed: u64,
    pub alt_seed: u64,
    pub align: bool,
    pub align_samples: usize,
    pub align_seed: u64,
    pub ridge: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            seed: 17,
            alt_seed: 29,
            align: true,
            align_samples: 256,
            align_seed: 5,
            ridge: 1e-3,
        }
    }
}

impl EncoderConfig {
    /// The aligned (or random) joint encoder for `image_shape`.
    pub fn build(&self, image_shape: [usize; 3], tokenizer: &HashedTokenizer) -> Result<LinearJointEncoder> {
        let [c, h, w] = image_shape;
        let blob_sized = c == 1 && h == w && (benchmark::MIN_SIZE..=benchmark::MAX_SIZE).contains(&h);
        if !(self.align && blob_sized) {
            return LinearJointEncoder::random(image_shape, tokenizer.dims, self.dim, self.seed);
        }
        let data = benchmark::generate(h, self.align_samples, self.align_seed)?;
        let mut prompts = BTreeMap::new();
        for class in BlobClass::ALL {
            prompts.insert(class.prompt(), tokenizer.encode(&class.prompt())?);
        }
        let pairs: Vec<(&PromptEmbedding, &Grid)> = data.iter().map(|s| (&prompts[&s.label], &s.image)).collect();
        LinearJointEncoder::aligned(image_shape, self.dim, self.seed, &pairs, self.ridge)
    }

    pub fn build_alt(&self, image_shape: [usize; 3], tokenizer: &HashedTokenizer) -> Result<LinearJointEncoder> {
        LinearJointEncoder::random(image_shape, tokenizer.dims, self.dim, self.alt_seed)
    }
}

/// The declarative edit configuration (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_cfg_scale")]
    pub cfg_scale: f64,
    #[serde(default = "default_lambda_prime")]
    pub lambda_prime: f64,
    #[serde(default)]
    pub lambda_constant: Option<f64>,
    #[serde(default)]
    pub stage_override: Option<[usize; 2]>,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    pub backend: BackendConfig,
    #[serde(default)]
    pub decoder: Decoder,
    pub prompts: PromptConfig,
    pub image: ImageConfig,
    #[serde(default)]
    pub stages: StageOptions,
    #[serde(default)]
    pub mixing: MixingConfig,
    #[serde(default)]
    pub optimize: OptimizeConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
}

fn default_cfg_scale() -> f64 {
    DEFAULT_CFG_SCALE
}

fn default_lambda_prime() -> f64 {
    DEFAULT_LAMBDA_PRIME
}

impl EditConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse(origin, e.to_string()))
    }

    /// Reads a config; relative paths inside it resolve against its directory.
    pub fn from_path(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&fs::read_to_string(path)?, &path.display().to_string())?;
        cfg.rebase(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let BackendConfig::Toy { weights } = &mut self.backend {
            fix(weights);
        }
        if let Some(p) = &mut self.prompts.source_file {
            fix(p);
        }
        if let Some(p) = &mut self.prompts.target_file {
            fix(p);
        }
        if let ImageConfig::Pgm {
            path,
            target_reference,
            mask,
        } = &mut self.image
        {
            fix(path);
            target_reference.iter_mut().for_each(fix);
            mask.iter_mut().for_each(fix);
        }
        if let Some(p) = &mut self.output_dir {
            fix(p);
        }
    }

    /// Checks that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        let mut files: Vec<&Path> = Vec::new();
        if let BackendConfig::Toy { weights } = &self.backend {
            files.push(weights);
        }
        files.extend(self.prompts.source_file.as_deref());
        files.extend(self.prompts.target_file.as_deref());
        if let ImageConfig::Pgm {
            path,
            target_reference,
            mask,
        } = &self.image
        {
            files.push(path);
            files.extend(target_reference.as_deref());
            files.extend(mask.as_deref());
        }
        for f in files {
            if !f.is_file() {
                return Err(Error::InvalidArgument(format!("missing input file {}", f.display())));
            }
        }
        Ok(())
    }

    pub fn settings(&self) -> Result<EditSettings> {
        let mut s = EditSettings::new(self.schedule.build()?, self.seed);
        s.cfg_scale = self.cfg_scale;
        s.stages = self.stages;
        s.lambda_prime = self.lambda_prime;
        s.mixing = self.mixing;
        s.optimize = self.optimize;
        s.lambda_constant = self.lambda_constant;
        s.stage_override = self.stage_override.map(|[e, b]| (e, b));
        Ok(s)
    }

    pub fn echo(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }

    /// Loads the backend, prompts, images and encoders.
    pub fn resolve(&self) -> Result<ResolvedEdit> {
        self.validate()?;
        let settings = self.settings()?;
        let backend: Box<dyn DenoiserBackend> = match &self.backend {
            BackendConfig::Analytic {
                means,
                weights,
                variance,
                shape,
            } => {
                let world = GaussianMixtureWorld::new(means.clone(), weights.clone(), *variance)?;
                Box::new(AnalyticDenoiser::new(world, settings.schedule.clone(), *shape)?)
            }
            BackendConfig::Toy { weights } => Box::new(ToyDenoiser::load(weights)?),
        };
        let tokenizer = self.prompts.tokenizer();
        let source_prompt = match &self.prompts.source_file {
            Some(p) => load_embeddings(p)?,
            None => tokenizer.encode(&self.prompts.source)?,
        };
        let target_prompt = match &self.prompts.target_file {
            Some(p) => load_embeddings(p)?,
            None => tokenizer.encode(&self.prompts.target)?,
        };
        let (source, target_reference, mask) = match &self.image {
            ImageConfig::Benchmark { size, seed } => {
                let class = |text: &str| {
                    BlobClass::from_prompt(text).ok_or_else(|| {
                        Error::InvalidArgument(format!("`{text}` is not a benchmark prompt"))
                    })
                };
                let case = EditCase::sample(*size, class(&self.prompts.source)?, class(&self.prompts.target)?, *seed)?;
                (case.source, Some(case.target_reference), Some(case.mask))
            }
            ImageConfig::Pgm {
                path,
                target_reference,
                mask,
            } => (
                io::read_pgm(path)?,
                target_reference.as_deref().map(io::read_pgm).transpose()?,
                mask.as_deref()
                    .map(|p| io::read_pgm(p).map(|m| m.mapv(|v| if v > 0.5 { 1.0 } else { 0.0 })))
                    .transpose()?,
            ),
        };
        let image_shape = crate::denoiser::grid_shape(&self.decoder.decode(&match backend.latent_shape() {
            Some(s) => Grid::zeros(s),
            None => source.clone(),
        })?);
        let encoder = self.encoder.build(image_shape, &tokenizer)?;
        let alt_encoder = self.encoder.build_alt(image_shape, &tokenizer)?;
        Ok(ResolvedEdit {
            settings,
            backend,
            decoder: self.decoder,
            source,
            source_prompt,
            target_prompt,
            encoder,
            alt_encoder,
            perceptual: BoxPyramid::default(),
            target_reference,
            mask,
        })
    }
}

/// Owned inputs of an edit built from an [`EditConfig`].
pub struct ResolvedEdit {
    pub settings: EditSettings,
    pub backend: Box<dyn DenoiserBackend>,
    pub decoder: Decoder,
    pub source: Grid,
    pub source_prompt: PromptEmbedding,
    pub target_prompt: PromptEmbedding,
    pub encoder: LinearJointEncoder,
    pub alt_encoder: LinearJointEncoder,
    pub perceptual: BoxPyramid,
    pub target_reference: Option<Grid>,
    pub mask: Option<Grid>,
}

impl ResolvedEdit {
    pub fn inputs(&self) -> EditInputs<'_> {
        EditInputs {
            backend: self.backend.as_ref(),
            decoder: self.decoder,
            source: self.source.clone(),
            source_prompt: self.source_prompt.clone(),
            target_prompt: self.target_prompt.clone(),
            encoder: &self.encoder,
            alt_encoder: &self.alt_encoder,
            perceptual: &self.perceptual,
            target_reference: self.target_reference.clone(),
            mask: self.mask.clone(),
        }
    }
}
