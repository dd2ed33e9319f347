//! End-to-end staged editing: ingest, inversion, pilot run, stage discernment,
//! guided edit, optional λ optimization and reporting.

mod analysis;
pub mod benchmark;
mod config;
pub mod io;

pub use analysis::{
    masked_rms, psnr, quantile_sweep, score_metrics, trace_embedding_distances, write_distances_csv, DistanceRow,
    MetricScores, SweepRow,
};
pub use config::{
    BackendConfig, EditConfig, EncoderConfig, ImageConfig, MixingConfig, OptimizeConfig, PromptConfig,
    ResolvedEdit, ScheduleConfig,
};

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::denoiser::{Decoder, DenoiserBackend, Grid, LatentCode};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::objective::{
    directional_loss, optimize_lambda, perceptual_loss, total_loss, JointEncoder, LossReport, PerceptualNet,
    SpsaOptions,
};
use crate::promptmix::{covdiff, pad_align, CovDiffWeights, MixSchedule, MixedConditioning, PromptEmbedding};
use crate::sampler::{Sampler, Trajectory};
use crate::schedule::Schedule;
use crate::stagefinder::{discern_stages, init_lambda, plan_from_traces, LambdaInit, StageOptions, StagePlan};

pub const DEFAULT_CFG_SCALE: f64 = 5.0;

const EDIT_STREAM: u64 = 1;

/// Numeric settings of one edit, independent of where inputs come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSettings {
    pub schedule: Schedule,
    pub cfg_scale: f64,
    pub stages: StageOptions,
    pub lambda_prime: f64,
    pub mixing: MixingConfig,
    pub optimize: OptimizeConfig,
    pub seed: u64,
    /// Replaces the discerned λ by a constant (ablations).
    #[serde(default)]
    pub lambda_constant: Option<f64>,
    /// Forces `(t_edit, t_boost)` instead of the discerned stages.
    #[serde(default)]
    pub stage_override: Option<(usize, usize)>,
}

impl EditSettings {
    pub fn new(schedule: Schedule, seed: u64) -> Self {
        Self {
            schedule,
            cfg_scale: DEFAULT_CFG_SCALE,
            stages: StageOptions::default(),
            lambda_prime: crate::stagefinder::DEFAULT_LAMBDA_PRIME,
            mixing: MixingConfig::default(),
            optimize: OptimizeConfig::default(),
            seed,
            lambda_constant: None,
            stage_override: None,
        }
    }
}

/// In-memory inputs of an edit.
pub struct EditInputs<'a> {
    pub backend: &'a dyn DenoiserBackend,
    pub decoder: Decoder,
    /// Source image in pixel space.
    pub source: Grid,
    pub source_prompt: PromptEmbedding,
    pub target_prompt: PromptEmbedding,
    pub encoder: &'a dyn JointEncoder,
    pub alt_encoder: &'a dyn JointEncoder,
    pub perceptual: &'a dyn PerceptualNet,
    /// Reference image of the target; the edited output stands in when absent.
    pub target_reference: Option<Grid>,
    /// 1 inside the edit region, 0 elsewhere.
    pub mask: Option<Grid>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "kebab-case")]
pub enum RunStatus {
    Running,
    Completed,
    Failed { phase: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub phase: String,
    pub seconds: f64,
}

/// Per-step scalars of the edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub t: usize,
    pub freq: f64,
    pub grad: f64,
    pub noise_on: bool,
    pub modulated: bool,
    pub lambda: f64,
    pub d_src: f64,
    pub d_tgt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationLog {
    pub initial: LossReport,
    pub best: LossReport,
    pub history: Vec<f64>,
    pub evaluations: usize,
}

/// Everything a run records. Wall-clock timings are the only
/// non-deterministic field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub status: RunStatus,
    pub config: serde_json::Value,
    pub seed: u64,
    pub schedule: Schedule,
    pub plan: Option<StagePlan>,
    pub covdiff: Option<CovDiffWeights>,
    pub lambda_init: Option<LambdaInit>,
    pub lambda_final: Option<LambdaInit>,
    pub steps: Vec<StepLog>,
    pub loss: Option<LossReport>,
    pub optimization: Option<OptimizationLog>,
    pub metrics: Option<MetricScores>,
    pub inversion_error: Option<f64>,
    /// Mixed prompt embedding of each step, `mixed_embeddings[t - 1]`.
    pub mixed_embeddings: Vec<PromptEmbedding>,
    pub source_image: Option<Grid>,
    pub target_image: Option<Grid>,
    pub timings: Vec<PhaseTiming>,
}

impl RunTrace {
    fn new(settings: &EditSettings, config: serde_json::Value) -> Self {
        Self {
            status: RunStatus::Running,
            config,
            seed: settings.seed,
            schedule: settings.schedule.clone(),
            plan: None,
            covdiff: None,
            lambda_init: None,
            lambda_final: None,
            steps: Vec::new(),
            loss: None,
            optimization: None,
            metrics: None,
            inversion_error: None,
            mixed_embeddings: Vec::new(),
            source_image: None,
            target_image: None,
            timings: Vec::new(),
        }
    }

    /// JSON with wall-clock fields removed, for determinism checks.
    pub fn deterministic_json(&self) -> Result<String> {
        let mut copy = self.clone();
        copy.timings.clear();
        Ok(serde_json::to_string(&copy)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// A finished edit.
#[derive(Debug, Clone)]
pub struct EditRun {
    pub trace: RunTrace,
    pub source: Grid,
    pub edited: Grid,
    /// Decoded `x0` predictions of the edit pass, `(t, frame)` in sampling order.
    pub frames: Vec<(usize, Grid)>,
    pub inverted: LatentCode,
    pub trajectory: Trajectory,
}

struct Recorder {
    trace: RunTrace,
    out_dir: Option<PathBuf>,
}

impl Recorder {
    fn phase<T>(&mut self, name: &'static str, f: impl FnOnce(&mut RunTrace) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(&mut self.trace);
        self.trace.timings.push(PhaseTiming {
            phase: name.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out.map_err(|e| {
            self.trace.status = RunStatus::Failed {
                phase: name.to_string(),
                message: e.to_string(),
            };
            if let Some(dir) = &self.out_dir {
                // The original failure matters more than a failed partial write.
                let _ = fs::create_dir_all(dir).and_then(|_| {
                    self.trace
                        .write(&dir.join("trace.json"))
                        .map_err(|e| std::io::Error::other(e.to_string()))
                });
            }
            e.in_phase(name)
        })
    }
}

/// Shared state of an edit after inversion and stage discernment; used by
/// both [`run_edit`] and sweeps.
struct Prepared {
    pub source_pixels: Grid,
    pub inverted: LatentCode,
    pub pilot: Trajectory,
    pub src: PromptEmbedding,
    pub tgt: PromptEmbedding,
    pub covdiff: Option<CovDiffWeights>,
}

fn check_settings(settings: &EditSettings, inputs: &EditInputs<'_>) -> Result<()> {
    if !(settings.cfg_scale >= 0.0 && settings.cfg_scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("cfg scale {} must be >= 0", settings.cfg_scale)));
    }
    if let Some(alphas) = inputs.backend.alphas() {
        if alphas != settings.schedule.alphas() {
            return Err(Error::InvalidArgument(
                "backend was built for a different noise schedule".into(),
            ));
        }
    }
    if let Some(l) = settings.lambda_constant {
        if !(0.0..=1.0).contains(&l) {
            return Err(Error::InvalidArgument(format!("constant lambda {l} outside [0, 1]")));
        }
    }
    Ok(())
}

fn latent_shape(inputs: &EditInputs<'_>) -> Result<[usize; 3]> {
    match (inputs.backend.latent_shape(), inputs.decoder) {
        (Some(shape), _) => Ok(shape),
        (None, Decoder::Identity) => Ok(crate::denoiser::grid_shape(&inputs.source)),
        (None, Decoder::Upsample { .. }) => Err(Error::InvalidArgument(
            "upsampling decoder needs a backend with a fixed latent shape".into(),
        )),
    }
}

fn prepare(settings: &EditSettings, inputs: &EditInputs<'_>, rec: &mut Recorder) -> Result<Prepared> {
    let (source_latent, src, tgt, covdiff_w) = rec.phase("ingest", |trace| {
        check_settings(settings, inputs)?;
        let shape = latent_shape(inputs)?;
        let latent = inputs.decoder.encode(&inputs.source, shape)?;
        let (src, tgt) = pad_align(&inputs.source_prompt, &inputs.target_prompt)?;
        let cd = if settings.mixing.use_covdiff {
            let w = covdiff(&src, &tgt, settings.mixing.centered_covariance)?;
            // Identical prompts carry no token contrast; modulating by all-zero
            // weights would erase the condition, so mixing stays plain.
            (!w.degenerate).then_some(w)
        } else {
            None
        };
        trace.covdiff = cd.clone();
        trace.source_image = Some(inputs.source.clone());
        Ok((latent, src, tgt, cd))
    })?;

    let guided = Sampler::with_guidance(inputs.backend, &settings.schedule, settings.cfg_scale);
    let inversion_schedule = settings.schedule.with_eta(0.0)?;

    let inverted = rec.phase("invert", |_| {
        let sampler = Sampler::with_guidance(inputs.backend, &inversion_schedule, settings.cfg_scale)?;
        Ok(sampler.invert(&src, &source_latent)?.latent)
    })?;

    let pilot = rec.phase("pilot", |trace| {
        let sampler = guided?;
        let pilot = sampler.sample(&src, 0, &inverted, derive_seed(settings.seed, 0))?;
        let recon = inputs.decoder.decode(&pilot.final_latent().data)?;
        trace.inversion_error = Some(analysis::rms(&recon, &inputs.source)?);
        Ok(pilot)
    })?;

    let source_pixels = inputs.decoder.decode(&source_latent)?;
    Ok(Prepared {

        source_pixels,
        inverted,
        pilot,
        src,
        tgt,
        covdiff: covdiff_w,
    })
}

fn stage_plan(settings: &EditSettings, decoder: &Decoder, pilot: &Trajectory) -> Result<StagePlan> {
    let mut plan = discern_stages(pilot, decoder, &settings.stages)?;
    if let Some((t_edit, t_boost)) = settings.stage_override {
        plan = StagePlan {
            t_edit,
            t_boost,
            ..plan
        };
        plan.validate()?;
    }
    Ok(plan)
}

fn initial_lambda(settings: &EditSettings, plan: &StagePlan) -> Result<LambdaInit> {
    match settings.lambda_constant {
        Some(l) => LambdaInit::constant(plan.steps(), l, plan.t_edit),
        None => init_lambda(plan, settings.lambda_prime),
    }
}

/// One guided edit pass from the inverted latent.
fn edit_pass(
    settings: &EditSettings,
    inputs: &EditInputs<'_>,
    prep: &Prepared,
    plan: &StagePlan,
    lambda: &LambdaInit,
) -> Result<(MixedConditioning, Trajectory, Grid)> {
    let mix = MixSchedule::new(lambda.clone(), prep.covdiff.clone(), settings.mixing.covdiff_floor);
    let cond = MixedConditioning::new(&mix, &prep.src, &prep.tgt)?;
    let sampler = Sampler::with_guidance(inputs.backend, &settings.schedule, settings.cfg_scale)?;
    let traj = sampler.sample(&cond, plan.t_boost, &prep.inverted, derive_seed(settings.seed, EDIT_STREAM))?;
    let edited = inputs.decoder.decode(&traj.final_latent().data)?;
    Ok((cond, traj, edited))
}

fn edit_loss(
    settings: &EditSettings,
    inputs: &EditInputs<'_>,
    prep: &Prepared,
    edited: &Grid,
) -> Result<LossReport> {
    let d = directional_loss(inputs.encoder, &prep.source_pixels, edited, &prep.src, &prep.tgt)?;
    let perc = perceptual_loss(inputs.perceptual, &prep.source_pixels, edited)?;
    total_loss(d.value, perc, settings.optimize.gamma_perc)
}

/// Runs the full edit. On failure the error names the phase and, when
/// `out_dir` is given, the partial trace is written there.
pub fn run_edit(
    settings: &EditSettings,
    inputs: &EditInputs<'_>,
    config_echo: serde_json::Value,
    out_dir: Option<&Path>,
) -> Result<EditRun> {
    let mut rec = Recorder {
        trace: RunTrace::new(settings, config_echo),
        out_dir: out_dir.map(Path::to_path_buf),
    };
    let prep = prepare(settings, inputs, &mut rec)?;

    let (plan, lambda0) = rec.phase("stages", |trace| {
        let plan = stage_plan(settings, &inputs.decoder, &prep.pilot)?;
        let lambda0 = initial_lambda(settings, &plan)?;
        trace.plan = Some(plan.clone());
        trace.lambda_init = Some(lambda0.clone());
        Ok((plan, lambda0))
    })?;

    let first = rec.phase("edit", |_| edit_pass(settings, inputs, &prep, &plan, &lambda0))?;

    let (lambda, (cond, traj, edited)) = rec.phase("optimize", |trace| {
        if !settings.optimize.enabled {
            return Ok((lambda0.clone(), first));
        }
        let options = SpsaOptions {
            iterations: settings.optimize.iterations,
            step: settings.optimize.step,
            perturbation: settings.optimize.perturbation,
            seed: derive_seed(settings.seed, 2),
        };
        let evaluate = |l: &LambdaInit| {
            let (_, _, edited) = edit_pass(settings, inputs, &prep, &plan, l)?;
            edit_loss(settings, inputs, &prep, &edited)
        };
        let opt = optimize_lambda(evaluate, &lambda0, &options)?;
        trace.optimization = Some(OptimizationLog {
            initial: opt.initial,
            best: opt.best,
            history: opt.history.clone(),
            evaluations: opt.evaluations,
        });
        let best = edit_pass(settings, inputs, &prep, &plan, &opt.lambda)?;
        Ok((opt.lambda, best))
    })?;

    rec.phase("report", |trace| {
        let loss = edit_loss(settings, inputs, &prep, &edited)?;
        let target_image = inputs.target_reference.clone().unwrap_or_else(|| edited.clone());
        let mixed: Vec<PromptEmbedding> = (1..=cond.steps()).map(|t| cond.at(t).clone()).collect();
        let distances = analysis::embedding_distances(&mixed, &prep.source_pixels, &target_image, inputs.encoder)?;
        let mix = MixSchedule::new(lambda.clone(), prep.covdiff.clone(), settings.mixing.covdiff_floor);
        trace.steps = traj
            .steps
            .iter()
            .map(|s| {
                let row = &distances[s.t - 1];
                StepLog {
                    t: s.t,
                    freq: plan.freq_trace[s.t - 1],
                    grad: plan.grad_trace[s.t - 1],
                    noise_on: s.noise_on,
                    modulated: mix.modulated(s.t),
                    lambda: lambda.at(s.t),
                    d_src: row.d_src,
                    d_tgt: row.d_tgt,
                }
            })
            .collect();
        trace.metrics = Some(score_metrics(
            &prep.source_pixels,
            &edited,
            inputs.target_reference.as_ref(),
            &prep.src,
            &prep.tgt,
            inputs.mask.as_ref(),
            inputs.encoder,
            inputs.alt_encoder,
        )?);
        trace.loss = Some(loss);
        trace.lambda_final = Some(lambda.clone());
        trace.mixed_embeddings = mixed;
        trace.target_image = Some(target_image);
        Ok(())
    })?;

    let frames = rec.phase("frames", |_| {
        traj.steps
            .iter()
            .map(|s| Ok((s.t, inputs.decoder.decode(&s.output.predicted_x0)?)))
            .collect::<Result<Vec<_>>>()
    })?;

    rec.trace.status = RunStatus::Completed;
    Ok(EditRun {
        trace: rec.trace,
        source: prep.source_pixels,
        edited,
        frames,
        inverted: prep.inverted,
        trajectory: traj,
    })
}

/// Writes `trace.json`, `metrics.json`, `distances.csv` and `frames/*.pgm`.
pub fn write_outputs(run: &EditRun, dir: &Path) -> Result<()> {
    let frames = dir.join("frames");
    fs::create_dir_all(&frames)?;
    run.trace.write(&dir.join("trace.json"))?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&run.trace.metrics)?)?;
    let rows: Vec<DistanceRow> = run
        .trace
        .steps
        .iter()
        .map(|s| DistanceRow {
            t: s.t,
            lambda: s.lambda,
            d_src: s.d_src,
            d_tgt: s.d_tgt,
        })
        .collect();
    write_distances_csv(&dir.join("distances.csv"), &rows)?;
    io::write_pgm(&frames.join("source.pgm"), &run.source)?;
    io::write_pgm(&frames.join("edited.pgm"), &run.edited)?;
    if let Some(target) = &run.trace.target_image {
        io::write_pgm(&frames.join("target.pgm"), target)?;
    }
    for (t, frame) in &run.frames {
        io::write_pgm(&frames.join(format!("x0_t{t:04}.pgm")), frame)?;
    }
    #[cfg(feature = "png")]
    io::write_png(&frames.join("edited.png"), &run.edited)?;
    Ok(())
}

/// Re-places stages on recorded traces with other quantiles.
pub fn replan(plan: &StagePlan, freq_quantile: f64, grad_quantile: f64) -> Result<StagePlan> {
    plan_from_traces(
        plan.freq_trace.clone(),
        plan.grad_trace.clone(),
        freq_quantile,
        grad_quantile,
    )
}
