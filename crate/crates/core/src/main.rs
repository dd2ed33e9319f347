use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use stagediff::denoiser::{train_toy_denoiser, LabeledSample, TrainOptions};
use stagediff::pipeline::benchmark::{self, BlobClass, EditCase};
use stagediff::pipeline::{
    io, quantile_sweep, run_edit, trace_embedding_distances, write_distances_csv, write_outputs, EditConfig, RunTrace,
};
use stagediff::promptmix::HashedTokenizer;
use stagediff::schedule::{BetaProfile, Schedule};

const SEED_ENV: &str = "STAGEDIFF_SEED";

#[derive(Parser)]
#[command(name = "stagediff", version, about = "Staged, noise-guided diffusion editing at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one edit and write trace.json, metrics.json, distances.csv and frames/.
    Edit {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (overrides `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run stage discernment and the edit over a grid of quantiles.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.9,0.75,0.6")]
        freq_qs: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.25,0.5")]
        grad_qs: Vec<f64>,
        /// CSV output; the table is printed to stdout either way.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute per-step embedding distances from a recorded trace.
    Trace {
        /// The config the run was made with (selects the encoder).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the toy conditional denoiser on the blob benchmark.
    TrainDenoiser {
        /// Directory written by `gen-data`; generated in memory when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        size: usize,
        #[arg(long, default_value_t = 512)]
        count: usize,
        #[arg(long, default_value_t = 11)]
        data_seed: u64,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 128)]
        hidden: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, value_enum, default_value = "linear-beta")]
        profile: ProfileArg,
        #[arg(long, default_value_t = 16)]
        tokenizer_dims: usize,
        #[arg(long, default_value_t = 0)]
        tokenizer_seed: u64,
        /// Weight file; the JSON sidecar is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write blob benchmark images as PGM files.
    GenData {
        #[arg(long, default_value_t = 8)]
        size: usize,
        #[arg(long, default_value_t = 512)]
        count: usize,
        #[arg(long, default_value_t = 11)]
        seed: u64,
        /// Write one edit case (source, target reference, mask) instead of a
        /// training set: `--case "a bright blob on the left" "a dim blob on the left"`.
        #[arg(long, num_args = 2, value_names = ["SOURCE", "TARGET"])]
        case: Option<Vec<String>>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ProfileArg {
    LinearBeta,
    Cosine,
}

impl From<ProfileArg> for BetaProfile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::LinearBeta => BetaProfile::LinearBeta,
            ProfileArg::Cosine => BetaProfile::Cosine,
        }
    }
}

/// A config file plus flag overrides.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    cfg_scale: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    freq_quantile: Option<f64>,
    #[arg(long)]
    grad_quantile: Option<f64>,
    #[arg(long)]
    hf_radius: Option<f64>,
    #[arg(long)]
    lambda_prime: Option<f64>,
    #[arg(long)]
    src_text: Option<String>,
    #[arg(long)]
    tgt_text: Option<String>,
    #[arg(long)]
    src_emb: Option<PathBuf>,
    #[arg(long)]
    tgt_emb: Option<PathBuf>,
    #[arg(long)]
    optimize_lambda: bool,
    #[arg(long)]
    opt_iters: Option<usize>,
    #[arg(long)]
    opt_step: Option<f64>,
    #[arg(long)]
    gamma_perc: Option<f64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<EditConfig> {
        let mut cfg = EditConfig::from_path(&self.config)?;
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = v.trim().parse().with_context(|| format!("{SEED_ENV}={v} is not an integer"))?;
        }
        let set = |dst: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        set(&mut cfg.cfg_scale, self.cfg_scale);
        set(&mut cfg.schedule.eta, self.eta);
        if let Some(n) = self.steps {
            cfg.schedule.steps = n;
        }
        set(&mut cfg.stages.freq_quantile, self.freq_quantile);
        set(&mut cfg.stages.grad_quantile, self.grad_quantile);
        set(&mut cfg.stages.hf_radius, self.hf_radius);
        set(&mut cfg.lambda_prime, self.lambda_prime);
        if let Some(t) = &self.src_text {
            cfg.prompts.source = t.clone();
            cfg.prompts.source_file = None;
        }
        if let Some(t) = &self.tgt_text {
            cfg.prompts.target = t.clone();
            cfg.prompts.target_file = None;
        }
        if let Some(p) = &self.src_emb {
            cfg.prompts.source_file = Some(p.clone());
        }
        if let Some(p) = &self.tgt_emb {
            cfg.prompts.target_file = Some(p.clone());
        }
        if self.optimize_lambda {
            cfg.optimize.enabled = true;
        }
        if let Some(n) = self.opt_iters {
            cfg.optimize.iterations = n;
        }
        set(&mut cfg.optimize.step, self.opt_step);
        set(&mut cfg.optimize.gamma_perc, self.gamma_perc);
        Ok(cfg)
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Edit { cfg, out } => edit(&cfg, out),
        Command::Sweep {
            cfg,
            freq_qs,
            grad_qs,
            out,
        } => sweep(&cfg, &freq_qs, &grad_qs, out.as_deref()),
        Command::Trace { config, run, out } => trace(&config, &run, out.as_deref()),
        Command::TrainDenoiser {
            data,
            size,
            count,
            data_seed,
            epochs,
            hidden,
            seed,
            steps,
            profile,
            tokenizer_dims,
            tokenizer_seed,
            out,
        } => {
            let dataset = match data {
                Some(dir) => read_dataset(&dir)?,
                None => benchmark::generate(size, count, data_seed)?,
            };
            let tokenizer = HashedTokenizer::new(tokenizer_dims, tokenizer_seed);
            let mut conditions = BTreeMap::new();
            for s in &dataset {
                if !conditions.contains_key(&s.label) {
                    conditions.insert(s.label.clone(), tokenizer.encode(&s.label)?);
                }
            }
            let schedule = Schedule::build(steps, profile.into(), 0.0)?;
            let options = TrainOptions {
                epochs,
                hidden,
                seed,
                ..TrainOptions::default()
            };
            let model = train_toy_denoiser(&dataset, &conditions, &schedule, &options)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            model.save(&out)?;
            println!(
                "trained on {} images, final loss {:.5}, wrote {}",
                dataset.len(),
                model.final_loss(),
                out.display()
            );
            Ok(())
        }
        Command::GenData {
            size,
            count,
            seed,
            case,
            out,
        } => gen_data(size, count, seed, case, &out),
    }
}

fn edit(args: &ConfigArgs, out: Option<PathBuf>) -> Result<()> {
    let cfg = args.load()?;
    let out = out
        .or_else(|| cfg.output_dir.clone())
        .context("no output directory: pass --out or set output_dir")?;
    let resolved = cfg.resolve()?;
    fs::create_dir_all(&out)?;
    let run = run_edit(&resolved.settings, &resolved.inputs(), cfg.echo()?, Some(&out))?;
    write_outputs(&run, &out)?;
    let plan = run.trace.plan.as_ref().context("completed run has no stage plan")?;
    println!("t_edit {} t_boost {}", plan.t_edit, plan.t_boost);
    if plan.edit_fallback || plan.boost_fallback {
        println!(
            "stage fallback: edit {} boost {}",
            plan.edit_fallback, plan.boost_fallback
        );
    }
    if let Some(m) = &run.trace.metrics {
        println!("{}", serde_json::to_string_pretty(m)?);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn sweep(args: &ConfigArgs, freq_qs: &[f64], grad_qs: &[f64], out: Option<&Path>) -> Result<()> {
    let cfg = args.load()?;
    let resolved = cfg.resolve()?;
    let rows = quantile_sweep(&resolved.settings, &resolved.inputs(), freq_qs, grad_qs)?;
    let show = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    println!("freq_q grad_q t_edit t_boost off_edit alignment target_sim");
    for r in &rows {
        println!(
            "{:6} {:6} {:>6} {:>7} {:>8} {:>9} {:>10}{}",
            r.freq_quantile,
            r.grad_quantile,
            r.t_edit.map_or("-".into(), |t| t.to_string()),
            r.t_boost.map_or("-".into(), |t| t.to_string()),
            show(r.off_edit_error),
            show(r.alignment),
            show(r.target_similarity),
            r.error.as_ref().map_or(String::new(), |e| format!("  error: {e}")),
        );
    }
    if let Some(path) = out {
        let mut w = csv::Writer::from_path(path)?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    Ok(())
}

fn trace(config: &Path, run: &Path, out: Option<&Path>) -> Result<()> {
    let cfg = EditConfig::from_path(config)?;
    let resolved = cfg.resolve()?;
    let recorded = RunTrace::read(run)?;
    let rows = trace_embedding_distances(&recorded, &resolved.encoder)?;
    match out {
        Some(path) => write_distances_csv(path, &rows)?,
        None => {
            println!("t,lambda,d_src,d_tgt");
            for r in rows {
                println!("{},{},{},{}", r.t, r.lambda, r.d_src, r.d_tgt);
            }
        }
    }
    Ok(())
}

fn gen_data(size: usize, count: usize, seed: u64, case: Option<Vec<String>>, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    if let Some(prompts) = case {
        let class = |p: &str| BlobClass::from_prompt(p).with_context(|| format!("`{p}` is not a benchmark prompt"));
        let c = EditCase::sample(size, class(&prompts[0])?, class(&prompts[1])?, seed)?;
        io::write_pgm(&out.join("source.pgm"), &c.source)?;
        io::write_pgm(&out.join("target.pgm"), &c.target_reference)?;
        io::write_pgm(&out.join("mask.pgm"), &c.mask)?;
        println!("wrote edit case to {}", out.display());
        return Ok(());
    }
    let mut labels = csv::Writer::from_path(out.join("labels.csv"))?;
    labels.write_record(["file", "label"])?;
    for (i, s) in benchmark::generate(size, count, seed)?.iter().enumerate() {
        let name = format!("{i:05}.pgm");
        io::write_pgm(&out.join(&name), &s.image)?;
        labels.write_record([name.as_str(), s.label.as_str()])?;
    }
    labels.flush()?;
    println!("wrote {count} images to {}", out.display());
    Ok(())
}

fn read_dataset(dir: &Path) -> Result<Vec<LabeledSample>> {
    let mut reader = csv::Reader::from_path(dir.join("labels.csv"))
        .with_context(|| format!("reading {}", dir.join("labels.csv").display()))?;
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let (file, label) = (&rec[0], &rec[1]);
        out.push(LabeledSample {
            image: io::read_pgm(&dir.join(file))?,
            label: label.to_string(),
        });
    }
    if out.is_empty() {
        bail!("{} lists no images", dir.display());
    }
    Ok(out)
}
