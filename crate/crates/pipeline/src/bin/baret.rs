use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use baret_core::bam::{OmegaSampling, WindowAnchor};
use baret_core::ttis::InversionMode;
use baret_pipeline::config::JobConfig;
use baret_pipeline::error::exit;
use baret_pipeline::jobs::{self, EditJob};
use baret_pipeline::metrics::ScorerRegistry;
use baret_pipeline::PipelineError;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

/// Real-image editing with target-text inversion and balanced attention.
#[derive(Parser)]
#[command(name = "baret", version)]
struct Cli {
    /// Weight cache directory (overrides BARET_CACHE_DIR).
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Invert an image and fine-tune a per-step embedding schedule.
    Invert(InvertArgs),
    /// Edit from an inversion cache.
    Edit(EditArgs),
    /// Resample an inversion cache and report fidelity.
    Reconstruct {
        #[arg(long)]
        cache: PathBuf,
        /// Where to write the reconstructed image.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare inversion modes on a built-in suite.
    Bench {
        #[arg(long, default_value = "toy")]
        suite: String,
        /// Iteration log CSV; a summary JSON is written beside it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train toy backbone weights.
    TrainToy {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Weights file; defaults to the cache directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    TargetText,
    NullText,
}

#[derive(Args)]
struct InvertArgs {
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    guidance: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    inner_iters: Option<usize>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    /// Inversion cache to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// TOML job file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EditArgs {
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    omega_start: Option<f64>,
    #[arg(long)]
    omega_end: Option<f64>,
    /// Fraction of steps with self-attention injection.
    #[arg(long)]
    eta: Option<f64>,
    /// Fraction of steps with cross-attention injection.
    #[arg(long)]
    lambda: Option<f64>,
    /// Interpolation weight fixed at 1.
    #[arg(long)]
    rigid: bool,
    /// Draw interpolation weights uniformly (sorted) instead of a linear ramp.
    #[arg(long)]
    omega_uniform: bool,
    /// Anchor injection windows at the last steps instead of the first.
    #[arg(long)]
    late_window: bool,
    /// Restrict injection to these layer ids.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<String>>,
    /// Run the interpolation sweep instead of a single edit.
    #[arg(long)]
    omega_sweep: bool,
    /// Save attention maps as grayscale images.
    #[arg(long)]
    dump_attention: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("report is serializable"));
}

fn invert(a: InvertArgs, cache_dir: Option<PathBuf>) -> Result<(), PipelineError> {
    let mut job = JobConfig::load_or_default(a.config.as_deref())?;
    job.image = a.image.or(job.image);
    job.prompt = a.prompt.or(job.prompt);
    job.out = a.out.or(job.out);
    job.seed = a.seed.or(job.seed);
    job.cache_dir = cache_dir.or(job.cache_dir);
    if let Some(v) = a.steps {
        job.sampler.steps = v;
    }
    if let Some(v) = a.guidance {
        job.sampler.guidance_scale = v;
    }
    if let Some(v) = a.lr {
        job.optimizer.learning_rate = v;
    }
    if let Some(v) = a.inner_iters {
        job.optimizer.inner_iterations = v;
    }
    if let Some(v) = a.budget {
        job.optimizer.total_budget = v;
    }
    match a.mode {
        Some(Mode::TargetText) => job.mode = InversionMode::TargetText,
        Some(Mode::NullText) => job.mode = InversionMode::NullText,
        None => {}
    }
    print_json(&jobs::invert(&job)?);
    Ok(())
}

fn edit(a: EditArgs, cache_dir: Option<PathBuf>) -> Result<(), PipelineError> {
    let job = JobConfig::load_or_default(a.config.as_deref())?;
    let mut e = job.edit.clone();
    if let Some(v) = a.omega_start {
        e.omega_start = v;
    }
    if let Some(v) = a.omega_end {
        e.omega_end = v;
    }
    if let Some(v) = a.eta {
        e.sa_fraction = v;
    }
    if let Some(v) = a.lambda {
        e.ca_fraction = v;
    }
    e.rigid_mode |= a.rigid;
    if a.omega_uniform {
        e.omega_sampling = OmegaSampling::Uniform;
    }
    if a.late_window {
        e.window_anchor = WindowAnchor::Late;
    }
    if a.layers.is_some() {
        e.layers = a.layers;
    }
    let edit_job = EditJob {
        cache: a.cache,
        edit: e,
        out: a.out,
        sweep: a.omega_sweep,
        dump_attention: a.dump_attention,
        cache_dir: cache_dir.or(job.cache_dir),
    };
    for r in jobs::edit(&edit_job, &ScorerRegistry::default())? {
        print_json(&r);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Invert(a) => invert(a, cli.cache_dir),
        Command::Edit(a) => edit(a, cli.cache_dir),
        Command::Reconstruct { cache, out } => {
            print_json(&jobs::reconstruct_cache(
                &cache,
                out.as_deref(),
                cli.cache_dir.as_deref(),
            )?);
            Ok(())
        }
        Command::Bench { suite, out, config } => {
            let mut job = JobConfig::load_or_default(config.as_deref())?;
            job.cache_dir = cli.cache_dir.or(job.cache_dir);
            let report = jobs::bench(&job, &suite, &out, |c| {
                eprintln!(
                    "case {}: target-text {} iterations, null-text {}",
                    c.case, c.target_text_iterations, c.null_text_iterations
                )
            })?;
            print_json(&report);
            Ok(())
        }
        Command::TrainToy { config, out } => {
            let mut job = JobConfig::load_or_default(config.as_deref())?;
            job.cache_dir = cli.cache_dir.or(job.cache_dir);
            job.out = out.or(job.out);
            let report = jobs::train_toy(&job, |step, loss| {
                if step % 100 == 0 {
                    eprintln!("step {step}: loss {loss:.5}");
                }
            })?;
            print_json(&report);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli).context("baret failed") {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(err) => {
            let code = err
                .downcast_ref::<PipelineError>()
                .map_or(exit::CONFIG, PipelineError::exit_code);
            eprintln!("error: {err:#}");
            ExitCode::from(code as u8)
        }
    }
}
