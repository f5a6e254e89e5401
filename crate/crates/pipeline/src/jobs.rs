//! Command implementations. Each returns a serializable report; printing is
//! left to the caller.

use std::path::{Path, PathBuf};
use std::time::Instant;

use baret_core::backbone::toy::{ToyBackbone, TrainReport};
use baret_core::backbone::{AttentionCapture, Backbone, RgbImage};
use baret_core::bam::{run_bam_edit, EditConfig, Process};
use baret_core::ttis::{reconstruct, run_ttis, TtisConfig};
use serde::Serialize;

use crate::config::{BackboneConfig, BackboneKind, JobConfig};
use crate::error::{PipelineError, Result};
use crate::metrics::{latent_mse, latent_psnr, psnr, PerceptualScores, ScorerRegistry};
use crate::store::{BackboneRef, InversionCache};
use crate::weights;

/// Start values of the interpolation sweep.
pub const OMEGA_SWEEP: [f64; 5] = [0.9, 0.8, 0.6, 0.5, 0.0];

pub fn read_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)
        .map_err(|source| PipelineError::Image {
            path: path.into(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(RgbImage::new(w as usize, h as usize, img.into_raw())?)
}

pub fn write_image(path: &Path, img: &RgbImage) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    image::save_buffer(
        path,
        img.pixels(),
        img.width() as u32,
        img.height() as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|source| PipelineError::Image {
        path: path.into(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("report is serializable");
    std::fs::write(path, text + "\n").map_err(|e| PipelineError::io(path, e))
}

/// Opens the toy backbone a job asks for, training it into the cache
/// directory when no weights exist yet.
pub fn open_backbone(
    backbone: &BackboneConfig,
    cache_dir: &Path,
    progress: impl FnMut(usize, f64),
) -> Result<(ToyBackbone, BackboneRef)> {
    if backbone.kind == BackboneKind::Adapter {
        return Err(PipelineError::Unsupported(
            "no adapter backend is compiled in; pretrained weights plug in through the adapter manifest contract".into(),
        ));
    }
    let (bb, path, train) = match &backbone.weights {
        Some(path) => {
            let (bb, header) = weights::load_toy(path)?;
            (bb, path.clone(), header.train)
        }
        None => {
            let (bb, path) =
                weights::load_or_train(&backbone.toy, &backbone.train, cache_dir, progress)?;
            (bb, path, backbone.train.clone())
        }
    };
    let r = BackboneRef {
        toy: bb.config().clone(),
        train,
        weights_path: path,
        fingerprint: bb.weights_fingerprint(),
    };
    Ok((bb, r))
}

/// Reopens the backbone recorded in a cache and checks its fingerprint.
pub fn backbone_for_cache(r: &BackboneRef, cache_dir: &Path) -> Result<ToyBackbone> {
    let bb = if r.weights_path.exists() {
        weights::load_toy(&r.weights_path)?.0
    } else {
        weights::load_or_train(&r.toy, &r.train, cache_dir, |_, _| {})?.0
    };
    if bb.weights_fingerprint() != r.fingerprint {
        return Err(PipelineError::cache(
            &r.weights_path,
            crate::cache::CacheError::Header("backbone weights differ from the ones used for inversion".into()),
        ));
    }
    Ok(bb)
}

#[derive(Clone, Debug, Serialize)]
pub struct InvertReport {
    pub cache: PathBuf,
    pub prompt: String,
    pub mode: String,
    pub steps: usize,
    pub total_iterations: usize,
    pub iterations_used: Vec<usize>,
    pub initial_loss: Vec<f64>,
    pub per_step_loss: Vec<f64>,
    pub psnr_initial: f64,
    pub psnr_reconstruction: f64,
    pub elapsed_seconds: f64,
    pub config: JobConfig,
}

pub fn invert(job: &JobConfig) -> Result<InvertReport> {
    job.validate_for_invert()?;
    let started = Instant::now();
    let image_path = job.image.as_ref().expect("validated");
    let prompt = job.prompt.clone().expect("validated");
    let out = job
        .out
        .clone()
        .ok_or_else(|| PipelineError::Config("an output cache path is required".into()))?;
    let image = read_image(image_path)?;
    let (bb, bref) = open_backbone(&job.effective_backbone(), &job.cache_dir(), |_, _| {})?;
    let z0 = bb.encode_image(&image)?;
    let cond = bb.encode_text(&prompt)?;
    let noise = job.schedule.build(job.sampler.steps)?;
    let cfg = TtisConfig {
        sampler: job.sampler,
        optimizer: job.optimizer,
        mode: job.mode,
        inversion_conditioning: job.inversion_conditioning,
    };
    let run = run_ttis(&z0, &cond, &bb, &noise, &cfg)?;
    let psnr_initial = psnr(&bb.decode_image(run.initial.end())?, &image)?;
    let psnr_reconstruction = psnr(&bb.decode_image(run.reconstruction.end())?, &image)?;
    let cache = InversionCache::new(
        run,
        cond,
        bb.null_embedding().clone(),
        prompt.clone(),
        job.schedule,
        job.inversion_conditioning,
        job.optimizer,
        bref,
    );
    cache.write(&out)?;
    let s = &cache.schedule;
    Ok(InvertReport {
        cache: out,
        prompt,
        mode: job.mode.as_str().into(),
        steps: s.steps(),
        total_iterations: s.total_iterations(),
        iterations_used: s.iterations_used.clone(),
        initial_loss: s.initial_loss.clone(),
        per_step_loss: s.per_step_loss.clone(),
        psnr_initial,
        psnr_reconstruction,
        elapsed_seconds: started.elapsed().as_secs_f64(),
        config: job.clone(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct EditReport {
    pub prompt: String,
    pub omega_start: f64,
    pub omega_end: f64,
    /// I_rct against the decoded original.
    pub psnr_reconstruction: f64,
    /// Plain guided sample against the decoded original.
    pub psnr_initial: f64,
    pub psnr_edit: f64,
    pub latent_mse_edit_reconstruction: f64,
    pub latent_mse_transition_reconstruction: f64,
    pub self_injected_steps: usize,
    pub cross_injected_steps: usize,
    pub perceptual: std::collections::BTreeMap<String, PerceptualScores>,
    pub images: Vec<PathBuf>,
    pub elapsed_seconds: f64,
    pub config: EditConfig,
}

/// Options of the `edit` command beyond the edit configuration itself.
#[derive(Clone, Debug, Default)]
pub struct EditJob {
    pub cache: PathBuf,
    pub edit: EditConfig,
    pub out: PathBuf,
    pub sweep: bool,
    pub dump_attention: bool,
    pub cache_dir: Option<PathBuf>,
}

fn dump_capture(dir: &Path, s: usize, process: Process, cap: &AttentionCapture) -> Result<()> {
    let tag = match process {
        Process::Reconstruction => "rct",
        Process::Transition => "inp",
    };
    for (id, map) in &cap.maps {
        for h in 0..map.heads {
            let probs = &map.probs[h * map.queries * map.keys..(h + 1) * map.queries * map.keys];
            let peak = probs.iter().cloned().fold(f32::MIN_POSITIVE, f32::max);
            let pixels: Vec<u8> = probs
                .iter()
                .map(|p| (p / peak * 255.0).round().clamp(0.0, 255.0) as u8)
                .collect();
            let path = dir.join(format!("step{s:03}-{tag}-{id}-h{h}.png"));
            image::save_buffer(
                &path,
                &pixels,
                map.keys as u32,
                map.queries as u32,
                image::ExtendedColorType::L8,
            )
            .map_err(|source| PipelineError::Image { path, source })?;
        }
    }
    Ok(())
}

fn edit_once(
    cache: &InversionCache,
    bb: &ToyBackbone,
    edit: &EditConfig,
    out: &Path,
    dump: bool,
    scorers: &ScorerRegistry,
) -> Result<EditReport> {
    let started = Instant::now();
    let noise = cache.header.schedule.build(edit.steps)?;
    let original = bb.decode_image(cache.source_latent())?;
    let initial = bb.decode_image(cache.initial.end())?;
    let dump_dir = out.join("attention");
    if dump {
        std::fs::create_dir_all(&dump_dir).map_err(|e| PipelineError::io(&dump_dir, e))?;
    }
    let mut dump_err = None;
    let mut observer = |s: usize, p: Process, c: &AttentionCapture| {
        if dump_err.is_none() {
            dump_err = dump_capture(&dump_dir, s, p, c).err();
        }
    };
    let result = run_bam_edit(
        cache.inversion.start(),
        &cache.schedule,
        &cache.cond,
        edit,
        bb,
        &noise,
        if dump { Some(&mut observer) } else { None },
    )?;
    if let Some(e) = dump_err {
        return Err(e);
    }
    let images = vec![
        (out.join("edited.png"), &result.edited_image),
        (out.join("reconstruction.png"), &result.reconstruction_image),
        (out.join("transition.png"), &result.transition_image),
        (out.join("initial.png"), &initial),
    ];
    for (path, img) in &images {
        write_image(path, img)?;
    }
    Ok(EditReport {
        prompt: cache.header.prompt.clone(),
        omega_start: edit.omega_start,
        omega_end: edit.omega_end,
        psnr_reconstruction: psnr(&result.reconstruction_image, &original)?,
        psnr_initial: psnr(&initial, &original)?,
        psnr_edit: psnr(&result.edited_image, &original)?,
        latent_mse_edit_reconstruction: latent_mse(result.edited.end(), result.reconstruction.end())?,
        latent_mse_transition_reconstruction: latent_mse(
            result.transition.end(),
            result.reconstruction.end(),
        )?,
        self_injected_steps: result.self_injected_steps,
        cross_injected_steps: result.cross_injected_steps,
        perceptual: scorers.score(&result.edited_image, &original, &cache.header.prompt),
        images: images.into_iter().map(|(p, _)| p).collect(),
        elapsed_seconds: started.elapsed().as_secs_f64(),
        config: edit.clone(),
    })
}

/// Runs one edit, or the interpolation sweep, against a cache. Writes images
/// and `metrics.json` (plus `sweep.csv` for a sweep) under `job.out`.
pub fn edit(job: &EditJob, scorers: &ScorerRegistry) -> Result<Vec<EditReport>> {
    let cache = InversionCache::read(&job.cache)?;
    let cache_dir = job.cache_dir.clone().unwrap_or_else(weights::cache_dir);
    let bb = backbone_for_cache(&cache.header.backbone, &cache_dir)?;
    let mut edit = job.edit.clone();
    edit.steps = cache.header.steps;
    edit.validate()?;
    let mut reports = Vec::new();
    if job.sweep {
        let mut csv = String::from("omega_start,omega_end,latent_mse_edit_reconstruction,psnr_edit,psnr_reconstruction\n");
        for w in OMEGA_SWEEP {
            let e = EditConfig {
                omega_start: w,
                omega_end: edit.omega_end.min(w),
                ..edit.clone()
            };
            let dir = job.out.join(format!("omega-{w:.2}"));
            let r = edit_once(&cache, &bb, &e, &dir, job.dump_attention, scorers)?;
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                r.omega_start, r.omega_end, r.latent_mse_edit_reconstruction, r.psnr_edit, r.psnr_reconstruction
            ));
            reports.push(r);
        }
        let path = job.out.join("sweep.csv");
        std::fs::write(&path, csv).map_err(|e| PipelineError::io(&path, e))?;
    } else {
        reports.push(edit_once(&cache, &bb, &edit, &job.out, job.dump_attention, scorers)?);
    }
    write_json(&job.out.join("metrics.json"), &reports)?;
    Ok(reports)
}

#[derive(Clone, Debug, Serialize)]
pub struct ReconstructReport {
    pub prompt: String,
    pub psnr_reconstruction: f64,
    pub psnr_initial: f64,
    pub latent_psnr_reconstruction: f64,
    pub total_iterations: usize,
    pub image: Option<PathBuf>,
}

pub fn reconstruct_cache(
    cache_path: &Path,
    out: Option<&Path>,
    cache_dir: Option<&Path>,
) -> Result<ReconstructReport> {
    let cache = InversionCache::read(cache_path)?;
    let dir = cache_dir.map(Path::to_path_buf).unwrap_or_else(weights::cache_dir);
    let bb = backbone_for_cache(&cache.header.backbone, &dir)?;
    let noise = cache.header.schedule.build(cache.header.steps)?;
    let (traj, image) = reconstruct(
        &cache.schedule,
        cache.inversion.start(),
        &bb,
        &noise,
        &cache.header.sampler,
    )?;
    let original = bb.decode_image(cache.source_latent())?;
    if let Some(p) = out {
        write_image(p, &image)?;
    }
    Ok(ReconstructReport {
        prompt: cache.header.prompt.clone(),
        psnr_reconstruction: psnr(&image, &original)?,
        psnr_initial: psnr(&bb.decode_image(cache.initial.end())?, &original)?,
        latent_psnr_reconstruction: latent_psnr(traj.end(), cache.source_latent())?,
        total_iterations: cache.schedule.total_iterations(),
        image: out.map(Path::to_path_buf),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainToyReport {
    pub weights: PathBuf,
    pub loss_curve: PathBuf,
    pub steps: usize,
    pub initial_validation_loss: f64,
    pub final_validation_loss: f64,
    pub fingerprint: String,
}

/// Trains toy weights per the job's backbone section and writes them with a
/// loss-curve CSV beside them.
pub fn train_toy(job: &JobConfig, progress: impl FnMut(usize, f64)) -> Result<TrainToyReport> {
    let b = job.effective_backbone();
    if b.kind != BackboneKind::Toy {
        return Err(PipelineError::Unsupported("only the toy backbone can be trained".into()));
    }
    let out = job
        .out
        .clone()
        .unwrap_or_else(|| job.cache_dir().join(weights::weights_file_name(&b.toy, &b.train)));
    let (bb, report): (ToyBackbone, TrainReport) =
        baret_core::backbone::toy::train_toy_backbone(&b.toy, &b.train, progress)?;
    weights::save_toy(&out, &bb, &b.train, &report)?;
    let curve = out.with_extension("loss.csv");
    let mut text = String::from("step,loss\n");
    for (i, l) in report.loss_curve.iter().enumerate() {
        text.push_str(&format!("{i},{l}\n"));
    }
    std::fs::write(&curve, text).map_err(|e| PipelineError::io(&curve, e))?;
    Ok(TrainToyReport {
        weights: out,
        loss_curve: curve,
        steps: b.train.steps,
        initial_validation_loss: report.initial_validation_loss,
        final_validation_loss: report.final_validation_loss,
        fingerprint: format!("{:016x}", bb.weights_fingerprint()),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchCase {
    pub case: usize,
    pub kind: String,
    pub target_prompt: String,
    pub target_text_iterations: usize,
    pub null_text_iterations: usize,
    pub target_text_psnr: f64,
    pub null_text_psnr: f64,
    pub initial_psnr: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub suite: String,
    pub csv: PathBuf,
    pub cases: Vec<BenchCase>,
    pub target_text_total: usize,
    pub null_text_total: usize,
    /// Target-text over null-text total inner iterations.
    pub iteration_ratio: f64,
    /// Mean final per-step loss over cases, per mode, indexed by step.
    pub target_text_curve: Vec<f64>,
    pub null_text_curve: Vec<f64>,
    pub max_run_iterations: usize,
    pub max_step_iterations: usize,
    pub elapsed_seconds: f64,
}

/// Checks a run against its optimizer budget.
pub fn check_budget(
    schedule: &baret_core::ttis::FineTunedSchedule,
    opt: &baret_core::ttis::OptimizerConfig,
) -> Result<()> {
    let total = schedule.total_iterations();
    let per_step = schedule.iterations_used.iter().copied().max().unwrap_or(0);
    if total > opt.total_budget || per_step > opt.inner_iterations {
        return Err(PipelineError::Core(baret_core::Error::Config(format!(
            "budget violated: {total} total (cap {}), {per_step} in one step (cap {})",
            opt.total_budget, opt.inner_iterations
        ))));
    }
    Ok(())
}

/// Runs both inversion modes over the toy mismatch suite and writes the
/// iteration log to `csv` with a summary JSON beside it.
pub fn bench(
    job: &JobConfig,
    suite: &str,
    csv: &Path,
    mut progress: impl FnMut(&BenchCase),
) -> Result<BenchReport> {
    use baret_core::ttis::InversionMode;
    if suite != "toy" {
        return Err(PipelineError::Unsupported(format!("bench suite `{suite}`")));
    }
    let started = Instant::now();
    let b = job.effective_backbone();
    let (bb, _) = open_backbone(&b, &job.cache_dir(), |_, _| {})?;
    let noise = job.schedule.build(job.sampler.steps)?;
    let cases = crate::suites::bench_suite(b.toy.width, b.toy.height);
    let mut text = String::from("mode,case,step,inner_iter,loss,threshold\n");
    let steps = job.sampler.steps;
    let mut curves = [vec![0.0; steps], vec![0.0; steps]];
    let mut totals = [0usize; 2];
    let (mut max_run, mut max_step) = (0, 0);
    let mut out = Vec::new();
    for case in &cases {
        let z0 = bb.encode_image(&case.image)?;
        let cond = bb.encode_text(&case.target_prompt)?;
        let mut iters = [0usize; 2];
        let mut psnrs = [0.0; 2];
        let mut initial_psnr = 0.0;
        for (m, mode) in [InversionMode::TargetText, InversionMode::NullText].into_iter().enumerate() {
            let cfg = TtisConfig {
                sampler: job.sampler,
                optimizer: job.optimizer,
                mode,
                inversion_conditioning: job.inversion_conditioning,
            };
            let run = run_ttis(&z0, &cond, &bb, &noise, &cfg)?;
            check_budget(&run.schedule, &job.optimizer)?;
            for r in &run.log {
                text.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    mode.as_str(),
                    case.id,
                    r.step,
                    r.inner_iter,
                    r.loss,
                    r.threshold
                ));
            }
            for (c, l) in curves[m].iter_mut().zip(&run.schedule.per_step_loss) {
                *c += l / cases.len() as f64;
            }
            iters[m] = run.schedule.total_iterations();
            totals[m] += iters[m];
            max_run = max_run.max(iters[m]);
            max_step = max_step.max(run.schedule.iterations_used.iter().copied().max().unwrap_or(0));
            psnrs[m] = psnr(&bb.decode_image(run.reconstruction.end())?, &case.image)?;
            initial_psnr = psnr(&bb.decode_image(run.initial.end())?, &case.image)?;
        }
        let c = BenchCase {
            case: case.id,
            kind: format!("{:?}", case.kind).to_lowercase(),
            target_prompt: case.target_prompt.clone(),
            target_text_iterations: iters[0],
            null_text_iterations: iters[1],
            target_text_psnr: psnrs[0],
            null_text_psnr: psnrs[1],
            initial_psnr,
        };
        progress(&c);
        out.push(c);
    }
    if let Some(dir) = csv.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    std::fs::write(csv, text).map_err(|e| PipelineError::io(csv, e))?;
    let [target_text_curve, null_text_curve] = curves;
    let report = BenchReport {
        suite: suite.into(),
        csv: csv.into(),
        cases: out,
        target_text_total: totals[0],
        null_text_total: totals[1],
        iteration_ratio: if totals[1] == 0 {
            if totals[0] == 0 { 0.0 } else { f64::INFINITY }
        } else {
            totals[0] as f64 / totals[1] as f64
        },
        target_text_curve,
        null_text_curve,
        max_run_iterations: max_run,
        max_step_iterations: max_step,
        elapsed_seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&csv.with_extension("summary.json"), &report)?;
    Ok(report)
}
