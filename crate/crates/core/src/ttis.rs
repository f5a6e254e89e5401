//! Per-timestep embedding fine-tuning that pulls guided sampling onto the
//! inversion trajectory, with a null-text baseline for comparison.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, LossEval, RgbImage, TextEmbedding};
use crate::diffusion::{
    cfg_combine, ddim_eps_coefficient, ddim_sample_step, invert_trajectory, sample_trajectory,
    ConstantEmbedding, NoiseSchedule, SamplerConfig, StepEmbeddings, StepSource, Trajectory,
};
use crate::error::{Error, Result};
use crate::latent::LatentTensor;
use crate::optim::Adam;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InversionMode {
    /// Optimize the conditional (target prompt) embedding; the null branch is fixed.
    #[default]
    TargetText,
    /// Optimize the null embedding; the conditional branch is fixed.
    NullText,
}

impl InversionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            InversionMode::TargetText => "target-text",
            InversionMode::NullText => "null-text",
        }
    }
}

/// Which embedding conditions the guidance-1 inversion pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InversionConditioning {
    #[default]
    Target,
    Null,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// Maximum Adam iterations per denoising step.
    pub inner_iterations: usize,
    /// Hard cap on iterations over the whole run.
    pub total_budget: usize,
    pub threshold_coefficient: f64,
    /// Scale the threshold by the train timestep instead of the number of
    /// denoising steps taken so far.
    pub literal_threshold_index: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.001,
            inner_iterations: 5,
            total_budget: 250,
            threshold_coefficient: 1e-5,
            literal_threshold_index: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and nonnegative, got {}",
                self.learning_rate
            )));
        }
        if !(self.threshold_coefficient >= 0.0 && self.threshold_coefficient.is_finite()) {
            return Err(Error::Config("threshold coefficient must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Early-stopping loss threshold after `step_counter` denoising steps.
pub fn early_stop_threshold(step_counter: usize, coefficient: f64) -> f64 {
    step_counter as f64 * coefficient
}

/// Mean squared error between two latents.
pub fn reconstruction_loss(z_pred: &LatentTensor, z_target: &LatentTensor) -> Result<f64> {
    z_pred.mse(z_target)
}

/// Output of a fine-tuning run: one embedding per denoising step, first step
/// first.
#[derive(Clone, Debug, PartialEq)]
pub struct FineTunedSchedule {
    pub mode: InversionMode,
    /// Optimized embeddings: conditional in target-text mode, null otherwise.
    pub embeddings: Vec<TextEmbedding>,
    /// The embedding held fixed: null in target-text mode, conditional otherwise.
    pub fixed: TextEmbedding,
    pub initial_loss: Vec<f64>,
    pub per_step_loss: Vec<f64>,
    pub iterations_used: Vec<usize>,
}

impl FineTunedSchedule {
    /// A schedule that repeats `cond` at every step with no optimization.
    pub fn constant(cond: &TextEmbedding, null: &TextEmbedding, steps: usize) -> Self {
        FineTunedSchedule {
            mode: InversionMode::TargetText,
            embeddings: vec![cond.clone(); steps],
            fixed: null.clone(),
            initial_loss: vec![0.0; steps],
            per_step_loss: vec![0.0; steps],
            iterations_used: vec![0; steps],
        }
    }

    pub fn steps(&self) -> usize {
        self.embeddings.len()
    }

    pub fn total_iterations(&self) -> usize {
        self.iterations_used.iter().sum()
    }

    /// Per-step embedding provider for sampling with this schedule.
    pub fn provider(&self) -> StepEmbeddings<'_> {
        match self.mode {
            InversionMode::TargetText => StepEmbeddings {
                cond: StepSource::PerStep(&self.embeddings),
                uncond: StepSource::Fixed(&self.fixed),
            },
            InversionMode::NullText => StepEmbeddings {
                cond: StepSource::Fixed(&self.fixed),
                uncond: StepSource::PerStep(&self.embeddings),
            },
        }
    }
}

/// One optimizer iteration, as written to the bench log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub mode: InversionMode,
    pub step: usize,
    pub timestep: usize,
    pub inner_iter: usize,
    pub loss: f64,
    pub threshold: f64,
}

/// Inputs of a single-timestep fine-tuning problem.
#[derive(Clone, Copy, Debug)]
pub struct TimestepProblem<'a> {
    /// 1-based denoising step.
    pub step: usize,
    pub z_star: &'a LatentTensor,
    pub z_target_prev: &'a LatentTensor,
    pub cond: &'a TextEmbedding,
    pub uncond: &'a TextEmbedding,
    pub mode: InversionMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimestepResult {
    pub embedding: TextEmbedding,
    pub z_star_prev: LatentTensor,
    pub iterations: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Loss after each optimizer iteration.
    pub losses: Vec<f64>,
    pub threshold: f64,
}

/// Fine-tunes one embedding at denoising step `problem.step`. Runs at most
/// `min(inner_iterations, budget_left)` Adam iterations, stopping once the
/// loss reaches the threshold. The returned latent is the guided DDIM step
/// under the final embedding.
pub fn finetune_timestep(
    backbone: &dyn Backbone,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    opt: &OptimizerConfig,
    problem: TimestepProblem<'_>,
    budget_left: usize,
) -> Result<TimestepResult> {
    opt.validate()?;
    let s = problem.step;
    if s == 0 || s > schedule.inference_steps() {
        return Err(Error::Config(format!("step {s} outside the schedule")));
    }
    let t = schedule.timestep(s);
    let (abar_t, abar_prev) = schedule.step_alphas(s);
    let w = sampler.guidance_scale;
    let counter = if opt.literal_threshold_index { t } else { s };
    let threshold = early_stop_threshold(counter, opt.threshold_coefficient);
    let max_iters = opt.inner_iterations.min(budget_left);

    let (init, fixed) = match problem.mode {
        InversionMode::TargetText => (problem.cond, problem.uncond),
        InversionMode::NullText => (problem.uncond, problem.cond),
    };
    // The fixed branch does not depend on the optimized embedding. At
    // guidance 1 the null branch is never evaluated.
    let fixed_eps = match (problem.mode, w == 1.0) {
        (InversionMode::TargetText, true) => None,
        _ => Some(backbone.predict_noise(problem.z_star, t, fixed, false, None)?.eps),
    };
    let branch_scale = match problem.mode {
        InversionMode::TargetText => w,
        InversionMode::NullText => 1.0 - w,
    };
    let grad_scale = branch_scale * ddim_eps_coefficient(abar_t, abar_prev);

    let evaluate = |emb: &TextEmbedding, want_grad: bool| -> Result<(f64, Option<Vec<f32>>, LatentTensor)> {
        let mut z_pred = None;
        let mut loss = |eps_var: &LatentTensor| -> Result<LossEval> {
            let eps = match (problem.mode, &fixed_eps) {
                (InversionMode::TargetText, None) => eps_var.clone(),
                (InversionMode::TargetText, Some(u)) => cfg_combine(u, eps_var, w)?,
                (InversionMode::NullText, Some(c)) => cfg_combine(eps_var, c, w)?,
                (InversionMode::NullText, None) => unreachable!("null branch always evaluated"),
            };
            let z = ddim_sample_step(problem.z_star, &eps, abar_t, abar_prev)?;
            let value = reconstruction_loss(&z, problem.z_target_prev)?;
            let grad = (want_grad && value > threshold).then(|| {
                let k = 2.0 * grad_scale / z.data().len() as f64;
                let data = z
                    .data()
                    .iter()
                    .zip(problem.z_target_prev.data())
                    .map(|(&p, &q)| (k * (p as f64 - q as f64)) as f32)
                    .collect();
                LatentTensor::new(z.shape(), data).expect("same shape")
            });
            z_pred = Some(z);
            Ok(LossEval { value, grad })
        };
        let out = if want_grad {
            backbone.gradient_wrt_embedding(problem.z_star, t, emb, &mut loss)?
        } else {
            let eps = backbone.predict_noise(problem.z_star, t, emb, false, None)?.eps;
            let value = loss(&eps)?.value;
            crate::backbone::EmbeddingGradient {
                eps,
                loss: value,
                grad: None,
            }
        };
        if !out.loss.is_finite() {
            return Err(Error::Numeric {
                step: s,
                what: "fine-tuning loss".into(),
            });
        }
        Ok((out.loss, out.grad, z_pred.expect("loss evaluated")))
    };

    let mut var = init.clone();
    let (mut loss, mut grad, mut z_pred) = evaluate(&var, max_iters > 0)?;
    let initial_loss = loss;
    let mut adam = Adam::<f32>::new(opt.learning_rate, &[var.tokens().len()]);
    let mut losses = Vec::new();
    while loss > threshold && losses.len() < max_iters {
        let g = grad.take().ok_or(Error::Unsupported("embedding gradients"))?;
        let mut tokens = var.tokens().to_vec();
        adam.step(&mut [&mut tokens], &[Some(&g)]);
        var = var.with_tokens(tokens)?;
        let want_grad = losses.len() + 1 < max_iters;
        (loss, grad, z_pred) = evaluate(&var, want_grad)?;
        losses.push(loss);
    }
    Ok(TimestepResult {
        embedding: var,
        z_star_prev: z_pred,
        iterations: losses.len(),
        initial_loss,
        final_loss: loss,
        losses,
        threshold,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TtisConfig {
    pub sampler: SamplerConfig,
    pub optimizer: OptimizerConfig,
    pub mode: InversionMode,
    pub inversion_conditioning: InversionConditioning,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TtisRun {
    pub schedule: FineTunedSchedule,
    /// Guidance-1 inversion `{Z_t}`.
    pub inversion: Trajectory,
    /// Guided sampling from `Z_T` under the plain target embedding.
    pub initial: Trajectory,
    /// The fine-tuned guided trajectory `{Z*_t}`.
    pub reconstruction: Trajectory,
    pub log: Vec<IterationRecord>,
}

/// Inverts `z_0`, runs the initial guided pass, then fine-tunes one
/// embedding per denoising step. Once the iteration budget is spent the
/// remaining steps run without optimization.
pub fn run_ttis(
    z_0: &LatentTensor,
    cond: &TextEmbedding,
    backbone: &dyn Backbone,
    schedule: &NoiseSchedule,
    cfg: &TtisConfig,
) -> Result<TtisRun> {
    cfg.optimizer.validate()?;
    if cond.is_null() {
        return Err(Error::Config("target prompt must not be empty".into()));
    }
    if !backbone.capabilities().gradient_wrt_embedding {
        return Err(Error::Unsupported("embedding gradients"));
    }
    let null = backbone.null_embedding();
    let steps = cfg.sampler.steps;
    let inv_emb = match cfg.inversion_conditioning {
        InversionConditioning::Target => cond,
        InversionConditioning::Null => null,
    };
    let inversion = invert_trajectory(
        z_0,
        inv_emb,
        null,
        backbone,
        schedule,
        &SamplerConfig::inversion(steps),
    )?;
    let z_t = inversion.start().clone();
    let initial = sample_trajectory(
        &z_t,
        &ConstantEmbedding { cond, uncond: null },
        backbone,
        schedule,
        &cfg.sampler,
        None,
    )?;

    let fixed = match cfg.mode {
        InversionMode::TargetText => null.clone(),
        InversionMode::NullText => cond.clone(),
    };
    let mut out = FineTunedSchedule {
        mode: cfg.mode,
        embeddings: Vec::with_capacity(steps),
        fixed,
        initial_loss: Vec::with_capacity(steps),
        per_step_loss: Vec::with_capacity(steps),
        iterations_used: Vec::with_capacity(steps),
    };
    let mut latents = Vec::with_capacity(steps + 1);
    latents.push(z_t);
    let mut log = Vec::new();
    let mut used = 0usize;
    for s in 1..=steps {
        let r = finetune_timestep(
            backbone,
            schedule,
            &cfg.sampler,
            &cfg.optimizer,
            TimestepProblem {
                step: s,
                z_star: &latents[s - 1],
                z_target_prev: &inversion.latents[s],
                cond,
                uncond: null,
                mode: cfg.mode,
            },
            cfg.optimizer.total_budget.saturating_sub(used),
        )?;
        used += r.iterations;
        log.extend(r.losses.iter().enumerate().map(|(k, &loss)| IterationRecord {
            mode: cfg.mode,
            step: s,
            timestep: schedule.timestep(s),
            inner_iter: k + 1,
            loss,
            threshold: r.threshold,
        }));
        out.embeddings.push(r.embedding);
        out.initial_loss.push(r.initial_loss);
        out.per_step_loss.push(r.final_loss);
        out.iterations_used.push(r.iterations);
        latents.push(r.z_star_prev);
    }
    Ok(TtisRun {
        schedule: out,
        inversion,
        initial,
        reconstruction: Trajectory {
            latents,
            guidance_scale: cfg.sampler.guidance_scale,
            embedding_id: "fine-tuned".into(),
        },
        log,
    })
}

/// Guided sampling from `z_t` with the fine-tuned schedule; returns the
/// trajectory and the decoded final latent.
pub fn reconstruct(
    schedule: &FineTunedSchedule,
    z_t: &LatentTensor,
    backbone: &dyn Backbone,
    noise: &NoiseSchedule,
    sampler: &SamplerConfig,
) -> Result<(Trajectory, RgbImage)> {
    if schedule.steps() != sampler.steps {
        return Err(Error::Config(format!(
            "schedule has {} steps, sampler {}",
            schedule.steps(),
            sampler.steps
        )));
    }
    let mut traj = sample_trajectory(z_t, &schedule.provider(), backbone, noise, sampler, None)?;
    traj.embedding_id = "fine-tuned".into();
    let image = backbone.decode_image(traj.end())?;
    Ok((traj, image))
}
