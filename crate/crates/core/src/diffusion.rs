//! Deterministic DDIM sampling and inversion with classifier-free guidance.

use serde::{Deserialize, Serialize};

use crate::backbone::{AttentionCapture, Backbone, InjectionDirective, TextEmbedding};
use crate::error::{Error, Result};
use crate::latent::LatentTensor;

/// Parameters of the scaled-linear beta schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            train_steps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self, inference_steps: usize) -> Result<NoiseSchedule> {
        make_schedule(
            self.train_steps,
            self.beta_start,
            self.beta_end,
            inference_steps,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    train_steps: usize,
    alpha_bar: Vec<f64>,
    timestep_map: Vec<usize>,
}

/// Scaled-linear schedule: `sqrt(beta)` is linear between the square roots of
/// the endpoints. `alpha_bar[0] = 1`; inference timesteps are `1 + k * stride`
/// in decreasing order, so the last step lands on timestep 1.
pub fn make_schedule(
    train_steps: usize,
    beta_start: f64,
    beta_end: f64,
    inference_steps: usize,
) -> Result<NoiseSchedule> {
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::Parameter(format!(
            "betas must satisfy 0 < start < end < 1, got {beta_start} and {beta_end}"
        )));
    }
    if train_steps == 0 || inference_steps == 0 || inference_steps > train_steps {
        return Err(Error::Parameter(format!(
            "need 1 <= inference steps ({inference_steps}) <= train steps ({train_steps})"
        )));
    }
    let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
    let mut alpha_bar = Vec::with_capacity(train_steps + 1);
    alpha_bar.push(1.0);
    let mut prod = 1.0f64;
    for s in 0..train_steps {
        let beta = if s == 0 {
            beta_start
        } else if s + 1 == train_steps {
            beta_end
        } else {
            let r = a + (b - a) * s as f64 / (train_steps - 1) as f64;
            r * r
        };
        prod *= 1.0 - beta;
        alpha_bar.push(prod);
    }
    let stride = train_steps / inference_steps;
    let timestep_map = (0..inference_steps).rev().map(|k| 1 + k * stride).collect();
    Ok(NoiseSchedule {
        train_steps,
        alpha_bar,
        timestep_map,
    })
}

impl NoiseSchedule {
    pub fn train_steps(&self) -> usize {
        self.train_steps
    }

    pub fn inference_steps(&self) -> usize {
        self.timestep_map.len()
    }

    /// `alpha_bar[t]` for `t` in `0..=train_steps`.
    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn timestep_map(&self) -> &[usize] {
        &self.timestep_map
    }

    /// Train timestep of 1-based denoising step `s`.
    pub fn timestep(&self, s: usize) -> usize {
        self.timestep_map[s - 1]
    }

    /// Train timestep the latent reaches after denoising step `s`; 0 after
    /// the last step.
    pub fn prev_timestep(&self, s: usize) -> usize {
        self.timestep_map.get(s).copied().unwrap_or(0)
    }

    /// `(alpha_bar_t, alpha_bar_prev)` for 1-based step `s`.
    pub fn step_alphas(&self, s: usize) -> (f64, f64) {
        (
            self.alpha_bar[self.timestep(s)],
            self.alpha_bar[self.prev_timestep(s)],
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub guidance_scale: f64,
    pub steps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            guidance_scale: 7.5,
            steps: 50,
        }
    }
}

impl SamplerConfig {
    pub fn inversion(steps: usize) -> Self {
        SamplerConfig {
            guidance_scale: 1.0,
            steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        if !self.guidance_scale.is_finite() || self.guidance_scale < 0.0 {
            return Err(Error::Config(format!(
                "guidance scale must be finite and nonnegative, got {}",
                self.guidance_scale
            )));
        }
        Ok(())
    }

    fn check(&self, schedule: &NoiseSchedule) -> Result<()> {
        self.validate()?;
        if schedule.inference_steps() != self.steps {
            return Err(Error::Config(format!(
                "schedule has {} steps but the sampler asks for {}",
                schedule.inference_steps(),
                self.steps
            )));
        }
        Ok(())
    }
}

/// `eps_u + w * (eps_c - eps_u)`. At `w = 1` the conditional branch is
/// returned unchanged.
pub fn cfg_combine(
    eps_uncond: &LatentTensor,
    eps_cond: &LatentTensor,
    guidance_scale: f64,
) -> Result<LatentTensor> {
    eps_uncond.check_same_shape(eps_cond)?;
    if guidance_scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    let w = guidance_scale as f32;
    let data = eps_uncond
        .data()
        .iter()
        .zip(eps_cond.data())
        .map(|(&u, &c)| u + w * (c - u))
        .collect();
    LatentTensor::new(eps_uncond.shape(), data)
}

fn check_alpha(name: &str, a: f64) -> Result<()> {
    if a > 0.0 && a <= 1.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!("{name} must lie in (0, 1], got {a}")))
    }
}

fn ddim_move(z: &LatentTensor, eps: &LatentTensor, from: f64, to: f64) -> Result<LatentTensor> {
    z.check_same_shape(eps)?;
    let (sa, sb) = (from.sqrt(), (1.0 - from).sqrt());
    let (ta, tb) = (to.sqrt(), (1.0 - to).sqrt());
    let data = z
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&z, &e)| {
            let (z, e) = (z as f64, e as f64);
            let x0 = (z - sb * e) / sa;
            (ta * x0 + tb * e) as f32
        })
        .collect();
    LatentTensor::new(z.shape(), data)
}

/// One denoising step from `abar_t` to `abar_prev`.
pub fn ddim_sample_step(
    z_t: &LatentTensor,
    eps: &LatentTensor,
    abar_t: f64,
    abar_prev: f64,
) -> Result<LatentTensor> {
    check_alpha("abar_t", abar_t)?;
    check_alpha("abar_prev", abar_prev)?;
    ddim_move(z_t, eps, abar_t, abar_prev)
}

/// One noising step from `abar_t` to `abar_next`.
pub fn ddim_invert_step(
    z_t: &LatentTensor,
    eps: &LatentTensor,
    abar_t: f64,
    abar_next: f64,
) -> Result<LatentTensor> {
    check_alpha("abar_t", abar_t)?;
    check_alpha("abar_next", abar_next)?;
    ddim_move(z_t, eps, abar_t, abar_next)
}

/// Derivative of the sampled latent with respect to the noise prediction,
/// `sqrt(1 - abar_prev) - sqrt(abar_prev) * sqrt(1 - abar_t) / sqrt(abar_t)`.
pub fn ddim_eps_coefficient(abar_t: f64, abar_prev: f64) -> f64 {
    (1.0 - abar_prev).sqrt() - abar_prev.sqrt() * (1.0 - abar_t).sqrt() / abar_t.sqrt()
}

/// Ordered latents `Z_T ..= Z_0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub latents: Vec<LatentTensor>,
    pub guidance_scale: f64,
    pub embedding_id: String,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.latents.len() - 1
    }

    pub fn start(&self) -> &LatentTensor {
        &self.latents[0]
    }

    pub fn end(&self) -> &LatentTensor {
        self.latents.last().expect("trajectory is never empty")
    }
}

/// Source of the conditional and unconditional embeddings at each denoising
/// step (`s` is 1-based).
pub trait EmbeddingProvider {
    fn conditional(&self, s: usize) -> &TextEmbedding;
    fn unconditional(&self, s: usize) -> &TextEmbedding;
    fn id(&self) -> String;

    /// Number of steps the provider covers, if it is step-dependent.
    fn steps(&self) -> Option<usize> {
        None
    }
}

/// The same pair of embeddings at every step.
#[derive(Clone, Copy, Debug)]
pub struct ConstantEmbedding<'a> {
    pub cond: &'a TextEmbedding,
    pub uncond: &'a TextEmbedding,
}

impl EmbeddingProvider for ConstantEmbedding<'_> {
    fn conditional(&self, _: usize) -> &TextEmbedding {
        self.cond
    }

    fn unconditional(&self, _: usize) -> &TextEmbedding {
        self.uncond
    }

    fn id(&self) -> String {
        "constant".into()
    }
}

/// Per-step conditional embeddings, optionally with per-step unconditional
/// embeddings too.
#[derive(Clone, Copy, Debug)]
pub struct StepEmbeddings<'a> {
    pub cond: StepSource<'a>,
    pub uncond: StepSource<'a>,
}

#[derive(Clone, Copy, Debug)]
pub enum StepSource<'a> {
    Fixed(&'a TextEmbedding),
    PerStep(&'a [TextEmbedding]),
}

impl<'a> StepSource<'a> {
    fn at(&self, s: usize) -> &'a TextEmbedding {
        match *self {
            StepSource::Fixed(e) => e,
            StepSource::PerStep(v) => &v[s - 1],
        }
    }

    fn len(&self) -> Option<usize> {
        match self {
            StepSource::Fixed(_) => None,
            StepSource::PerStep(v) => Some(v.len()),
        }
    }
}

impl EmbeddingProvider for StepEmbeddings<'_> {
    fn conditional(&self, s: usize) -> &TextEmbedding {
        self.cond.at(s)
    }

    fn unconditional(&self, s: usize) -> &TextEmbedding {
        self.uncond.at(s)
    }

    fn id(&self) -> String {
        "per-step".into()
    }

    fn steps(&self) -> Option<usize> {
        match (self.cond.len(), self.uncond.len()) {
            (Some(a), Some(b)) if a != b => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }
}

/// Guided noise prediction. Capture and injection apply to the conditional
/// branch only; the unconditional branch is skipped at guidance 1.
#[allow(clippy::too_many_arguments)]
pub fn guided_noise(
    backbone: &dyn Backbone,
    z: &LatentTensor,
    t: usize,
    cond: &TextEmbedding,
    uncond: &TextEmbedding,
    guidance_scale: f64,
    capture: bool,
    directive: Option<&InjectionDirective>,
) -> Result<(LatentTensor, Option<AttentionCapture>)> {
    let c = backbone.predict_noise(z, t, cond, capture, directive)?;
    if guidance_scale == 1.0 {
        return Ok((c.eps, c.capture));
    }
    let u = backbone.predict_noise(z, t, uncond, false, None)?;
    Ok((cfg_combine(&u.eps, &c.eps, guidance_scale)?, c.capture))
}

fn numeric_guard(z: &LatentTensor, t: usize) -> Result<()> {
    if z.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric {
            step: t,
            what: "latent".into(),
        })
    }
}

/// Runs `steps` DDIM denoising steps from `z_t`. `directives[s - 1]`, when
/// given, is applied to the conditional branch at step `s`.
pub fn sample_trajectory(
    z_t: &LatentTensor,
    embeddings: &dyn EmbeddingProvider,
    backbone: &dyn Backbone,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    directives: Option<&[Option<InjectionDirective>]>,
) -> Result<Trajectory> {
    cfg.check(schedule)?;
    crate::backbone::check_latent(backbone, z_t)?;
    if let Some(n) = embeddings.steps().filter(|&n| n != cfg.steps) {
        return Err(Error::Config(format!(
            "embedding schedule has {n} entries for {} steps",
            cfg.steps
        )));
    }
    if let Some(d) = directives {
        if d.len() != cfg.steps {
            return Err(Error::Config(format!(
                "{} directives for {} steps",
                d.len(),
                cfg.steps
            )));
        }
    }
    let mut latents = Vec::with_capacity(cfg.steps + 1);
    latents.push(z_t.clone());
    for s in 1..=cfg.steps {
        let t = schedule.timestep(s);
        let (abar_t, abar_prev) = schedule.step_alphas(s);
        let directive = directives.and_then(|d| d[s - 1].as_ref());
        let z = &latents[s - 1];
        let (eps, _) = guided_noise(
            backbone,
            z,
            t,
            embeddings.conditional(s),
            embeddings.unconditional(s),
            cfg.guidance_scale,
            false,
            directive,
        )?;
        let next = ddim_sample_step(z, &eps, abar_t, abar_prev)?;
        numeric_guard(&next, t)?;
        latents.push(next);
    }
    Ok(Trajectory {
        latents,
        guidance_scale: cfg.guidance_scale,
        embedding_id: embeddings.id(),
    })
}

/// DDIM inversion of `z_0`. Noise is predicted at the current latent and the
/// next (noisier) timestep. Index 0 of the result is `Z_T`, index `T` is `z_0`.
pub fn invert_trajectory(
    z_0: &LatentTensor,
    embedding: &TextEmbedding,
    uncond: &TextEmbedding,
    backbone: &dyn Backbone,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<Trajectory> {
    cfg.check(schedule)?;
    crate::backbone::check_latent(backbone, z_0)?;
    let abar = schedule.alpha_bar();
    let mut rev = Vec::with_capacity(cfg.steps + 1);
    rev.push(z_0.clone());
    for s in (1..=cfg.steps).rev() {
        let t_next = schedule.timestep(s);
        let t_cur = schedule.prev_timestep(s);
        let z = rev.last().expect("non-empty");
        let (eps, _) = guided_noise(
            backbone,
            z,
            t_next,
            embedding,
            uncond,
            cfg.guidance_scale,
            false,
            None,
        )?;
        let next = ddim_invert_step(z, &eps, abar[t_cur], abar[t_next])?;
        numeric_guard(&next, t_next)?;
        rev.push(next);
    }
    rev.reverse();
    Ok(Trajectory {
        latents: rev,
        guidance_scale: cfg.guidance_scale,
        embedding_id: if embedding.is_null() { "null" } else { "target" }.into(),
    })
}
