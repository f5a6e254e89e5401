//! Progressive transition embeddings and balanced attention injection across
//! three lockstep DDIM processes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    AttentionCapture, AttentionKind, Backbone, InjectionDirective, Provenance, RgbImage,
    TextEmbedding,
};
use crate::diffusion::{
    ddim_sample_step, guided_noise, sample_trajectory, NoiseSchedule, SamplerConfig,
    StepEmbeddings, StepSource, Trajectory,
};
use crate::error::{Error, Result};
use crate::latent::LatentTensor;
use crate::ttis::{FineTunedSchedule, InversionMode};

/// Interpolation weights, first denoising step first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpolationSchedule {
    pub omegas: Vec<f64>,
}

impl InterpolationSchedule {
    pub fn constant(omega: f64, steps: usize) -> Result<Self> {
        check_unit("omega", omega)?;
        Ok(InterpolationSchedule {
            omegas: vec![omega; steps],
        })
    }

    pub fn len(&self) -> usize {
        self.omegas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omegas.is_empty()
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Parameter(format!("{name} must lie in [0, 1], got {v}")))
    }
}

fn check_ramp(start: f64, end: f64, steps: usize) -> Result<()> {
    check_unit("omega_start", start)?;
    check_unit("omega_end", end)?;
    if end > start {
        return Err(Error::Parameter(format!(
            "omega_end ({end}) must not exceed omega_start ({start})"
        )));
    }
    if steps == 0 {
        return Err(Error::Parameter("schedule needs at least one step".into()));
    }
    Ok(())
}

/// Linear ramp from `start` at the first step to `end` at the last, or all
/// ones in rigid mode.
pub fn omega_schedule(start: f64, end: f64, steps: usize, rigid: bool) -> Result<InterpolationSchedule> {
    check_ramp(start, end, steps)?;
    if rigid {
        return InterpolationSchedule::constant(1.0, steps);
    }
    let omegas = (1..=steps)
        .map(|s| {
            if steps == 1 {
                start
            } else {
                start + (s - 1) as f64 / (steps - 1) as f64 * (end - start)
            }
        })
        .collect();
    Ok(InterpolationSchedule { omegas })
}

/// Weights drawn uniformly from `[end, start]` and sorted in decreasing order.
pub fn omega_schedule_uniform(
    start: f64,
    end: f64,
    steps: usize,
    seed: u64,
) -> Result<InterpolationSchedule> {
    check_ramp(start, end, steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut omegas: Vec<f64> = (0..steps)
        .map(|_| if start > end { rng.random_range(end..=start) } else { start })
        .collect();
    omegas.sort_by(|a, b| b.total_cmp(a));
    Ok(InterpolationSchedule { omegas })
}

/// `omega * opt + (1 - omega) * cond`, exact at both endpoints.
pub fn interpolate_embedding(
    opt: &TextEmbedding,
    cond: &TextEmbedding,
    omega: f64,
) -> Result<TextEmbedding> {
    opt.check_same_shape(cond)?;
    check_unit("omega", omega)?;
    if omega == 1.0 {
        return Ok(opt.clone());
    }
    if omega == 0.0 {
        return Ok(cond.clone());
    }
    let tokens = opt
        .tokens()
        .iter()
        .zip(cond.tokens())
        .map(|(&a, &b)| (omega * a as f64 + (1.0 - omega) * b as f64) as f32)
        .collect();
    cond.with_tokens(tokens)
}

/// Which end of the denoising run the injection windows cover.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowAnchor {
    /// The first (noisiest) steps.
    #[default]
    Early,
    /// The last steps.
    Late,
}

/// True iff 1-based step `s` falls in the first `floor(fraction * steps)`
/// steps. A tiny tolerance absorbs binary rounding of `fraction * steps`.
pub fn injection_window(s: usize, fraction: f64, steps: usize) -> bool {
    s <= window_len(fraction, steps)
}

fn window_len(fraction: f64, steps: usize) -> usize {
    (fraction * steps as f64 + 1e-9).floor() as usize
}

fn in_window(s: usize, fraction: f64, steps: usize, anchor: WindowAnchor) -> bool {
    match anchor {
        WindowAnchor::Early => injection_window(s, fraction, steps),
        WindowAnchor::Late => s > steps - window_len(fraction, steps).min(steps),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OmegaSampling {
    #[default]
    Linear,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditConfig {
    pub omega_start: f64,
    pub omega_end: f64,
    /// Fraction of steps whose self-attention comes from reconstruction.
    pub sa_fraction: f64,
    /// Fraction of steps whose cross-attention comes from the transition.
    pub ca_fraction: f64,
    pub rigid_mode: bool,
    pub guidance_scale: f64,
    pub steps: usize,
    pub omega_sampling: OmegaSampling,
    pub omega_seed: u64,
    pub window_anchor: WindowAnchor,
    /// Layers that receive injected maps; all layers when absent.
    pub layers: Option<Vec<String>>,
}

impl Default for EditConfig {
    fn default() -> Self {
        EditConfig {
            omega_start: 0.8,
            omega_end: 0.1,
            sa_fraction: 0.3,
            ca_fraction: 0.6,
            rigid_mode: false,
            guidance_scale: 7.5,
            steps: 50,
            omega_sampling: OmegaSampling::Linear,
            omega_seed: 0,
            window_anchor: WindowAnchor::Early,
            layers: None,
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        check_unit("sa_fraction", self.sa_fraction)?;
        check_unit("ca_fraction", self.ca_fraction)?;
        check_ramp(self.omega_start, self.omega_end, self.steps)?;
        self.sampler().validate()
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            guidance_scale: self.guidance_scale,
            steps: self.steps,
        }
    }

    pub fn interpolation(&self) -> Result<InterpolationSchedule> {
        match (self.rigid_mode, self.omega_sampling) {
            (false, OmegaSampling::Uniform) => {
                omega_schedule_uniform(self.omega_start, self.omega_end, self.steps, self.omega_seed)
            }
            _ => omega_schedule(self.omega_start, self.omega_end, self.steps, self.rigid_mode),
        }
    }

    fn accepts(&self, id: &str) -> bool {
        self.layers
            .as_ref()
            .is_none_or(|ls| ls.iter().any(|l| l == id))
    }
}

/// Output of an edit: the three trajectories share their first latent.
#[derive(Clone, Debug, PartialEq)]
pub struct EditResult {
    pub edited: Trajectory,
    pub transition: Trajectory,
    pub reconstruction: Trajectory,
    pub omegas: InterpolationSchedule,
    pub edited_image: RgbImage,
    pub transition_image: RgbImage,
    pub reconstruction_image: RgbImage,
    /// Number of steps that received self- and cross-attention maps.
    pub self_injected_steps: usize,
    pub cross_injected_steps: usize,
}

/// Which process a capture passed to an edit observer came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Process {
    Reconstruction,
    Transition,
}

/// Receives every capture made during an edit, with its 1-based step.
pub type CaptureObserver<'a> = &'a mut dyn FnMut(usize, Process, &AttentionCapture);

fn transition_embeddings(
    schedule: &FineTunedSchedule,
    cond: &TextEmbedding,
    omegas: &InterpolationSchedule,
) -> Result<Vec<TextEmbedding>> {
    schedule
        .embeddings
        .iter()
        .zip(&omegas.omegas)
        .map(|(e, &w)| interpolate_embedding(e, cond, w))
        .collect()
}

fn check_schedule(schedule: &FineTunedSchedule, steps: usize, omegas: &InterpolationSchedule) -> Result<()> {
    if schedule.mode != InversionMode::TargetText {
        return Err(Error::Config(
            "editing needs a schedule of fine-tuned target embeddings".into(),
        ));
    }
    if schedule.steps() != steps || omegas.len() != steps {
        return Err(Error::Config(format!(
            "schedule ({}) and interpolation ({}) must both have {steps} steps",
            schedule.steps(),
            omegas.len()
        )));
    }
    Ok(())
}

/// Runs reconstruction, transition and editing in lockstep from `z_t`.
///
/// At step `s` the editing process receives self-attention maps from the
/// reconstruction process while `s` is inside the `sa_fraction` window and
/// cross-attention maps from the transition process inside the `ca_fraction`
/// window. Maps replace softmax outputs of the conditional branch only; value
/// projections stay with the editing process.
pub fn run_bam_edit(
    z_t: &LatentTensor,
    schedule: &FineTunedSchedule,
    cond: &TextEmbedding,
    cfg: &EditConfig,
    backbone: &dyn Backbone,
    noise: &NoiseSchedule,
    mut observer: Option<CaptureObserver<'_>>,
) -> Result<EditResult> {
    cfg.validate()?;
    let caps = backbone.capabilities();
    if !caps.attention_capture {
        return Err(Error::Unsupported("attention capture"));
    }
    if !caps.attention_injection {
        return Err(Error::Unsupported("attention injection"));
    }
    let steps = cfg.steps;
    if noise.inference_steps() != steps {
        return Err(Error::Config(format!(
            "noise schedule has {} steps, edit asks for {steps}",
            noise.inference_steps()
        )));
    }
    let omegas = cfg.interpolation()?;
    check_schedule(schedule, steps, &omegas)?;
    crate::backbone::check_latent(backbone, z_t)?;
    let inp = transition_embeddings(schedule, cond, &omegas)?;
    let null = &schedule.fixed;
    let w = cfg.guidance_scale;

    let mut rec = vec![z_t.clone()];
    let mut tra = vec![z_t.clone()];
    let mut edt = vec![z_t.clone()];
    let (mut n_sa, mut n_ca) = (0, 0);
    for s in 1..=steps {
        let t = noise.timestep(s);
        let (abar_t, abar_prev) = noise.step_alphas(s);
        let sa = in_window(s, cfg.sa_fraction, steps, cfg.window_anchor);
        let ca = in_window(s, cfg.ca_fraction, steps, cfg.window_anchor);
        let watch = observer.is_some();

        let (eps_r, cap_r) = guided_noise(
            backbone,
            &rec[s - 1],
            t,
            &schedule.embeddings[s - 1],
            null,
            w,
            sa || watch,
            None,
        )?;
        let (eps_t, cap_t) =
            guided_noise(backbone, &tra[s - 1], t, &inp[s - 1], null, w, ca || watch, None)?;

        let mut directive = InjectionDirective::new();
        if sa {
            let cap = cap_r.as_ref().ok_or(Error::Unsupported("attention capture"))?;
            directive.extend_from_capture(
                cap,
                AttentionKind::SelfAttention,
                Provenance::Reconstruction,
                |id| cfg.accepts(id),
            );
            n_sa += 1;
        }
        if ca {
            let cap = cap_t.as_ref().ok_or(Error::Unsupported("attention capture"))?;
            directive.extend_from_capture(
                cap,
                AttentionKind::CrossAttention,
                Provenance::Transition,
                |id| cfg.accepts(id),
            );
            n_ca += 1;
        }
        if let Some(obs) = observer.as_mut() {
            if let Some(c) = &cap_r {
                obs(s, Process::Reconstruction, c);
            }
            if let Some(c) = &cap_t {
                obs(s, Process::Transition, c);
            }
        }
        let directive = (!directive.is_empty()).then_some(directive);
        let (eps_e, _) = guided_noise(
            backbone,
            &edt[s - 1],
            t,
            cond,
            null,
            w,
            false,
            directive.as_ref(),
        )?;

        rec.push(ddim_sample_step(&rec[s - 1], &eps_r, abar_t, abar_prev)?);
        tra.push(ddim_sample_step(&tra[s - 1], &eps_t, abar_t, abar_prev)?);
        edt.push(ddim_sample_step(&edt[s - 1], &eps_e, abar_t, abar_prev)?);
        for z in [&rec[s], &tra[s], &edt[s]] {
            if !z.is_finite() {
                return Err(Error::Numeric {
                    step: t,
                    what: "edit latent".into(),
                });
            }
        }
    }
    let traj = |latents, id: &str| Trajectory {
        latents,
        guidance_scale: w,
        embedding_id: id.into(),
    };
    let (edited, transition, reconstruction) = (
        traj(edt, "edit"),
        traj(tra, "transition"),
        traj(rec, "fine-tuned"),
    );
    Ok(EditResult {
        edited_image: backbone.decode_image(edited.end())?,
        transition_image: backbone.decode_image(transition.end())?,
        reconstruction_image: backbone.decode_image(reconstruction.end())?,
        edited,
        transition,
        reconstruction,
        omegas,
        self_injected_steps: n_sa,
        cross_injected_steps: n_ca,
    })
}

/// Plain guided sampling under the transition embeddings.
pub fn run_transition_only(
    z_t: &LatentTensor,
    schedule: &FineTunedSchedule,
    cond: &TextEmbedding,
    omegas: &InterpolationSchedule,
    backbone: &dyn Backbone,
    noise: &NoiseSchedule,
    sampler: &SamplerConfig,
) -> Result<(Trajectory, RgbImage)> {
    check_schedule(schedule, sampler.steps, omegas)?;
    let inp = transition_embeddings(schedule, cond, omegas)?;
    let provider = StepEmbeddings {
        cond: StepSource::PerStep(&inp),
        uncond: StepSource::Fixed(&schedule.fixed),
    };
    let mut traj = sample_trajectory(z_t, &provider, backbone, noise, sampler, None)?;
    traj.embedding_id = "transition".into();
    let image = backbone.decode_image(traj.end())?;
    Ok((traj, image))
}
