//! The inversion cache written by `invert` and read by `edit` and
//! `reconstruct`.

use std::path::{Path, PathBuf};

use baret_core::backbone::toy::ToyBackboneConfig;
use baret_core::backbone::TextEmbedding;
use baret_core::backbone::toy::TrainConfig;
use baret_core::diffusion::{SamplerConfig, ScheduleConfig, Trajectory};
use baret_core::latent::{LatentShape, LatentTensor};
use baret_core::ttis::{
    FineTunedSchedule, InversionConditioning, InversionMode, OptimizerConfig, TtisRun,
};
use serde::{Deserialize, Serialize};

use crate::cache::{self, CacheError, Kind};
use crate::error::{PipelineError, Result};

/// Identifies the backbone an inversion was computed with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneRef {
    pub toy: ToyBackboneConfig,
    pub train: TrainConfig,
    pub weights_path: PathBuf,
    pub fingerprint: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionHeader {
    pub steps: usize,
    pub embedding_shape: (usize, usize),
    pub latent_shape: LatentShape,
    pub sampler: SamplerConfig,
    pub schedule: ScheduleConfig,
    pub optimizer: OptimizerConfig,
    pub mode: InversionMode,
    pub inversion_conditioning: InversionConditioning,
    pub prompt: String,
    pub backbone: BackboneRef,
    pub initial_loss: Vec<f64>,
    pub per_step_loss: Vec<f64>,
    pub iterations_used: Vec<usize>,
}

/// Everything needed to edit or reconstruct without re-running inversion.
#[derive(Clone, Debug, PartialEq)]
pub struct InversionCache {
    pub header: InversionHeader,
    pub cond: TextEmbedding,
    pub null: TextEmbedding,
    pub schedule: FineTunedSchedule,
    pub inversion: Trajectory,
    pub initial: Trajectory,
    pub reconstruction: Trajectory,
}

impl InversionCache {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        run: TtisRun,
        cond: TextEmbedding,
        null: TextEmbedding,
        prompt: String,
        schedule_cfg: ScheduleConfig,
        inversion_conditioning: InversionConditioning,
        optimizer: OptimizerConfig,
        backbone: BackboneRef,
    ) -> Self {
        let header = InversionHeader {
            steps: run.schedule.steps(),
            embedding_shape: cond.shape(),
            latent_shape: run.inversion.start().shape(),
            sampler: SamplerConfig {
                guidance_scale: run.reconstruction.guidance_scale,
                steps: run.schedule.steps(),
            },
            schedule: schedule_cfg,
            optimizer,
            mode: run.schedule.mode,
            inversion_conditioning,
            prompt,
            backbone,
            initial_loss: run.schedule.initial_loss.clone(),
            per_step_loss: run.schedule.per_step_loss.clone(),
            iterations_used: run.schedule.iterations_used.clone(),
        };
        InversionCache {
            header,
            cond,
            null,
            schedule: run.schedule,
            inversion: run.inversion,
            initial: run.initial,
            reconstruction: run.reconstruction,
        }
    }

    /// The original image latent, the end of the inversion trajectory.
    pub fn source_latent(&self) -> &LatentTensor {
        self.inversion.end()
    }

    /// Payload order: conditional and null embeddings, the fixed embedding,
    /// the per-step schedule, then the inversion, initial-pass and
    /// fine-tuned trajectories.
    fn payload(&self) -> Vec<f32> {
        let mut p = Vec::new();
        for e in [&self.cond, &self.null, &self.schedule.fixed] {
            p.extend_from_slice(e.tokens());
        }
        for e in &self.schedule.embeddings {
            p.extend_from_slice(e.tokens());
        }
        for t in [&self.inversion, &self.initial, &self.reconstruction] {
            for z in &t.latents {
                p.extend_from_slice(z.data());
            }
        }
        p
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CacheError> {
        cache::encode(Kind::Inversion, &self.header, &self.payload())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CacheError> {
        let (header, payload): (InversionHeader, Vec<f32>) = cache::decode(bytes, Kind::Inversion)?;
        let bad = |m: &str| CacheError::Header(m.to_string());
        let (l, d) = header.embedding_shape;
        let n_emb = l * d;
        let n_lat = header.latent_shape.numel();
        let t = header.steps;
        if header.per_step_loss.len() != t
            || header.initial_loss.len() != t
            || header.iterations_used.len() != t
        {
            return Err(bad("per-step records do not match the step count"));
        }
        let expected = n_emb * (3 + t) + 3 * n_lat * (t + 1);
        if payload.len() != expected {
            return Err(bad("payload length does not match the header"));
        }
        let mut chunks = payload.chunks_exact(n_emb);
        let null_tokens = &payload[n_emb..2 * n_emb];
        // The null flag is not stored; an embedding is null iff its entries
        // are bit-identical to the null embedding.
        let mut emb = || {
            let tokens = chunks.next().expect("sized");
            let is_null = tokens
                .iter()
                .zip(null_tokens)
                .all(|(a, b)| a.to_bits() == b.to_bits());
            TextEmbedding::new(l, d, tokens.to_vec(), is_null)
                .map_err(|e| CacheError::Header(e.to_string()))
        };
        let cond = emb()?;
        let null = emb()?;
        let fixed = emb()?;
        let embeddings = (0..t).map(|_| emb()).collect::<Result<Vec<_>, _>>()?;
        let mut rest = payload[n_emb * (3 + t)..].chunks_exact(n_lat);
        let mut traj = |g: f64, id: &str| -> Result<Trajectory, CacheError> {
            let latents = (0..=t)
                .map(|_| {
                    LatentTensor::new(header.latent_shape, rest.next().expect("sized").to_vec())
                        .map_err(|e| CacheError::Header(e.to_string()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Trajectory {
                latents,
                guidance_scale: g,
                embedding_id: id.into(),
            })
        };
        let inversion = traj(
            1.0,
            match header.inversion_conditioning {
                InversionConditioning::Target => "target",
                InversionConditioning::Null => "null",
            },
        )?;
        let initial = traj(header.sampler.guidance_scale, "constant")?;
        let reconstruction = traj(header.sampler.guidance_scale, "fine-tuned")?;
        let schedule = FineTunedSchedule {
            mode: header.mode,
            embeddings,
            fixed,
            initial_loss: header.initial_loss.clone(),
            per_step_loss: header.per_step_loss.clone(),
            iterations_used: header.iterations_used.clone(),
        };
        Ok(InversionCache {
            header,
            cond,
            null,
            schedule,
            inversion,
            initial,
            reconstruction,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes().map_err(|e| PipelineError::cache(path, e))?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| PipelineError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| PipelineError::cache(path, CacheError::Io(e)))?;
        Self::from_bytes(&bytes).map_err(|e| PipelineError::cache(path, e))
    }
}
