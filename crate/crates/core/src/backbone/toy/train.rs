use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ShapeScene, ToyBackbone, ToyBackboneConfig, ToyUnet};
use crate::autodiff::Graph;
use crate::backbone::IdentityCodec;
use crate::diffusion::{NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probability of replacing a prompt by the empty prompt.
    pub cond_dropout: f64,
    /// Number of held-out noised samples in the validation set.
    pub validation_size: usize,
    pub seed: u64,
    pub schedule: ScheduleConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 16,
            learning_rate: 2e-3,
            cond_dropout: 0.1,
            validation_size: 64,
            seed: 0,
            schedule: ScheduleConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Training loss per optimizer step.
    pub loss_curve: Vec<f64>,
    pub initial_validation_loss: f64,
    pub final_validation_loss: f64,
}

struct Batch {
    x: Tensor<f32>,
    ctx: Tensor<f32>,
    eps: Tensor<f32>,
    timesteps: Vec<usize>,
}

fn make_batch(
    rng: &mut ChaCha8Rng,
    size: usize,
    config: &ToyBackboneConfig,
    backbone: &ToyBackbone,
    codec: &IdentityCodec,
    schedule: &NoiseSchedule,
    dropout: f64,
) -> Result<Batch> {
    let numel = config.latent_shape().numel();
    let ctx_len = config.max_tokens * config.embed_dim;
    let mut x = Vec::with_capacity(size * numel);
    let mut eps = Vec::with_capacity(size * numel);
    let mut ctx = Vec::with_capacity(size * ctx_len);
    let mut timesteps = Vec::with_capacity(size);
    for _ in 0..size {
        let scene = ShapeScene::sample(rng, config.width, config.height);
        let z0 = codec.encode(&scene.render(config.width, config.height))?;
        let prompt = if rng.random_bool(dropout) {
            String::new()
        } else {
            scene.prompt()
        };
        ctx.extend_from_slice(backbone.text_encoder().encode(&prompt)?.tokens());
        let t = rng.random_range(1..=schedule.train_steps());
        let abar = schedule.alpha_bar()[t];
        let (a, b) = (abar.sqrt() as f32, (1.0 - abar).sqrt() as f32);
        for &v in z0.data() {
            let e: f32 = StandardNormal.sample(rng);
            x.push(a * v + b * e);
            eps.push(e);
        }
        timesteps.push(t);
    }
    let (c, h, w) = (config.latent_channels, config.height, config.width);
    Ok(Batch {
        x: Tensor::from_vec(&[size, c, h, w], x),
        ctx: Tensor::from_vec(&[size, config.max_tokens, config.embed_dim], ctx),
        eps: Tensor::from_vec(&[size, c, h, w], eps),
        timesteps,
    })
}

fn batch_loss(unet: &ToyUnet<f32>, batch: &Batch) -> f64 {
    let mut g = Graph::new(unet.params(), false);
    let none = Default::default();
    let out = unet.forward(
        &mut g,
        batch.x.clone(),
        &batch.timesteps,
        batch.ctx.clone(),
        false,
        &none,
    );
    mse(g.value(out.eps).data(), batch.eps.data())
}

fn mse(a: &[f32], b: &[f32]) -> f64 {
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    s / a.len() as f64
}

/// Trains a toy backbone by noise-prediction regression on synthetic shape
/// scenes. Deterministic for a given pair of configs.
pub fn train_toy_backbone(
    config: &ToyBackboneConfig,
    train: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<(ToyBackbone, TrainReport)> {
    config.validate()?;
    if train.batch_size == 0 || !(0.0..=1.0).contains(&train.cond_dropout) {
        return Err(Error::Config(
            "batch size must be positive and dropout in [0, 1]".into(),
        ));
    }
    let schedule = train.schedule.build(1)?;
    let mut backbone = ToyBackbone::new(config)?;
    let codec = IdentityCodec::new(config.latent_shape())?;

    let mut val_rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x7a11_da7e);
    let validation = make_batch(
        &mut val_rng,
        train.validation_size.max(1),
        config,
        &backbone,
        &codec,
        &schedule,
        0.0,
    )?;
    let initial = batch_loss(&backbone.unet, &validation);

    let sizes: Vec<usize> = backbone.unet.params().iter().map(Tensor::len).collect();
    let mut adam = Adam::<f32>::new(train.learning_rate, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut curve = Vec::with_capacity(train.steps);
    let warmup = (train.steps / 20).max(1);
    for step in 0..train.steps {
        let batch = make_batch(
            &mut rng,
            train.batch_size,
            config,
            &backbone,
            &codec,
            &schedule,
            train.cond_dropout,
        )?;
        let grads = {
            let unet = &backbone.unet;
            let mut g = Graph::new(unet.params(), true);
            let none = Default::default();
            let out = unet.forward(
                &mut g,
                batch.x.clone(),
                &batch.timesteps,
                batch.ctx.clone(),
                false,
                &none,
            );
            let pred = g.value(out.eps).data();
            let loss = mse(pred, batch.eps.data());
            if !loss.is_finite() {
                return Err(Error::Training { step, loss });
            }
            curve.push(loss);
            progress(step, loss);
            let scale = 2.0 / pred.len() as f32;
            let seed: Vec<f32> = pred
                .iter()
                .zip(batch.eps.data())
                .map(|(p, e)| scale * (p - e))
                .collect();
            let seed = Tensor::from_vec(g.value(out.eps).shape(), seed);
            g.backward(out.eps, seed).into_param_grads()
        };
        // Linear warmup, then cosine decay to a tenth of the peak rate.
        let frac = step as f64 / train.steps.max(1) as f64;
        let cosine = 0.1 + 0.45 * (1.0 + (std::f64::consts::PI * frac).cos());
        let ramp = ((step + 1) as f64 / warmup as f64).min(1.0);
        adam.learning_rate = train.learning_rate * cosine * ramp;
        let grad_refs: Vec<Option<&[f32]>> =
            grads.iter().map(|g| g.as_ref().map(Tensor::data)).collect();
        let mut params: Vec<&mut [f32]> = backbone
            .unet
            .params_mut()
            .iter_mut()
            .map(Tensor::data_mut)
            .collect();
        adam.step(&mut params, &grad_refs);
    }
    let final_loss = batch_loss(&backbone.unet, &validation);
    if !final_loss.is_finite() {
        return Err(Error::Training {
            step: train.steps,
            loss: final_loss,
        });
    }
    Ok((
        backbone,
        TrainReport {
            loss_curve: curve,
            initial_validation_loss: initial,
            final_validation_loss: final_loss,
        },
    ))
}
