//! Desk-scale backbone: a small UNet over 16x16x4 latents, a frozen toy text
//! encoder and an identity latent codec.

pub mod scenes;
pub mod text;
mod train;
mod unet;

use serde::{Deserialize, Serialize};

pub use scenes::ShapeScene;
pub use text::ToyTextEncoder;
pub use train::{train_toy_backbone, TrainConfig, TrainReport};
pub use unet::{ToyUnet, LAYER_IDS};

use crate::autodiff::Graph;
use crate::backbone::{
    check_latent, AttentionCapture, AttentionLayer, AttentionMap, Backbone, Capabilities,
    EmbeddingGradient, IdentityCodec, InjectionDirective, LossEval, NoisePrediction, RgbImage,
    TextEmbedding,
};
use crate::error::{Error, Result};
use crate::latent::{LatentShape, LatentTensor};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyBackboneConfig {
    pub latent_channels: usize,
    pub height: usize,
    pub width: usize,
    pub base_channels: usize,
    pub inner_channels: usize,
    pub heads: usize,
    pub norm_groups: usize,
    pub embed_dim: usize,
    pub max_tokens: usize,
    pub time_dim: usize,
    /// The text encoder emits token vectors at `1 / context_gain` of their
    /// natural scale and the network multiplies them back. The network
    /// function is unchanged; what changes is how far one optimizer step of
    /// a given size moves an embedding relative to the token spread.
    pub context_gain: f64,
    pub seed: u64,
}

impl Default for ToyBackboneConfig {
    fn default() -> Self {
        ToyBackboneConfig {
            latent_channels: 4,
            height: 16,
            width: 16,
            base_channels: 16,
            inner_channels: 32,
            heads: 2,
            norm_groups: 4,
            embed_dim: 32,
            max_tokens: 4,
            time_dim: 64,
            context_gain: 200.0,
            seed: 0,
        }
    }
}

impl ToyBackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.latent_channels,
            self.height,
            self.width,
            self.base_channels,
            self.inner_channels,
            self.heads,
            self.norm_groups,
            self.embed_dim,
            self.max_tokens,
            self.time_dim,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("toy backbone sizes must be positive".into()));
        }
        if !(self.context_gain.is_finite() && self.context_gain > 0.0) {
            return Err(Error::Config("context gain must be positive".into()));
        }
        if self.latent_channels < 3 {
            return Err(Error::Config("toy latents need at least 3 channels".into()));
        }
        if !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) {
            return Err(Error::Config("toy latent height and width must be even".into()));
        }
        for c in [self.base_channels, self.inner_channels] {
            if c % self.heads != 0 || c % self.norm_groups != 0 {
                return Err(Error::Config(format!(
                    "channel width {c} must be divisible by heads and norm groups"
                )));
            }
        }
        Ok(())
    }

    pub fn latent_shape(&self) -> LatentShape {
        LatentShape::new(self.latent_channels, self.height, self.width)
    }
}

/// The toy backbone. Immutable once built; forward passes take `&self`.
#[derive(Debug)]
pub struct ToyBackbone {
    unet: ToyUnet<f32>,
    text: ToyTextEncoder,
    codec: IdentityCodec,
    layers: Vec<AttentionLayer>,
    null: TextEmbedding,
}

impl ToyBackbone {
    /// Randomly initialized from `config.seed`.
    pub fn new(config: &ToyBackboneConfig) -> Result<Self> {
        config.validate()?;
        Self::from_unet(ToyUnet::new(config))
    }

    pub fn from_unet(unet: ToyUnet<f32>) -> Result<Self> {
        let config = unet.config().clone();
        config.validate()?;
        let text = ToyTextEncoder::new(
            config.max_tokens,
            config.embed_dim,
            config.seed,
            1.0 / config.context_gain,
        );
        let null = text.encode("")?;
        Ok(ToyBackbone {
            layers: unet.attention_layers(),
            codec: IdentityCodec::new(config.latent_shape())?,
            unet,
            text,
            null,
        })
    }

    /// A backbone whose noise prediction is `value` everywhere, independent
    /// of latent, timestep and embedding. The full network still runs, so
    /// capture, injection and gradients behave as on a trained model.
    pub fn constant_noise(config: &ToyBackboneConfig, value: f32) -> Result<Self> {
        config.validate()?;
        let mut unet = ToyUnet::new(config);
        let names = unet.names().to_vec();
        for (name, p) in names.iter().zip(unet.params_mut()) {
            if name == "conv_out.weight" {
                p.data_mut().fill(0.0);
            } else if name == "conv_out.bias" {
                p.data_mut().fill(value);
            }
        }
        Self::from_unet(unet)
    }

    pub fn config(&self) -> &ToyBackboneConfig {
        self.unet.config()
    }

    pub fn unet(&self) -> &ToyUnet<f32> {
        &self.unet
    }

    pub fn text_encoder(&self) -> &ToyTextEncoder {
        &self.text
    }

    /// Named parameter tensors in registration order.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &[usize], &[f32])> {
        self.unet
            .names()
            .iter()
            .zip(self.unet.params())
            .map(|(n, p)| (n.as_str(), p.shape(), p.data()))
    }

    /// FNV-1a over parameter names, shapes and bit patterns.
    pub fn weights_fingerprint(&self) -> u64 {
        let mut h = Fnv64::new();
        for (name, shape, data) in self.named_tensors() {
            h.write(name.as_bytes());
            for &s in shape {
                h.write(&(s as u64).to_le_bytes());
            }
            for v in data {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }

    fn injection_tensors(
        &self,
        directive: Option<&InjectionDirective>,
    ) -> Result<[Option<Tensor<f32>>; 4]> {
        let mut out: [Option<Tensor<f32>>; 4] = Default::default();
        let Some(directive) = directive else {
            return Ok(out);
        };
        directive.validate(&self.layers)?;
        for (id, (map, _)) in &directive.maps {
            let i = LAYER_IDS
                .iter()
                .position(|l| l == id)
                .expect("validated layer id");
            out[i] = Some(Tensor::from_vec(
                &[map.heads, map.queries, map.keys],
                map.probs.clone(),
            ));
        }
        Ok(out)
    }

    fn check_embedding(&self, e: &TextEmbedding) -> Result<()> {
        self.null.check_same_shape(e)
    }

    /// Noise prediction and embedding VJP in double precision, for gradient
    /// checks. `cotangent` is `d loss / d eps`.
    pub fn embedding_vjp_f64(
        unet: &ToyUnet<f64>,
        z: &[f64],
        t: usize,
        embedding: &[f64],
        cotangent: Option<&[f64]>,
    ) -> (Vec<f64>, Option<Vec<f64>>) {
        embedding_vjp(unet, z, t, embedding, cotangent)
    }
}

pub(crate) fn embedding_vjp<T: Float>(
    unet: &ToyUnet<T>,
    z: &[T],
    t: usize,
    embedding: &[T],
    cotangent: Option<&[T]>,
) -> (Vec<T>, Option<Vec<T>>) {
    let c = unet.config();
    let x = Tensor::from_vec(&[1, c.latent_channels, c.height, c.width], z.to_vec());
    let ctx = Tensor::from_vec(&[1, c.max_tokens, c.embed_dim], embedding.to_vec());
    let mut g = Graph::new(unet.params(), false);
    let none: [Option<Tensor<T>>; 4] = Default::default();
    let out = unet.forward(&mut g, x, &[t], ctx, cotangent.is_some(), &none);
    let eps = g.value(out.eps).data().to_vec();
    let grad = cotangent.map(|ct| {
        let seed = Tensor::from_vec(g.value(out.eps).shape(), ct.to_vec());
        let mut grads = g.backward(out.eps, seed);
        grads
            .take(out.ctx)
            .map(Tensor::into_data)
            .unwrap_or_else(|| vec![T::zero(); embedding.len()])
    });
    (eps, grad)
}

impl Backbone for ToyBackbone {
    fn latent_shape(&self) -> LatentShape {
        self.config().latent_shape()
    }

    fn attention_layers(&self) -> &[AttentionLayer] {
        &self.layers
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            gradient_wrt_embedding: true,
            attention_capture: true,
            attention_injection: true,
        }
    }

    fn encode_text(&self, prompt: &str) -> Result<TextEmbedding> {
        self.text.encode(prompt)
    }

    fn null_embedding(&self) -> &TextEmbedding {
        &self.null
    }

    fn predict_noise(
        &self,
        z: &LatentTensor,
        t: usize,
        embedding: &TextEmbedding,
        capture: bool,
        directive: Option<&InjectionDirective>,
    ) -> Result<NoisePrediction> {
        check_latent(self, z)?;
        self.check_embedding(embedding)?;
        let inject = self.injection_tensors(directive)?;
        let c = self.config();
        let x = Tensor::from_vec(&[1, c.latent_channels, c.height, c.width], z.data().to_vec());
        let ctx = Tensor::from_vec(&[1, c.max_tokens, c.embed_dim], embedding.tokens().to_vec());
        let mut g = Graph::new(self.unet.params(), false);
        let out = self.unet.forward(&mut g, x, &[t], ctx, false, &inject);
        let eps = LatentTensor::new(self.latent_shape(), g.value(out.eps).data().to_vec())?;
        if !eps.is_finite() {
            return Err(Error::Numeric {
                step: t,
                what: "noise prediction".into(),
            });
        }
        let capture = capture.then(|| {
            let maps = self
                .layers
                .iter()
                .zip(out.attention)
                .map(|(layer, node)| {
                    (
                        layer.id.clone(),
                        AttentionMap {
                            kind: layer.kind,
                            heads: layer.heads,
                            queries: layer.queries,
                            keys: layer.keys,
                            probs: g.attention_probs(node).data().to_vec(),
                        },
                    )
                })
                .collect();
            AttentionCapture {
                step_index: t,
                maps,
            }
        });
        Ok(NoisePrediction { eps, capture })
    }

    fn gradient_wrt_embedding(
        &self,
        z: &LatentTensor,
        t: usize,
        embedding: &TextEmbedding,
        loss: &mut dyn FnMut(&LatentTensor) -> Result<LossEval>,
    ) -> Result<EmbeddingGradient> {
        check_latent(self, z)?;
        self.check_embedding(embedding)?;
        let c = self.config();
        let x = Tensor::from_vec(&[1, c.latent_channels, c.height, c.width], z.data().to_vec());
        let ctx = Tensor::from_vec(&[1, c.max_tokens, c.embed_dim], embedding.tokens().to_vec());
        let mut g = Graph::new(self.unet.params(), false);
        let none: [Option<Tensor<f32>>; 4] = Default::default();
        let out = self.unet.forward(&mut g, x, &[t], ctx, true, &none);
        let eps = LatentTensor::new(self.latent_shape(), g.value(out.eps).data().to_vec())?;
        if !eps.is_finite() {
            return Err(Error::Numeric {
                step: t,
                what: "noise prediction".into(),
            });
        }
        let eval = loss(&eps)?;
        let grad = match eval.grad {
            Some(ct) => {
                eps.check_same_shape(&ct)?;
                let seed = Tensor::from_vec(g.value(out.eps).shape(), ct.into_data());
                let mut grads = g.backward(out.eps, seed);
                let gr = grads
                    .take(out.ctx)
                    .map(Tensor::into_data)
                    .unwrap_or_else(|| vec![0.0; embedding.tokens().len()]);
                Some(gr)
            }
            None => None,
        };
        Ok(EmbeddingGradient {
            eps,
            loss: eval.value,
            grad,
        })
    }

    fn encode_image(&self, image: &RgbImage) -> Result<LatentTensor> {
        self.codec.encode(image)
    }

    fn decode_image(&self, latent: &LatentTensor) -> Result<RgbImage> {
        self.codec.decode(latent)
    }
}

/// 64-bit FNV-1a.
#[derive(Clone, Copy, Debug)]
pub struct Fnv64(u64);

impl Fnv64 {
    pub fn new() -> Self {
        Fnv64(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv64 {
    fn default() -> Self {
        Self::new()
    }
}
