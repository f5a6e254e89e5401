//! Denoiser abstraction: noise prediction, text encoding, attention
//! capture/injection, embedding gradients and the latent codec.

pub mod adapter;
mod attention;
mod codec;
pub mod toy;

pub use attention::{
    AttentionCapture, AttentionKind, AttentionLayer, AttentionMap, InjectionDirective, Provenance,
    ROW_SUM_TOLERANCE,
};
pub use codec::{IdentityCodec, RgbImage};

use crate::error::{Error, Result};
use crate::latent::{LatentShape, LatentTensor};

/// Token-embedding matrix `(seq_len, dim)` produced by a text encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    seq_len: usize,
    dim: usize,
    tokens: Vec<f32>,
    is_null: bool,
}

impl TextEmbedding {
    pub fn new(seq_len: usize, dim: usize, tokens: Vec<f32>, is_null: bool) -> Result<Self> {
        if seq_len == 0 || dim == 0 {
            return Err(Error::Parameter("embedding must have at least one token".into()));
        }
        if tokens.len() != seq_len * dim {
            return Err(Error::shape(&[seq_len, dim], &[tokens.len()]));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                step: 0,
                what: "non-finite embedding entry".into(),
            });
        }
        Ok(TextEmbedding {
            seq_len,
            dim,
            tokens,
            is_null,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.seq_len, self.dim)
    }

    pub fn tokens(&self) -> &[f32] {
        &self.tokens
    }

    pub fn is_null(&self) -> bool {
        self.is_null
    }

    /// Same shape, new entries. The result is never flagged as null.
    pub fn with_tokens(&self, tokens: Vec<f32>) -> Result<Self> {
        TextEmbedding::new(self.seq_len, self.dim, tokens, false)
    }

    pub(crate) fn check_same_shape(&self, other: &TextEmbedding) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                &[self.seq_len, self.dim],
                &[other.seq_len, other.dim],
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Capabilities {
    pub gradient_wrt_embedding: bool,
    pub attention_capture: bool,
    pub attention_injection: bool,
}

#[derive(Clone, Debug)]
pub struct NoisePrediction {
    pub eps: LatentTensor,
    pub capture: Option<AttentionCapture>,
}

/// Scalar loss of a noise prediction plus its gradient with respect to that
/// prediction. A `None` gradient skips backpropagation.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub value: f64,
    pub grad: Option<LatentTensor>,
}

#[derive(Clone, Debug)]
pub struct EmbeddingGradient {
    pub eps: LatentTensor,
    pub loss: f64,
    /// `d loss / d embedding`, shaped like the embedding tokens.
    pub grad: Option<Vec<f32>>,
}

/// A frozen denoiser `eps(z, t, embedding)` with its text encoder and codec.
///
/// Implementations are immutable after construction and safe to share across
/// threads for read-only forward passes.
pub trait Backbone: Send + Sync {
    fn latent_shape(&self) -> LatentShape;

    fn attention_layers(&self) -> &[AttentionLayer];

    fn capabilities(&self) -> Capabilities;

    fn encode_text(&self, prompt: &str) -> Result<TextEmbedding>;

    /// Encoding of the empty prompt, cached once.
    fn null_embedding(&self) -> &TextEmbedding;

    /// Predicts the noise in `z` at train timestep `t`. With `capture` every
    /// attention layer's probability map is returned; layers named in
    /// `directive` use the supplied maps in place of their own softmax output.
    fn predict_noise(
        &self,
        z: &LatentTensor,
        t: usize,
        embedding: &TextEmbedding,
        capture: bool,
        directive: Option<&InjectionDirective>,
    ) -> Result<NoisePrediction>;

    /// Runs one forward pass, scores it with `loss`, and backpropagates the
    /// loss gradient to the embedding with model weights held fixed.
    fn gradient_wrt_embedding(
        &self,
        z: &LatentTensor,
        t: usize,
        embedding: &TextEmbedding,
        loss: &mut dyn FnMut(&LatentTensor) -> Result<LossEval>,
    ) -> Result<EmbeddingGradient>;

    fn encode_image(&self, image: &RgbImage) -> Result<LatentTensor>;

    fn decode_image(&self, latent: &LatentTensor) -> Result<RgbImage>;
}

pub(crate) fn check_latent(backbone: &dyn Backbone, z: &LatentTensor) -> Result<()> {
    let want = backbone.latent_shape();
    if z.shape() != want {
        return Err(Error::shape(&want.dims(), &z.shape().dims()));
    }
    Ok(())
}

/// Probes a backbone's advertised capabilities and returns what it actually
/// supports. Fails if a flag is set but the probe contradicts it, or if the
/// layer table lacks a self- or cross-attention layer.
pub fn self_test(backbone: &dyn Backbone) -> Result<Capabilities> {
    let layers = backbone.attention_layers();
    let has = |k| layers.iter().any(|l: &AttentionLayer| l.kind == k);
    if !has(AttentionKind::SelfAttention) || !has(AttentionKind::CrossAttention) {
        return Err(Error::Config(
            "backbone needs at least one self- and one cross-attention layer".into(),
        ));
    }
    let claimed = backbone.capabilities();
    let z = LatentTensor::randn(backbone.latent_shape(), 0x5e1f);
    let emb = backbone.null_embedding().clone();
    let t = 500;
    let mut found = Capabilities::default();

    if claimed.attention_capture {
        let out = backbone.predict_noise(&z, t, &emb, true, None)?;
        let cap = out.capture.ok_or(Error::Unsupported("attention capture"))?;
        let complete = layers.iter().all(|l| cap.maps.contains_key(&l.id));
        let stochastic = cap.maps.values().all(AttentionMap::is_row_stochastic);
        if !complete || !stochastic {
            return Err(Error::Config("attention capture probe failed".into()));
        }
        found.attention_capture = true;

        if claimed.attention_injection {
            let mut directive = InjectionDirective::new();
            for (id, map) in &cap.maps {
                directive.insert(id.clone(), map.clone(), Provenance::Reconstruction);
            }
            let injected = backbone.predict_noise(&z, t, &emb, false, Some(&directive))?;
            if injected.eps != out.eps {
                return Err(Error::Config("self-injection changed the prediction".into()));
            }
            found.attention_injection = true;
        }
    }

    if claimed.gradient_wrt_embedding {
        let mut probe = |eps: &LatentTensor| {
            Ok(LossEval {
                value: eps.data().iter().map(|&v| v as f64).sum(),
                grad: Some(LatentTensor::filled(eps.shape(), 1.0)),
            })
        };
        let g = backbone.gradient_wrt_embedding(&z, t, &emb, &mut probe)?;
        let grad = g.grad.ok_or(Error::Unsupported("embedding gradients"))?;
        if grad.len() != emb.tokens().len() || grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("embedding gradient probe failed".into()));
        }
        found.gradient_wrt_embedding = true;
    }
    Ok(found)
}
