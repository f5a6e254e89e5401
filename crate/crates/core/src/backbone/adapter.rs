//! Contract for plugging pretrained latent-diffusion weights in behind
//! [`Backbone`](super::Backbone).
//!
//! Weights themselves are external. An adapter ships a JSON manifest naming
//! every tensor it expects; [`AdapterManifest::check_tensors`] verifies a
//! weight file's table of contents against it before any forward pass.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::AttentionLayer;
use crate::error::{Error, Result};
use crate::latent::LatentShape;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(default = "default_dtype")]
    pub dtype: String,
}

fn default_dtype() -> String {
    "f32".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterManifest {
    pub family: String,
    pub latent_shape: LatentShape,
    /// Pixel-to-latent spatial downsampling factor of the codec.
    pub downsample_factor: usize,
    pub embedding_seq_len: usize,
    pub embedding_dim: usize,
    pub attention_layers: Vec<AttentionLayer>,
    pub tensors: Vec<TensorSpec>,
}

impl AdapterManifest {
    pub fn from_json(text: &str) -> Result<Self> {
        let m: AdapterManifest =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_shape.numel() == 0 || self.downsample_factor == 0 {
            return Err(Error::Config("manifest sizes must be positive".into()));
        }
        if self.embedding_seq_len == 0 || self.embedding_dim == 0 {
            return Err(Error::Config("manifest embedding shape must be positive".into()));
        }
        let kinds: Vec<_> = self.attention_layers.iter().map(|l| l.kind).collect();
        if !kinds.contains(&super::AttentionKind::SelfAttention)
            || !kinds.contains(&super::AttentionKind::CrossAttention)
        {
            return Err(Error::Config(
                "manifest needs a self- and a cross-attention layer".into(),
            ));
        }
        let mut seen = BTreeMap::new();
        for t in &self.tensors {
            if t.dtype != "f32" && t.dtype != "f16" {
                return Err(Error::Config(format!("tensor `{}` has dtype {}", t.name, t.dtype)));
            }
            if seen.insert(t.name.as_str(), ()).is_some() {
                return Err(Error::Config(format!("duplicate tensor `{}`", t.name)));
            }
        }
        Ok(())
    }

    /// Checks a weight file's `(name, shape)` table against the manifest.
    /// Extra tensors are ignored; missing or misshapen ones are errors.
    pub fn check_tensors<'a>(
        &self,
        available: impl IntoIterator<Item = (&'a str, &'a [usize])>,
    ) -> Result<()> {
        let have: BTreeMap<&str, &[usize]> = available.into_iter().collect();
        for spec in &self.tensors {
            match have.get(spec.name.as_str()) {
                None => return Err(Error::Config(format!("missing tensor `{}`", spec.name))),
                Some(shape) if *shape != spec.shape.as_slice() => {
                    return Err(Error::shape(&spec.shape, shape))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MANIFEST: &str = r#"{
        "family": "latent-diffusion",
        "latent_shape": {"channels": 4, "height": 64, "width": 64},
        "downsample_factor": 8,
        "embedding_seq_len": 77,
        "embedding_dim": 768,
        "attention_layers": [
            {"id": "down.0.attn1", "kind": "self", "heads": 8, "queries": 4096, "keys": 4096},
            {"id": "down.0.attn2", "kind": "cross", "heads": 8, "queries": 4096, "keys": 77}
        ],
        "tensors": [
            {"name": "conv_in.weight", "shape": [320, 4, 3, 3]},
            {"name": "conv_in.bias", "shape": [320]}
        ]
    }"#;

    #[test]
    fn parses_and_checks_tensor_table() {
        let m = AdapterManifest::from_json(MANIFEST).unwrap();
        assert_eq!(m.tensors[0].dtype, "f32");
        let w = [320usize, 4, 3, 3];
        let b = [320usize];
        m.check_tensors([("conv_in.weight", &w[..]), ("conv_in.bias", &b[..])])
            .unwrap();
        assert!(matches!(
            m.check_tensors([("conv_in.weight", &w[..])]),
            Err(Error::Config(_))
        ));
        let bad = [321usize];
        assert!(matches!(
            m.check_tensors([("conv_in.weight", &w[..]), ("conv_in.bias", &bad[..])]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn rejects_manifest_without_cross_attention() {
        let text = MANIFEST.replace("\"cross\"", "\"self\"");
        assert!(AdapterManifest::from_json(&text).is_err());
    }
}
