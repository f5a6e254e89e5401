use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::backbone::TextEmbedding;
use crate::error::{Error, Result};

pub const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "white", "black"];
pub const SHAPES: [&str; 3] = ["square", "circle", "triangle"];
pub const POSES: [&str; 2] = ["standing", "lying"];

const PAD: usize = 0;

/// Frozen toy text encoder: a seeded random token table plus positional
/// vectors, both multiplied by `scale`. Prompts fill slots left to right;
/// unused slots hold the pad token.
#[derive(Clone, Debug)]
pub struct ToyTextEncoder {
    vocab: Vec<&'static str>,
    max_tokens: usize,
    dim: usize,
    table: Vec<f32>,
    positions: Vec<f32>,
}

impl ToyTextEncoder {
    pub fn new(max_tokens: usize, dim: usize, seed: u64, scale: f64) -> Self {
        let mut vocab = vec!["<pad>"];
        for w in COLORS.iter().chain(&SHAPES).chain(&POSES) {
            vocab.push(w);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e47_0e4c);
        let scale = scale as f32;
        let unit = Normal::new(0.0f32, scale).expect("valid");
        let table = (0..vocab.len() * dim).map(|_| unit.sample(&mut rng)).collect();
        let half = Normal::new(0.0f32, 0.5 * scale).expect("valid");
        let positions = (0..max_tokens * dim).map(|_| half.sample(&mut rng)).collect();
        ToyTextEncoder {
            vocab,
            max_tokens,
            dim,
            table,
            positions,
        }
    }

    pub fn vocab(&self) -> &[&'static str] {
        &self.vocab
    }

    pub fn tokenize(&self, prompt: &str) -> Result<Vec<usize>> {
        let ids = prompt
            .split_whitespace()
            .map(|w| {
                let lw = w.to_ascii_lowercase();
                self.vocab
                    .iter()
                    .skip(1)
                    .position(|v| *v == lw)
                    .map(|i| i + 1)
                    .ok_or_else(|| Error::Vocabulary(w.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        if ids.len() > self.max_tokens {
            return Err(Error::PromptTooLong {
                got: ids.len(),
                max: self.max_tokens,
            });
        }
        Ok(ids)
    }

    /// Embeds token ids; missing slots are padded.
    pub fn embed_ids(&self, ids: &[usize]) -> Vec<f32> {
        let d = self.dim;
        let mut out = Vec::with_capacity(self.max_tokens * d);
        for slot in 0..self.max_tokens {
            let id = ids.get(slot).copied().unwrap_or(PAD);
            let tok = &self.table[id * d..(id + 1) * d];
            let pos = &self.positions[slot * d..(slot + 1) * d];
            out.extend(tok.iter().zip(pos).map(|(a, b)| a + b));
        }
        out
    }

    pub fn encode(&self, prompt: &str) -> Result<TextEmbedding> {
        let ids = self.tokenize(prompt)?;
        TextEmbedding::new(self.max_tokens, self.dim, self.embed_ids(&ids), ids.is_empty())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_prompt_is_null() {
        let enc = ToyTextEncoder::new(4, 8, 1, 1.0);
        let e = enc.encode("").unwrap();
        assert!(e.is_null());
        assert_eq!(e.shape(), (4, 8));
        assert!(!enc.encode("red").unwrap().is_null());
    }

    #[test]
    fn encoding_is_deterministic_and_case_insensitive() {
        let a = ToyTextEncoder::new(4, 8, 1, 1.0).encode("red square").unwrap();
        let b = ToyTextEncoder::new(4, 8, 1, 1.0).encode("RED  square").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_and_overlong_prompts_fail() {
        let enc = ToyTextEncoder::new(4, 8, 1, 1.0);
        assert_eq!(enc.encode("red dog"), Err(Error::Vocabulary("dog".into())));
        assert!(matches!(
            enc.encode("red square lying blue green"),
            Err(Error::PromptTooLong { got: 5, max: 4 })
        ));
    }
}
