//! Image and latent metrics plus a registry for external perceptual scorers.

use std::collections::BTreeMap;

use baret_core::backbone::RgbImage;
use baret_core::latent::LatentTensor;
use serde::Serialize;

use crate::error::{PipelineError, Result};

/// Value reported when two images are identical.
pub const PSNR_CAP_DB: f64 = 99.0;

fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
}

/// `10 log10(255^2 / MSE)` over all channels, capped at 99 dB.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(PipelineError::Core(baret_core::Error::Shape {
            expected: vec![a.height(), a.width(), 3],
            got: vec![b.height(), b.width(), 3],
        }));
    }
    let sum: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(psnr_from_mse(sum / a.pixels().len() as f64, 255.0))
}

pub fn latent_mse(a: &LatentTensor, b: &LatentTensor) -> Result<f64> {
    Ok(a.mse(b)?)
}

/// PSNR of latents with unit peak, capped at 99 dB.
pub fn latent_psnr(a: &LatentTensor, b: &LatentTensor) -> Result<f64> {
    Ok(psnr_from_mse(a.mse(b)?, 1.0))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// side is constant or the lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// A pretrained perceptual scorer supplied from outside the crate.
pub trait PerceptualScorer: Send + Sync {
    /// Fidelity between an edited and a reference image, higher is closer.
    fn fidelity(&self, edited: &RgbImage, reference: &RgbImage) -> Option<f64> {
        let _ = (edited, reference);
        None
    }

    /// Agreement between an image and a prompt, higher is better.
    fn alignment(&self, image: &RgbImage, prompt: &str) -> Option<f64> {
        let _ = (image, prompt);
        None
    }
}

/// Scorers keyed by name. An empty registry simply yields no perceptual
/// scores.
#[derive(Default)]
pub struct ScorerRegistry {
    scorers: BTreeMap<String, Box<dyn PerceptualScorer>>,
}

impl ScorerRegistry {
    pub fn register(&mut self, name: impl Into<String>, scorer: Box<dyn PerceptualScorer>) {
        self.scorers.insert(name.into(), scorer);
    }

    pub fn is_empty(&self) -> bool {
        self.scorers.is_empty()
    }

    pub fn score(&self, edited: &RgbImage, reference: &RgbImage, prompt: &str) -> BTreeMap<String, PerceptualScores> {
        self.scorers
            .iter()
            .map(|(name, s)| {
                (
                    name.clone(),
                    PerceptualScores {
                        fidelity: s.fidelity(edited, reference),
                        alignment: s.alignment(edited, prompt),
                    },
                )
            })
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PerceptualScores {
    pub fidelity: Option<f64>,
    pub alignment: Option<f64>,
}
