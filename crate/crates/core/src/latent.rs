use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        LatentShape {
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// A latent code `(channels, height, width)` in 32-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTensor {
    shape: LatentShape,
    data: Vec<f32>,
}

impl LatentTensor {
    pub fn new(shape: LatentShape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(&shape.dims(), &[data.len()]));
        }
        Ok(LatentTensor { shape, data })
    }

    pub fn zeros(shape: LatentShape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: LatentShape, value: f32) -> Self {
        LatentTensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn shape(&self) -> LatentShape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_same_shape(&self, other: &LatentTensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(&self.shape.dims(), &other.shape.dims()));
        }
        Ok(())
    }

    /// Mean squared difference, accumulated in double precision.
    pub fn mse(&self, other: &LatentTensor) -> Result<f64> {
        self.check_same_shape(other)?;
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    pub fn max_abs_diff(&self, other: &LatentTensor) -> Result<f32> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    /// Deterministic standard-normal latent.
    pub fn randn(shape: LatentShape, seed: u64) -> Self {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.numel())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        LatentTensor { shape, data }
    }
}
