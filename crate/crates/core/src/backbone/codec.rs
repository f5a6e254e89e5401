//! 8-bit RGB rasters and the toy latent codec.
//!
//! The toy codec is an identity reshape at downsampling factor 1: pixel
//! values are divided by 255 into the first three latent channels and any
//! further channels are zero. Decoding clamps, rescales and rounds, so
//! `decode(encode(x)) == x` for every 8-bit image.

use crate::error::{Error, Result};
use crate::latent::{LatentShape, LatentTensor};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RgbImage {
    width: usize,
    height: usize,
    // Interleaved RGB, row-major.
    pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::shape(&[height, width, 3], &[pixels.len()]));
        }
        Ok(RgbImage {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = (0..width * height).flat_map(|_| rgb).collect();
        RgbImage {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// Latent codec of the toy backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IdentityCodec {
    pub shape: LatentShape,
}

impl IdentityCodec {
    pub fn new(shape: LatentShape) -> Result<Self> {
        if shape.channels < 3 {
            return Err(Error::Parameter(format!(
                "identity codec needs at least 3 latent channels, got {}",
                shape.channels
            )));
        }
        Ok(IdentityCodec { shape })
    }

    pub fn encode(&self, image: &RgbImage) -> Result<LatentTensor> {
        let s = self.shape;
        if image.width != s.width || image.height != s.height {
            return Err(Error::shape(&[s.height, s.width], &[image.height, image.width]));
        }
        let hw = s.height * s.width;
        let mut data = vec![0.0f32; s.numel()];
        for (p, rgb) in image.pixels.chunks(3).enumerate() {
            for c in 0..3 {
                data[c * hw + p] = rgb[c] as f32 / 255.0;
            }
        }
        LatentTensor::new(s, data)
    }

    pub fn decode(&self, latent: &LatentTensor) -> Result<RgbImage> {
        let s = self.shape;
        if latent.shape() != s {
            return Err(Error::shape(&s.dims(), &latent.shape().dims()));
        }
        let hw = s.height * s.width;
        let d = latent.data();
        let mut pixels = Vec::with_capacity(hw * 3);
        for p in 0..hw {
            for c in 0..3 {
                pixels.push(to_u8(d[c * hw + p]));
            }
        }
        RgbImage::new(s.width, s.height, pixels)
    }
}

fn to_u8(v: f32) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    fn codec() -> IdentityCodec {
        IdentityCodec::new(LatentShape::new(4, 4, 5)).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let pixels: Vec<u8> = (0..4 * 5 * 3).map(|i| (i * 37 % 256) as u8).collect();
        let img = RgbImage::new(5, 4, pixels).unwrap();
        let c = codec();
        assert_eq!(c.decode(&c.encode(&img).unwrap()).unwrap(), img);
        for v in 0..=255u8 {
            let img = RgbImage::filled(5, 4, [v, v, v]);
            assert_eq!(c.decode(&c.encode(&img).unwrap()).unwrap(), img);
        }
    }

    #[test]
    fn zero_image_is_zero_latent() {
        let lat = codec().encode(&RgbImage::filled(5, 4, [0, 0, 0])).unwrap();
        assert!(lat.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bad_dimensions_are_rejected() {
        let img = RgbImage::filled(4, 4, [1, 2, 3]);
        assert!(matches!(codec().encode(&img), Err(Error::Shape { .. })));
        assert!(RgbImage::new(2, 2, vec![0; 11]).is_err());
    }
}
