//! Synthetic training scenes: one colored shape on a colored background.

use rand::Rng;

use super::text::{COLORS, POSES, SHAPES};
use crate::backbone::RgbImage;

const PALETTE: [[f32; 3]; 6] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.15, 0.30, 0.90],
    [0.95, 0.85, 0.15],
    [0.95, 0.95, 0.95],
    [0.08, 0.08, 0.08],
];

const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeScene {
    /// Index into [`COLORS`].
    pub foreground: usize,
    /// Index into [`SHAPES`].
    pub shape: usize,
    /// Index into [`POSES`]; 0 is tall, 1 is wide.
    pub pose: usize,
    pub background: usize,
    pub center: (f32, f32),
    /// Half-extent of the long axis in pixels.
    pub size: f32,
}

impl ShapeScene {
    pub fn sample<R: Rng>(rng: &mut R, width: usize, height: usize) -> Self {
        let foreground = rng.random_range(0..COLORS.len());
        let mut background = rng.random_range(0..COLORS.len() - 1);
        if background >= foreground {
            background += 1;
        }
        ShapeScene {
            foreground,
            shape: rng.random_range(0..SHAPES.len()),
            pose: rng.random_range(0..POSES.len()),
            background,
            center: (
                width as f32 / 2.0 + rng.random_range(-1.5..1.5),
                height as f32 / 2.0 + rng.random_range(-1.5..1.5),
            ),
            size: rng.random_range(4.5..6.0) * width.min(height) as f32 / 16.0,
        }
    }

    /// Color, shape and pose of the foreground. The background is left to
    /// the image, so guidance acts on the subject rather than every pixel.
    pub fn prompt(&self) -> String {
        format!(
            "{} {} {}",
            COLORS[self.foreground], SHAPES[self.shape], POSES[self.pose]
        )
    }

    pub fn with_pose(mut self, pose: usize) -> Self {
        self.pose = pose;
        self
    }

    pub fn with_foreground(mut self, color: usize) -> Self {
        self.foreground = color;
        self
    }

    fn covers(&self, x: f32, y: f32) -> bool {
        let long = self.size;
        let short = self.size * 0.45;
        let (hw, hh) = if self.pose == 0 { (short, long) } else { (long, short) };
        let dx = x - self.center.0;
        let dy = y - self.center.1;
        match self.shape {
            0 => dx.abs() <= hw && dy.abs() <= hh,
            1 => (dx / hw).powi(2) + (dy / hh).powi(2) <= 1.0,
            _ => dy.abs() <= hh && dx.abs() <= hw * (dy + hh) / (2.0 * hh),
        }
    }

    /// Renders with 4x4 supersampling and quantizes to 8 bits.
    pub fn render(&self, width: usize, height: usize) -> RgbImage {
        let fg = PALETTE[self.foreground];
        let bg = PALETTE[self.background];
        let mut pixels = Vec::with_capacity(width * height * 3);
        let step = 1.0 / SUPERSAMPLE as f32;
        for py in 0..height {
            for px in 0..width {
                let mut hits = 0usize;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let x = px as f32 + (sx as f32 + 0.5) * step;
                        let y = py as f32 + (sy as f32 + 0.5) * step;
                        hits += self.covers(x, y) as usize;
                    }
                }
                let a = hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
                for c in 0..3 {
                    let v = a * fg[c] + (1.0 - a) * bg[c];
                    pixels.push((v * 255.0).round() as u8);
                }
            }
        }
        RgbImage::new(width, height, pixels).expect("consistent raster size")
    }
}
