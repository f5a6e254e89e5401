//! Deterministic toy editing tasks: a rendered scene paired with a target
//! prompt that differs from the scene's own description.

use baret_core::backbone::toy::{text, ShapeScene};
use baret_core::backbone::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EditKind {
    /// Pose swap, a non-rigid change.
    Pose,
    /// Foreground color change.
    Color,
}

#[derive(Clone, Debug)]
pub struct ToyCase {
    pub id: usize,
    pub kind: EditKind,
    pub source: ShapeScene,
    pub image: RgbImage,
    pub source_prompt: String,
    pub target_prompt: String,
}

pub const SUITE_SEED: u64 = 0x5717e;

/// `n` cases alternating pose and color edits; the same `(n, seed)` always
/// yields the same suite.
pub fn mismatch_suite(n: usize, seed: u64, width: usize, height: usize) -> Vec<ToyCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|id| {
            let source = ShapeScene::sample(&mut rng, width, height);
            let kind = if id % 2 == 0 { EditKind::Pose } else { EditKind::Color };
            let target = match kind {
                EditKind::Pose => source.with_pose(1 - source.pose),
                EditKind::Color => {
                    let n = text::COLORS.len();
                    let mut c = rng.random_range(0..n);
                    while c == source.foreground || c == source.background {
                        c = (c + 1) % n;
                    }
                    source.with_foreground(c)
                }
            };
            ToyCase {
                id,
                kind,
                image: source.render(width, height),
                source_prompt: source.prompt(),
                target_prompt: target.prompt(),
                source,
            }
        })
        .collect()
}

/// Ten cases for the convergence bench.
pub fn bench_suite(width: usize, height: usize) -> Vec<ToyCase> {
    mismatch_suite(10, SUITE_SEED, width, height)
}

/// Twenty cases for reconstruction and trade-off studies.
pub fn fixture_suite(width: usize, height: usize) -> Vec<ToyCase> {
    mismatch_suite(20, SUITE_SEED ^ 0x20, width, height)
}
