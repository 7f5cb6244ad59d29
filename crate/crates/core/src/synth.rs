//! Synthetic moving-square snippets with exact ground-truth tracks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::detect::BoxCoords;
use crate::error::{Result, ScnnError};
use crate::ica::Snippet;
use crate::io::TrackRow;
use crate::tensor::Shape;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Motion {
    Static,
    Linear,
    Quadratic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub n: usize,
    /// Image side in pixels.
    pub size: usize,
    pub channels: usize,
    /// Standard deviation of per-frame pixel noise.
    pub noise: f64,
    /// Object side range as a fraction of the image side.
    pub size_min: f64,
    pub size_max: f64,
    pub motion: Motion,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n: 16,
            size: 32,
            channels: 3,
            noise: 0.02,
            size_min: 0.2,
            size_max: 0.32,
            motion: Motion::Quadratic,
        }
    }
}

/// Largest center displacement over a snippet, as a fraction of the image.
const MAX_TRAVEL: f64 = 0.35;

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.size < 4 || self.channels == 0 {
            return Err(ScnnError::InvalidArgument(
                "scene needs n >= 2, size >= 4 and at least one channel".into(),
            ));
        }
        if !(self.size_min > 0.0 && self.size_min <= self.size_max) {
            return Err(ScnnError::InvalidArgument(
                "object size range must satisfy 0 < size_min <= size_max".into(),
            ));
        }
        // The object must fit with room to spare or it cannot stay in frame.
        if self.size_max >= 0.9 {
            return Err(ScnnError::InvalidArgument(format!(
                "object side {} leaves the frame",
                self.size_max
            )));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(ScnnError::InvalidArgument("noise must lie in [0, 0.5]".into()));
        }
        Ok(())
    }
}

// Length of [a0, a1] ∩ [b0, b1].
fn cover(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Center at frame `t` on the path `p0 + (p1 − p0)·s(u)`, `u = t/(n−1)`,
/// `s(u) = u + κ·u·(u − 1)`. For `|κ| ≤ 1`, `s` is monotone from 0 to 1,
/// so the path never leaves the segment between its endpoints.
pub fn path_point(p0: f64, p1: f64, kappa: f64, t: usize, n: usize) -> f64 {
    let u = t as f64 / (n - 1) as f64;
    p0 + (p1 - p0) * (u + kappa * u * (u - 1.0))
}

/// One snippet and its per-frame track.
pub fn generate(spec: &SceneSpec, seed: u64) -> Result<(Snippet, Vec<TrackRow>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = rng.random_range(spec.size_min..=spec.size_max);
    let (lo, hi) = (side / 2.0, 1.0 - side / 2.0);
    let endpoint = |rng: &mut ChaCha8Rng| {
        let p0: f64 = rng.random_range(lo..=hi);
        let p1 = match spec.motion {
            Motion::Static => p0,
            _ => rng.random_range((p0 - MAX_TRAVEL).max(lo)..=(p0 + MAX_TRAVEL).min(hi)),
        };
        (p0, p1)
    };
    let (x0, x1) = endpoint(&mut rng);
    let (y0, y1) = endpoint(&mut rng);
    let (kx, ky) = match spec.motion {
        Motion::Quadratic => (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)),
        _ => (0.0, 0.0),
    };
    let bg: Vec<f64> = (0..spec.channels).map(|_| rng.random_range(0.1..0.4)).collect();
    let fg: Vec<f64> = (0..spec.channels).map(|_| rng.random_range(0.6..0.95)).collect();
    let (gx, gy) = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("finite std");

    let px = spec.size as f64;
    let shape = Shape::new(spec.channels, spec.size, spec.size);
    let mut data = Vec::with_capacity(spec.n * shape.len());
    let mut track = Vec::with_capacity(spec.n);
    for t in 0..spec.n {
        let cx = path_point(x0, x1, kx, t, spec.n);
        let cy = path_point(y0, y1, ky, t, spec.n);
        track.push(TrackRow {
            frame: t,
            bbox: BoxCoords::new(cx, cy, side, side),
            class: 0,
        });
        let (l, r) = ((cx - side / 2.0) * px, (cx + side / 2.0) * px);
        let (top, bot) = ((cy - side / 2.0) * px, (cy + side / 2.0) * px);
        for c in 0..spec.channels {
            for y in 0..spec.size {
                let vy = cover(y as f64, y as f64 + 1.0, top, bot);
                for x in 0..spec.size {
                    let cov = vy * cover(x as f64, x as f64 + 1.0, l, r);
                    let back = bg[c] + gx * (x as f64 / px - 0.5) + gy * (y as f64 / px - 0.5);
                    let mut v = back * (1.0 - cov) + fg[c] * cov;
                    if spec.noise > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    data.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    Ok((Snippet::new(spec.n, shape, data)?, track))
}

/// Seed of the `i`-th snippet in a corpus.
pub fn corpus_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn generate_corpus(
    spec: &SceneSpec,
    count: usize,
    seed: u64,
) -> Result<Vec<(Snippet, Vec<TrackRow>)>> {
    (0..count).map(|i| generate(spec, corpus_seed(seed, i))).collect()
}
