//! Deterministic two-domain toy data.
//!
//! Both domains draw the same list of gray ellipses. The source domain puts
//! them on a flat background; the target domain adds a linear brightness
//! gradient and Gaussian texture to the background.
//!
//! By default every target gradient runs left (dark) to right (bright), like
//! a fixed illumination direction. A refiner has no positional input beyond
//! the zero padding at the patch border, so uniformly random directions are
//! not something it can learn; `gradient_spread` enables them anyway.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::imageops::ImagePatch;
use crate::rng::seeded;
use crate::trainer::{Result, Role, SampleSet};

/// Supersampling factor per axis when rasterizing ellipse coverage.
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    /// Peak-to-peak brightness change of the target gradient across the patch.
    pub gradient_amplitude: f64,
    /// Gradient directions are drawn uniformly from
    /// `gradient_angle ± gradient_spread / 2` (radians).
    pub gradient_angle: f64,
    pub gradient_spread: f64,
    pub texture_std: f64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            count: 500,
            size: 32,
            seed: 0,
            gradient_amplitude: 0.3,
            gradient_angle: 0.0,
            gradient_spread: 0.0,
            texture_std: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    theta: f64,
    level: f64,
}

impl Ellipse {
    fn random(rng: &mut impl Rng, size: f64) -> Self {
        let rx = rng.random_range(0.12..0.28) * size;
        let ry = rng.random_range(0.08..0.2) * size;
        let margin = rx.max(ry);
        Self {
            cx: rng.random_range(margin..size - margin),
            cy: rng.random_range(margin..size - margin),
            rx,
            ry,
            theta: rng.random_range(0.0..PI),
            level: rng.random_range(0.6..0.8),
        }
    }

    /// Fraction of pixel `(x, y)` covered by the ellipse.
    fn coverage(&self, x: usize, y: usize) -> f64 {
        let (s, c) = self.theta.sin_cos();
        let mut hits = 0;
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64 - self.cx;
                let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64 - self.cy;
                let u = c * px + s * py;
                let v = -s * px + c * py;
                if (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0 {
                    hits += 1;
                }
            }
        }
        hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
    }
}

fn render(size: usize, background: &[f64], e: &Ellipse) -> ImagePatch {
    let mut px = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let a = e.coverage(x, y);
            let v = (a * e.level + (1.0 - a) * background[y * size + x]).clamp(0.0, 1.0) as f32;
            px.extend([v, v, v]);
        }
    }
    ImagePatch::new(size, size, 3, px).expect("valid toy patch")
}

/// `(source, target)` sets of `spec.count` patches each.
pub fn generate(spec: &ToySpec) -> Result<(SampleSet, SampleSet)> {
    let mut rng = seeded(spec.seed);
    let size = spec.size as f64;
    let normal = Normal::new(0.0, spec.texture_std.max(0.0)).expect("finite std");
    let mut source = Vec::with_capacity(spec.count);
    let mut target = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let e = Ellipse::random(&mut rng, size);
        let base = rng.random_range(0.3..0.45);
        let flat = vec![base; spec.size * spec.size];
        source.push(render(spec.size, &flat, &e));

        let angle = spec.gradient_angle + spec.gradient_spread * (rng.random::<f64>() - 0.5);
        let (s, c) = angle.sin_cos();
        // projection of the patch corners onto the gradient direction spans
        // size * (|c| + |s|); scale so the full span is the amplitude
        let span = size * (c.abs() + s.abs());
        let centre = (size - 1.0) / 2.0;
        let textured: Vec<f64> = (0..spec.size * spec.size)
            .map(|i| {
                let (x, y) = ((i % spec.size) as f64 - centre, (i / spec.size) as f64 - centre);
                base + spec.gradient_amplitude * (c * x + s * y) / span + normal.sample(&mut rng)
            })
            .collect();
        target.push(render(spec.size, &textured, &e));
    }
    Ok((
        SampleSet::new(Role::Synthetic, source)?,
        SampleSet::new(Role::Real, target)?,
    ))
}

/// Writes `source/` and `target/` PNG trees under `out`.
pub fn write(spec: &ToySpec, out: &Path) -> Result<()> {
    let (x, y) = generate(spec)?;
    x.save_dir(&out.join("source"))?;
    y.save_dir(&out.join("target"))?;
    Ok(())
}
