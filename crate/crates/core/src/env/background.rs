//! Background textures keyed by id.

use rand::Rng as _;

use super::{AGENT_COLOR, GOAL_COLOR, WALL_COLOR};
use crate::rng;

const BACKGROUND_TAG: u64 = 0xb6;

/// Minimum L-infinity distance between any background pixel and a reserved
/// entity color.
pub const RESERVED_MARGIN: f64 = 0.2;

const NOISE_AMPLITUDE: f64 = 0.1;

/// Per-channel spread of a texture's secondary colors around its base color.
pub const TEXTURE_SPREAD: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub enum Texture {
    Solid([f64; 3]),
    Stripes { a: [f64; 3], b: [f64; 3], period: usize, vertical: bool },
    Checker { a: [f64; 3], b: [f64; 3], size: usize },
    /// Smooth color field: random lattice colors, bilinearly blended, plus
    /// per-pixel jitter.
    Noise { lattice: Vec<[f64; 3]>, cells: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackgroundSpec {
    pub id: u64,
    pub texture: Texture,
}

fn far_from_reserved(c: [f64; 3], margin: f64) -> bool {
    [AGENT_COLOR, GOAL_COLOR, WALL_COLOR].iter().all(|r| {
        let d = c.iter().zip(r).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        d >= margin
    })
}

fn sample_color(r: &mut crate::rng::Rng, margin: f64) -> [f64; 3] {
    loop {
        let c = [r.random::<f64>(), r.random::<f64>(), r.random::<f64>()];
        if far_from_reserved(c, margin) {
            return c;
        }
    }
}

/// A color within `TEXTURE_SPREAD` of `base` per channel, outside the margin.
fn sample_near(r: &mut crate::rng::Rng, base: [f64; 3], margin: f64) -> [f64; 3] {
    loop {
        let c = base.map(|v| (v + r.random_range(-TEXTURE_SPREAD..=TEXTURE_SPREAD)).clamp(0.0, 1.0));
        if far_from_reserved(c, margin) {
            return c;
        }
    }
}

/// Pushes `c` out of the margin box around any reserved color. Reserved
/// colors are at least 0.8 apart, so one push never lands near another.
fn repel(mut c: [f64; 3]) -> [f64; 3] {
    for r in [AGENT_COLOR, GOAL_COLOR, WALL_COLOR] {
        if far_from_reserved_one(c, r, RESERVED_MARGIN) {
            continue;
        }
        let (k, _) = (0..3)
            .map(|k| (k, (c[k] - r[k]).abs()))
            .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        let up = r[k] + RESERVED_MARGIN;
        c[k] = if (c[k] >= r[k] && up <= 1.0) || r[k] - RESERVED_MARGIN < 0.0 { up } else { r[k] - RESERVED_MARGIN };
    }
    c
}

fn far_from_reserved_one(c: [f64; 3], r: [f64; 3], margin: f64) -> bool {
    c.iter().zip(&r).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) >= margin
}

fn hash_unit(seed: u64, y: usize, x: usize, c: usize) -> f64 {
    let h = rng::derive_seed(seed, ((y as u64) << 40) ^ ((x as u64) << 8) ^ c as u64);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

impl BackgroundSpec {
    /// Texture family cycles with `id % 4`; colors and geometry derive from
    /// `id`. Every texture varies around one base color.
    pub fn new(id: u64) -> Self {
        let mut r = rng::stream(id, BACKGROUND_TAG);
        let margin = RESERVED_MARGIN;
        let base = sample_color(&mut r, margin);
        let texture = match id % 4 {
            0 => Texture::Solid(base),
            1 => Texture::Stripes {
                a: base,
                b: sample_near(&mut r, base, margin),
                period: r.random_range(2..=6),
                vertical: r.random(),
            },
            2 => Texture::Checker {
                a: base,
                b: sample_near(&mut r, base, margin),
                size: r.random_range(2..=5),
            },
            _ => {
                let cells = r.random_range(2..=4);
                Texture::Noise {
                    lattice: (0..(cells + 1) * (cells + 1)).map(|_| sample_near(&mut r, base, margin)).collect(),
                    cells,
                    seed: r.random(),
                }
            }
        };
        Self { id, texture }
    }

    /// Color at `(y, x)` of an `size x size` image.
    pub fn pixel(&self, y: usize, x: usize, size: usize) -> [f64; 3] {
        match &self.texture {
            Texture::Solid(c) => *c,
            Texture::Stripes { a, b, period, vertical } => {
                let t = if *vertical { x } else { y };
                if (t / period) % 2 == 0 {
                    *a
                } else {
                    *b
                }
            }
            Texture::Checker { a, b, size } => {
                if (y / size + x / size) % 2 == 0 {
                    *a
                } else {
                    *b
                }
            }
            Texture::Noise { lattice, cells, seed } => {
                let n = *cells;
                let fy = y as f64 / size.max(1) as f64 * n as f64;
                let fx = x as f64 / size.max(1) as f64 * n as f64;
                let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
                let at = |yy: usize, xx: usize| lattice[yy.min(n) * (n + 1) + xx.min(n)];
                let mut out = [0.0; 3];
                for (c, v) in out.iter_mut().enumerate() {
                    let top = at(y0, x0)[c] * (1.0 - tx) + at(y0, x0 + 1)[c] * tx;
                    let bottom = at(y0 + 1, x0)[c] * (1.0 - tx) + at(y0 + 1, x0 + 1)[c] * tx;
                    let smooth = top * (1.0 - ty) + bottom * ty;
                    *v = (smooth + NOISE_AMPLITUDE * (2.0 * hash_unit(*seed, y, x, c) - 1.0)).clamp(0.0, 1.0);
                }
                repel(out)
            }
        }
    }

    /// Full `h x w x 3` texture, row-major.
    pub fn image(&self, h: usize, w: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                out.extend_from_slice(&self.pixel(y, x, h.max(w)));
            }
        }
        out
    }
}
