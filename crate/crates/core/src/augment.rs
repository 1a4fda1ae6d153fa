//! Image augmentations. Every transform takes `[H, W, 3]` images in `[0, 1]`
//! and an explicit rng; identical (spec, image, rng state) give identical output.

use std::fmt;
use std::str::FromStr;

use rand::{Rng as _, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use rand::SeedableRng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Augmentation {
    Identity,
    RandomCrop { min_fraction: f64 },
    Grayscale,
    CutoutColor { max_fraction: f64 },
    ColorJitter { brightness: f64, contrast: f64, saturation: f64 },
    RandomConv { kernel: usize },
    RandomColor { brightness: f64, contrast: f64, saturation: f64, kernel: usize },
    Black,
}

pub const DEFAULT_CROP_MIN: f64 = 0.6;
pub const DEFAULT_CUTOUT_MAX: f64 = 0.5;
pub const DEFAULT_JITTER: f64 = 0.3;
pub const DEFAULT_CONV_KERNEL: usize = 3;

impl Augmentation {
    /// Default parameters for a kind name.
    pub fn from_kind(kind: &str) -> Result<Self> {
        let j = DEFAULT_JITTER;
        Ok(match kind {
            "identity" | "none" => Augmentation::Identity,
            "random_crop" | "crop" => Augmentation::RandomCrop { min_fraction: DEFAULT_CROP_MIN },
            "grayscale" | "gray" => Augmentation::Grayscale,
            "cutout_color" => Augmentation::CutoutColor { max_fraction: DEFAULT_CUTOUT_MAX },
            "color_jitter" => Augmentation::ColorJitter { brightness: j, contrast: j, saturation: j },
            "random_conv" => Augmentation::RandomConv { kernel: DEFAULT_CONV_KERNEL },
            "random_color" => Augmentation::RandomColor {
                brightness: j,
                contrast: j,
                saturation: j,
                kernel: DEFAULT_CONV_KERNEL,
            },
            "black" => Augmentation::Black,
            other => return Err(Error::Augmentation(format!("unknown augmentation `{other}`"))),
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Augmentation::Identity => "identity",
            Augmentation::RandomCrop { .. } => "random_crop",
            Augmentation::Grayscale => "grayscale",
            Augmentation::CutoutColor { .. } => "cutout_color",
            Augmentation::ColorJitter { .. } => "color_jitter",
            Augmentation::RandomConv { .. } => "random_conv",
            Augmentation::RandomColor { .. } => "random_color",
            Augmentation::Black => "black",
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Augmentation::Identity)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Augmentation(m));
        let frac = |v: f64| v > 0.0 && v <= 1.0;
        let jitter = |v: f64| (0.0..1.0).contains(&v);
        match *self {
            Augmentation::RandomCrop { min_fraction } if !frac(min_fraction) => {
                bad(format!("crop min_fraction {min_fraction} outside (0, 1]"))
            }
            Augmentation::CutoutColor { max_fraction } if !frac(max_fraction) => {
                bad(format!("cutout max_fraction {max_fraction} outside (0, 1]"))
            }
            Augmentation::ColorJitter { brightness, contrast, saturation }
            | Augmentation::RandomColor { brightness, contrast, saturation, .. }
                if !(jitter(brightness) && jitter(contrast) && jitter(saturation)) =>
            {
                bad("jitter ranges must lie in [0, 1)".into())
            }
            Augmentation::RandomConv { kernel } | Augmentation::RandomColor { kernel, .. }
                if kernel == 0 || kernel % 2 == 0 =>
            {
                bad(format!("conv kernel {kernel} must be odd and positive"))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Augmentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind())
    }
}

impl FromStr for Augmentation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::from_kind(s)
    }
}

/// Axis-aligned pixel rectangle `[y0, y0 + h) x [x0, x0 + w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

impl Rect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y0 + self.h && x >= self.x0 && x < self.x0 + self.w
    }
}

fn side(r: &mut Rng, lo_frac: f64, hi_frac: f64, n: usize) -> usize {
    let f = if lo_frac >= hi_frac { hi_frac } else { r.random_range(lo_frac..=hi_frac) };
    ((f * n as f64).round() as usize).clamp(1, n)
}

/// Crop rectangle: side fractions uniform in `[min_fraction, 1]`, position uniform.
pub fn sample_crop_rect(r: &mut Rng, h: usize, w: usize, min_fraction: f64) -> Rect {
    let rh = side(r, min_fraction, 1.0, h);
    let rw = side(r, min_fraction, 1.0, w);
    let y0 = r.random_range(0..=h - rh);
    let x0 = r.random_range(0..=w - rw);
    Rect { y0, x0, h: rh, w: rw }
}

fn check_image(image: &Tensor) -> Result<(usize, usize)> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Shape(format!("augmentation expects [H, W, 3], got {s:?}")));
    }
    Ok((s[0], s[1]))
}

fn gray_of(px: &[f64]) -> f64 {
    (px[0] + px[1] + px[2]) / 3.0
}

fn color_jitter(data: &mut [f64], r: &mut Rng, b: f64, c: f64, s: f64) {
    let bf = r.random_range(1.0 - b..=1.0 + b);
    let cf = r.random_range(1.0 - c..=1.0 + c);
    let sf = r.random_range(1.0 - s..=1.0 + s);
    for v in data.iter_mut() {
        *v = (*v * bf).clamp(0.0, 1.0);
    }
    let mean = data.chunks(3).map(gray_of).sum::<f64>() / (data.len() / 3) as f64;
    for v in data.iter_mut() {
        *v = ((*v - mean) * cf + mean).clamp(0.0, 1.0);
    }
    for px in data.chunks_mut(3) {
        let g = gray_of(px);
        for v in px.iter_mut() {
            *v = ((*v - g) * sf + g).clamp(0.0, 1.0);
        }
    }
}

fn random_conv(data: &[f64], h: usize, w: usize, r: &mut Rng, k: usize) -> Vec<f64> {
    // Xavier-normal 3 -> 3 channel kernel, same padding, then per-image min-max rescale.
    let fan = (3 * k * k) as f64;
    let normal = Normal::new(0.0, (2.0 / (fan + fan)).sqrt()).expect("positive std");
    let kernel: Vec<f64> = (0..3 * k * k * 3).map(|_| normal.sample(r)).collect();
    let pad = k / 2;
    let mut out = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            for o in 0..3 {
                let mut acc = 0.0;
                for ky in 0..k {
                    let iy = y as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = x as isize + kx as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let base = (iy as usize * w + ix as usize) * 3;
                        let kbase = ((o * k + ky) * k + kx) * 3;
                        for c in 0..3 {
                            acc += data[base + c] * kernel[kbase + c];
                        }
                    }
                }
                out[(y * w + x) * 3 + o] = acc;
            }
        }
    }
    let lo = out.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for v in out.iter_mut() {
        *v = if span > 1e-12 { (*v - lo) / span } else { 0.0 };
    }
    out
}

/// Applies one draw of `spec` to a single image.
pub fn apply(spec: &Augmentation, image: &Tensor, r: &mut Rng) -> Result<Tensor> {
    spec.validate()?;
    let (h, w) = check_image(image)?;
    let mut data = image.data().to_vec();
    match *spec {
        Augmentation::Identity => {}
        Augmentation::Black => data.iter_mut().for_each(|v| *v = 0.0),
        Augmentation::RandomCrop { min_fraction } => {
            let rect = sample_crop_rect(r, h, w, min_fraction);
            for y in 0..h {
                for x in 0..w {
                    if !rect.contains(y, x) {
                        data[(y * w + x) * 3..(y * w + x) * 3 + 3].fill(0.0);
                    }
                }
            }
        }
        Augmentation::Grayscale => {
            for px in data.chunks_mut(3) {
                let g = gray_of(px);
                px.fill(g);
            }
        }
        Augmentation::CutoutColor { max_fraction } => {
            let rh = side(r, 0.0, max_fraction, h).max(1);
            let rw = side(r, 0.0, max_fraction, w).max(1);
            let y0 = r.random_range(0..=h - rh);
            let x0 = r.random_range(0..=w - rw);
            let color = [r.random::<f64>(), r.random::<f64>(), r.random::<f64>()];
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    data[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&color);
                }
            }
        }
        Augmentation::ColorJitter { brightness, contrast, saturation } => {
            color_jitter(&mut data, r, brightness, contrast, saturation)
        }
        Augmentation::RandomConv { kernel } => data = random_conv(&data, h, w, r, kernel),
        Augmentation::RandomColor { brightness, contrast, saturation, kernel } => {
            if r.random_bool(0.5) {
                color_jitter(&mut data, r, brightness, contrast, saturation)
            } else {
                data = random_conv(&data, h, w, r, kernel)
            }
        }
    }
    Tensor::from_parts(image.shape().to_vec(), data)
}

/// Applies `spec` to each image of a `[N, H, W, 3]` batch with an independent
/// child rng per image, drawn in order from `r`.
pub fn batch_apply(spec: &Augmentation, images: &Tensor, r: &mut Rng) -> Result<Tensor> {
    spec.validate()?;
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("batch_apply expects [N, H, W, 3], got {s:?}")));
    }
    if spec.is_identity() {
        // Keep the parent stream position independent of the kind.
        for _ in 0..s[0] {
            r.next_u64();
        }
        return Ok(images.clone());
    }
    let per = s[1] * s[2] * s[3];
    let mut out = Vec::with_capacity(images.len());
    for n in 0..s[0] {
        let mut child = Rng::seed_from_u64(r.next_u64());
        let img = Tensor::from_parts(s[1..].to_vec(), images.data()[n * per..(n + 1) * per].to_vec())?;
        out.extend(apply(spec, &img, &mut child)?.into_data());
    }
    Tensor::from_parts(s.to_vec(), out)
}
