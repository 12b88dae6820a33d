//! Slice augmentation: random resized crop, horizontal flip, Gaussian blur,
//! sharpness and contrast jitter, applied in that order.
//!
//! Saturation and hue jitter are not offered; both are undefined for
//! single-channel images.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub crop: bool,
    /// Range of the crop area as a fraction of the image area.
    pub crop_scale: [Scalar; 2],
    pub flip: bool,
    pub flip_p: Scalar,
    pub blur: bool,
    pub blur_p: Scalar,
    pub blur_sigma: [Scalar; 2],
    pub sharpness: bool,
    pub sharpness_p: Scalar,
    pub sharpness_factor: [Scalar; 2],
    pub contrast: bool,
    pub contrast_p: Scalar,
    pub contrast_factor: [Scalar; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop: true,
            crop_scale: [0.8, 1.0],
            flip: true,
            flip_p: 0.5,
            blur: true,
            blur_p: 0.5,
            blur_sigma: [0.1, 2.0],
            sharpness: true,
            sharpness_p: 0.5,
            sharpness_factor: [0.5, 2.0],
            contrast: true,
            contrast_p: 0.5,
            contrast_factor: [0.7, 1.3],
        }
    }
}

impl AugmentConfig {
    /// Every transform disabled.
    pub fn none() -> Self {
        Self {
            crop: false,
            flip: false,
            blur: false,
            sharpness: false,
            contrast: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let ranges = [
            ("crop_scale", self.crop_scale),
            ("blur_sigma", self.blur_sigma),
            ("sharpness_factor", self.sharpness_factor),
            ("contrast_factor", self.contrast_factor),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo <= hi) || lo < 0.0 {
                return Err(format!("{name} range [{lo}, {hi}] is invalid"));
            }
        }
        if self.crop_scale[1] > 1.0 || self.crop_scale[0] <= 0.0 {
            return Err("crop_scale must lie in (0, 1]".into());
        }
        for (name, p) in [
            ("flip_p", self.flip_p),
            ("blur_p", self.blur_p),
            ("sharpness_p", self.sharpness_p),
            ("contrast_p", self.contrast_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} {p} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Concrete transform parameters drawn once and applied to one or more
/// slices (all slices of an exam share them).
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    /// Top-left corner and side length of a square crop, in pixels.
    pub crop: Option<(Scalar, Scalar, Scalar)>,
    pub flip: bool,
    pub blur_sigma: Option<Scalar>,
    pub sharpness: Option<Scalar>,
    pub contrast: Option<Scalar>,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [Scalar; 2]) -> Scalar {
    lo + (hi - lo) * rng.gen::<Scalar>()
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            crop: None,
            flip: false,
            blur_sigma: None,
            sharpness: None,
            contrast: None,
        }
    }

    /// Draw parameters for a `size × size` image. The number of draws is
    /// fixed regardless of which transforms are enabled.
    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, size: usize, rng: &mut R) -> Self {
        let scale = uniform(rng, cfg.crop_scale);
        let side = scale.sqrt() * size as Scalar;
        let slack = size as Scalar - side;
        let (y0, x0) = (slack * rng.gen::<Scalar>(), slack * rng.gen::<Scalar>());
        let flip = rng.gen::<Scalar>() < cfg.flip_p;
        let blur_on = rng.gen::<Scalar>() < cfg.blur_p;
        let sigma = uniform(rng, cfg.blur_sigma);
        let sharp_on = rng.gen::<Scalar>() < cfg.sharpness_p;
        let sharp = uniform(rng, cfg.sharpness_factor);
        let contrast_on = rng.gen::<Scalar>() < cfg.contrast_p;
        let contrast = uniform(rng, cfg.contrast_factor);
        Self {
            crop: cfg.crop.then_some((y0, x0, side)),
            flip: cfg.flip && flip,
            blur_sigma: (cfg.blur && blur_on).then_some(sigma),
            sharpness: (cfg.sharpness && sharp_on).then_some(sharp),
            contrast: (cfg.contrast && contrast_on).then_some(contrast),
        }
    }

    /// Apply to a `[H, W]` image; the result is clamped to [0,1].
    pub fn apply(&self, image: &Tensor) -> Tensor {
        let (h, w) = (image.shape()[0], image.shape()[1]);
        let mut px = image.data().to_vec();
        if let Some((y0, x0, side)) = self.crop {
            px = crop_resize(&px, h, w, y0, x0, side);
        }
        if self.flip {
            px = hflip(&px, h, w);
        }
        if let Some(sigma) = self.blur_sigma {
            px = gaussian_blur(&px, h, w, sigma);
        }
        if let Some(f) = self.sharpness {
            px = adjust_sharpness(&px, h, w, f);
        }
        if let Some(f) = self.contrast {
            px = adjust_contrast(&px, f);
        }
        px.iter_mut().for_each(|x| *x = x.clamp(0.0, 1.0));
        Tensor::new(vec![h, w], px).expect("shape preserved")
    }
}

pub fn augment<R: Rng + ?Sized>(slice: &Tensor, cfg: &AugmentConfig, rng: &mut R) -> Tensor {
    AugmentParams::sample(cfg, slice.shape()[0], rng).apply(slice)
}

fn bilinear(px: &[Scalar], h: usize, w: usize, y: Scalar, x: Scalar) -> Scalar {
    let y = y.clamp(0.0, (h - 1) as Scalar);
    let x = x.clamp(0.0, (w - 1) as Scalar);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as Scalar, x - x0 as Scalar);
    let top = px[y0 * w + x0] * (1.0 - fx) + px[y0 * w + x1] * fx;
    let bottom = px[y1 * w + x0] * (1.0 - fx) + px[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Resample the square crop `[y0, y0+side) × [x0, x0+side)` back to `h × w`
/// with pixel-centre aligned bilinear interpolation.
fn crop_resize(px: &[Scalar], h: usize, w: usize, y0: Scalar, x0: Scalar, side: Scalar) -> Vec<Scalar> {
    let (sy, sx) = (side / h as Scalar, side / w as Scalar);
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        let y = y0 + (i as Scalar + 0.5) * sy - 0.5;
        for j in 0..w {
            let x = x0 + (j as Scalar + 0.5) * sx - 0.5;
            out.push(bilinear(px, h, w, y, x));
        }
    }
    out
}

fn hflip(px: &[Scalar], h: usize, w: usize) -> Vec<Scalar> {
    (0..h * w).map(|i| px[(i / w) * w + (w - 1 - i % w)]).collect()
}

fn gaussian_blur(px: &[Scalar], h: usize, w: usize, sigma: Scalar) -> Vec<Scalar> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<Scalar> = (-radius..=radius)
        .map(|d| (-(d * d) as Scalar / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: Scalar = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, wt)| wt * px[y * w + clamp(x as isize + k as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, wt)| wt * tmp[clamp(y as isize + k as isize - radius, h) * w + x])
                .sum();
        }
    }
    out
}

/// Blend with a 3×3 smoothed copy (centre weight 5, neighbours 1; border
/// pixels unchanged): factor 0 gives the smoothed image, 1 the original.
fn adjust_sharpness(px: &[Scalar], h: usize, w: usize, factor: Scalar) -> Vec<Scalar> {
    let mut smooth = px.to_vec();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let mut acc = 4.0 * px[y * w + x];
            for dy in 0..3 {
                for dx in 0..3 {
                    acc += px[(y + dy - 1) * w + (x + dx - 1)];
                }
            }
            smooth[y * w + x] = acc / 13.0;
        }
    }
    px.iter()
        .zip(&smooth)
        .map(|(o, s)| (s + factor * (o - s)).clamp(0.0, 1.0))
        .collect()
}

fn adjust_contrast(px: &[Scalar], factor: Scalar) -> Vec<Scalar> {
    let mean = px.iter().sum::<Scalar>() / px.len() as Scalar;
    px.iter().map(|x| (mean + factor * (x - mean)).clamp(0.0, 1.0)).collect()
}
