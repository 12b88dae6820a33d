//! Class-token attention maps and their overlay rendering.
//!
//! Colour ramp ("hot"): `r = 3v`, `g = 3v - 1`, `b = 3v - 2`, each clamped to
//! [0,1], so 0 is black and 1 is white. The overlay is
//! `(1 - alpha) * gray + alpha * ramp(v)` per channel.

use std::path::Path;

use crate::autodiff::Tape;
use crate::encoder::{embed, encode, ForwardOptions};
use crate::imageio;
use crate::model::{EncoderConfig, ModelState};
use crate::tensor::{Scalar, Tensor, TensorError};

pub const DEFAULT_LAYER: usize = 10;
pub const DEFAULT_ALPHA: Scalar = 0.5;

/// Block 10 when the encoder has at least 10 blocks, else round(5L/6).
pub fn default_layer(config: &EncoderConfig) -> usize {
    if config.depth >= DEFAULT_LAYER {
        DEFAULT_LAYER
    } else {
        ((5 * config.depth) as Scalar / 6.0).round().max(1.0) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    /// 1-indexed source block.
    pub layer: usize,
    /// `[g, g]` values in [0,1].
    pub grid: Tensor,
    /// Head-averaged class-token weights before min-max scaling.
    pub raw: Tensor,
    pub raw_min: Scalar,
    pub raw_max: Scalar,
}

/// Min-max scale to [0,1]; a constant input maps to all zeros.
pub fn min_max_normalize(values: &[Scalar]) -> Vec<Scalar> {
    let lo = values.iter().copied().fold(Scalar::INFINITY, Scalar::min);
    let hi = values.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
    let range = hi - lo;
    values
        .iter()
        .map(|v| if range > 0.0 { (v - lo) / range } else { 0.0 })
        .collect()
}

/// Class-token query row of block `layer` for a `[H, W]` slice, averaged
/// over heads, without the class token's own entry, on the patch grid.
pub fn attention_map(model: &ModelState, slice: &Tensor, layer: usize) -> Result<AttentionMap, TensorError> {
    let cfg = &model.config;
    if layer == 0 || layer > cfg.depth {
        return Err(TensorError::Invalid {
            op: "attention_map",
            msg: format!("layer {layer} outside 1..={}", cfg.depth),
        });
    }
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, false);
    let img = tape.constant(slice.clone().reshape(&[1, cfg.channels, cfg.image_size, cfg.image_size])?);
    let seq = embed(&mut tape, img, model, &bound)?;
    let outputs = encode(&mut tape, seq, model, &bound, &mut ForwardOptions::recording())?;
    let probs = outputs.attention_for(&tape, layer, 0).expect("attention recorded");
    let (heads, t) = (probs.shape()[0], probs.shape()[1]);
    let mut row = vec![0.0; t - 1];
    for h in 0..heads {
        let base = h * t * t;
        for (j, r) in row.iter_mut().enumerate() {
            *r += probs.data()[base + 1 + j] / heads as Scalar;
        }
    }
    let g = cfg.grid();
    let raw_min = row.iter().copied().fold(Scalar::INFINITY, Scalar::min);
    let raw_max = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
    Ok(AttentionMap {
        layer,
        grid: Tensor::new(vec![g, g], min_max_normalize(&row))?,
        raw: Tensor::new(vec![g, g], row)?,
        raw_min,
        raw_max,
    })
}

/// Bilinear resize of a `[g, g]` grid to `[size, size]` with corners aligned,
/// so grid corner values are reproduced exactly.
pub fn upsample_bilinear(grid: &Tensor, size: usize) -> Tensor {
    let (gh, gw) = (grid.shape()[0], grid.shape()[1]);
    let d = grid.data();
    let coord = |i: usize, g: usize| {
        if size <= 1 || g <= 1 {
            0.0
        } else {
            i as Scalar * (g - 1) as Scalar / (size - 1) as Scalar
        }
    };
    Tensor::from_fn(&[size, size], |idx| {
        let (y, x) = (coord(idx / size, gh), coord(idx % size, gw));
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(gh - 1), (x0 + 1).min(gw - 1));
        let (fy, fx) = (y - y0 as Scalar, x - x0 as Scalar);
        let top = d[y0 * gw + x0] * (1.0 - fx) + d[y0 * gw + x1] * fx;
        let bottom = d[y1 * gw + x0] * (1.0 - fx) + d[y1 * gw + x1] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

pub fn color_ramp(v: Scalar) -> [Scalar; 3] {
    let v = v.clamp(0.0, 1.0);
    [(3.0 * v).min(1.0), (3.0 * v - 1.0).clamp(0.0, 1.0), (3.0 * v - 2.0).clamp(0.0, 1.0)]
}

/// Interleaved RGB bytes of the overlay for a `[H, W]` slice.
pub fn overlay_rgb(map: &AttentionMap, slice: &Tensor, alpha: Scalar) -> Vec<u8> {
    let (h, w) = (slice.shape()[0], slice.shape()[1]);
    let up = upsample_bilinear(&map.grid, h.max(w));
    let mut out = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            let gray = slice.data()[y * w + x].clamp(0.0, 1.0);
            for c in color_ramp(up.data()[y * up.shape()[1] + x]) {
                out.push(imageio::to_byte((1.0 - alpha) * gray + alpha * c));
            }
        }
    }
    out
}

/// Write the RGB overlay as PNG and the upsampled map as an 8-bit PGM.
pub fn render_overlay(
    map: &AttentionMap,
    slice: &Tensor,
    alpha: Scalar,
    png_path: &Path,
    pgm_path: Option<&Path>,
) -> std::io::Result<()> {
    let (h, w) = (slice.shape()[0], slice.shape()[1]);
    std::fs::write(png_path, imageio::encode_png_rgb(w, h, &overlay_rgb(map, slice, alpha))?)?;
    if let Some(p) = pgm_path {
        let up = upsample_bilinear(&map.grid, h);
        let bytes: Vec<u8> = up.data().iter().map(|&v| imageio::to_byte(v)).collect();
        imageio::write_pgm(p, h, h, &bytes)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_layer_rule() {
        assert_eq!(default_layer(&EncoderConfig::base()), 10);
        assert_eq!(default_layer(&EncoderConfig::nano()), 3);
        assert_eq!(default_layer(&EncoderConfig::micro()), 7);
    }

    #[test]
    fn grid_shape_and_range() {
        let cfg = EncoderConfig::nano().with_image(32, 16);
        let model = ModelState::new(cfg, false, false, &mut ChaCha8Rng::seed_from_u64(0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let slice = Tensor::from_fn(&[32, 32], |_| rng.gen());
        let map = attention_map(&model, &slice, 3).unwrap();
        assert_eq!(map.grid.shape(), &[2, 2]);
        assert!(map.grid.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(map.raw.data().iter().all(|&v| v >= 0.0));
        assert!(map.raw.data().iter().sum::<Scalar>() < 1.0);
        assert!(attention_map(&model, &slice, 0).is_err());
        assert!(attention_map(&model, &slice, 5).is_err());
    }

    #[test]
    fn uniform_attention_normalises_to_zeros() {
        assert_eq!(min_max_normalize(&[0.25; 4]), vec![0.0; 4]);
    }

    #[test]
    fn upsample_keeps_corners() {
        let g = Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let up = upsample_bilinear(&g, 4);
        let d = up.data();
        assert_eq!((d[0], d[3], d[12], d[15]), (0.1, 0.2, 0.3, 0.4));
    }

    #[test]
    fn zero_map_overlay_is_dimmed_gray() {
        let map = AttentionMap {
            layer: 1,
            grid: Tensor::zeros(&[2, 2]),
            raw: Tensor::zeros(&[2, 2]),
            raw_min: 0.0,
            raw_max: 0.0,
        };
        let slice = Tensor::from_fn(&[4, 4], |i| i as Scalar / 15.0);
        let rgb = overlay_rgb(&map, &slice, 0.5);
        for (i, px) in rgb.chunks(3).enumerate() {
            let expected = imageio::to_byte(0.5 * i as Scalar / 15.0);
            assert_eq!(px, [expected; 3]);
        }
    }
}
