//! Group-masked corruption: connected rectangular groups of patches are
//! replaced with zeros, ones or uniform noise.

use std::io;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::imageio;
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionMode {
    Zeros,
    Ones,
    /// i.i.d. Uniform[0, 1] over the normalised intensity range.
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionSpec {
    pub mode: CorruptionMode,
    /// Upper bound of the per-image target ratio, drawn from U(0, ratio_max).
    pub ratio_max: Scalar,
    /// Group side lengths in patches, inclusive.
    pub min_group: usize,
    pub max_group: usize,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self {
            mode: CorruptionMode::Zeros,
            ratio_max: 0.70,
            min_group: 1,
            max_group: 6,
        }
    }
}

impl CorruptionSpec {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.ratio_max) {
            return Err(format!("ratio_max {} outside [0, 1]", self.ratio_max));
        }
        if self.min_group == 0 || self.min_group > self.max_group {
            return Err(format!(
                "group size range {}..={} is empty",
                self.min_group, self.max_group
            ));
        }
        Ok(())
    }
}

/// Patch-aligned rectangle of masked patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGroup {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl PatchGroup {
    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

/// Binary mask at patch resolution plus its pixel expansion
/// (1 = manipulated pixel).
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionMask {
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_size: usize,
    pub patches: Vec<bool>,
    pub groups: Vec<PatchGroup>,
    /// Target fraction that the sampler aimed for.
    pub target: Scalar,
}

impl CorruptionMask {
    pub fn empty(grid_h: usize, grid_w: usize, patch_size: usize) -> Self {
        Self {
            grid_h,
            grid_w,
            patch_size,
            patches: vec![false; grid_h * grid_w],
            groups: Vec::new(),
            target: 0.0,
        }
    }

    pub fn height(&self) -> usize {
        self.grid_h * self.patch_size
    }

    pub fn width(&self) -> usize {
        self.grid_w * self.patch_size
    }

    pub fn masked_patches(&self) -> usize {
        self.patches.iter().filter(|&&m| m).count()
    }

    pub fn coverage(&self) -> Scalar {
        self.masked_patches() as Scalar / self.patches.len() as Scalar
    }

    pub fn is_masked(&self, y: usize, x: usize) -> bool {
        self.patches[(y / self.patch_size) * self.grid_w + x / self.patch_size]
    }

    /// H×W pixel mask as 0/1 values.
    pub fn pixel_mask(&self) -> Tensor {
        let (h, w) = (self.height(), self.width());
        Tensor::from_fn(&[h, w], |i| if self.is_masked(i / w, i % w) { 1.0 } else { 0.0 })
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let (h, w) = (self.height(), self.width());
        let px: Vec<u8> = (0..h * w)
            .map(|i| if self.is_masked(i / w, i % w) { 255 } else { 0 })
            .collect();
        imageio::encode_pgm(w, h, &px)
    }

    pub fn write_pgm(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, self.to_pgm())
    }
}

/// Sample a group mask on a `grid_h × grid_w` patch grid.
///
/// A target ratio is drawn from U(0, ratio_max); random rectangles (side
/// lengths uniform in the spec bounds, clipped to the grid; position uniform)
/// are placed, overlaps allowed, until the covered fraction first reaches the
/// target. Coverage therefore exceeds the target by less than one group.
pub fn sample_mask<R: Rng + ?Sized>(
    grid_h: usize,
    grid_w: usize,
    patch_size: usize,
    spec: &CorruptionSpec,
    rng: &mut R,
) -> CorruptionMask {
    let mut mask = CorruptionMask::empty(grid_h, grid_w, patch_size);
    let total = (grid_h * grid_w) as Scalar;
    mask.target = spec.ratio_max * rng.gen::<Scalar>();
    let mut covered = 0usize;
    while (covered as Scalar) < mask.target * total {
        let height = rng.gen_range(spec.min_group.min(grid_h)..=spec.max_group.min(grid_h));
        let width = rng.gen_range(spec.min_group.min(grid_w)..=spec.max_group.min(grid_w));
        let row = rng.gen_range(0..=grid_h - height);
        let col = rng.gen_range(0..=grid_w - width);
        for r in row..row + height {
            for c in col..col + width {
                let cell = &mut mask.patches[r * grid_w + c];
                if !*cell {
                    *cell = true;
                    covered += 1;
                }
            }
        }
        mask.groups.push(PatchGroup {
            row,
            col,
            height,
            width,
        });
    }
    mask
}

/// Replace masked pixels of a `[H, W]` or `[C, H, W]` image. Unmasked pixels
/// are copied bit-for-bit.
pub fn apply_corruption<R: Rng + ?Sized>(
    image: &Tensor,
    mask: &CorruptionMask,
    mode: CorruptionMode,
    rng: &mut R,
) -> Result<Tensor, TensorError> {
    let shape = image.shape();
    let (h, w) = match shape {
        [h, w] | [_, h, w] => (*h, *w),
        _ => {
            return Err(TensorError::Rank {
                op: "apply_corruption",
                expected: 3,
                shape: shape.to_vec(),
            })
        }
    };
    if (h, w) != (mask.height(), mask.width()) {
        return Err(TensorError::ShapeMismatch {
            op: "apply_corruption",
            lhs: shape.to_vec(),
            rhs: vec![mask.height(), mask.width()],
        });
    }
    let mut out = image.clone();
    for (i, px) in out.data_mut().iter_mut().enumerate() {
        let pos = i % (h * w);
        if mask.is_masked(pos / w, pos % w) {
            *px = match mode {
                CorruptionMode::Zeros => 0.0,
                CorruptionMode::Ones => 1.0,
                CorruptionMode::Noise => rng.gen::<Scalar>(),
            };
        }
    }
    Ok(out)
}
