//! Patch tokenisation: non-overlapping p×p patches projected to K dims, a
//! class token at index 0 and learnable position embeddings.

use crate::autodiff::{Tape, Var};
use crate::tensor::TensorError;

/// Geometry of the patch grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
}

impl PatchGeometry {
    pub fn new(image_size: usize, patch_size: usize, channels: usize) -> Result<Self, TensorError> {
        if patch_size == 0 || image_size % patch_size != 0 {
            return Err(TensorError::Invalid {
                op: "patchify",
                msg: format!("image size {image_size} not divisible by patch size {patch_size}"),
            });
        }
        Ok(Self {
            image_size,
            patch_size,
            channels,
        })
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn image_numel(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    /// For each element of a `[batch, n, C*p*p]` patch matrix, the flat index
    /// of its pixel in a `[batch, C, H, W]` image tensor. Patches are in
    /// row-major grid order; each patch vector is laid out `(c, dy, dx)`.
    pub fn patch_index(&self, batch: usize) -> Vec<usize> {
        let (g, p, c, h) = (self.grid(), self.patch_size, self.channels, self.image_size);
        let mut idx = Vec::with_capacity(batch * self.image_numel());
        for s in 0..batch {
            for gy in 0..g {
                for gx in 0..g {
                    for ch in 0..c {
                        for dy in 0..p {
                            for dx in 0..p {
                                let y = gy * p + dy;
                                let x = gx * p + dx;
                                idx.push(((s * c + ch) * h + y) * h + x);
                            }
                        }
                    }
                }
            }
        }
        idx
    }

    /// Inverse of [`PatchGeometry::patch_index`]: for each image pixel, its
    /// position in the patch matrix.
    pub fn unpatch_index(&self, batch: usize) -> Vec<usize> {
        let forward = self.patch_index(batch);
        let mut inv = vec![0; forward.len()];
        for (pos, &pix) in forward.iter().enumerate() {
            inv[pix] = pos;
        }
        inv
    }

    fn check_images(&self, shape: &[usize]) -> Result<usize, TensorError> {
        let (batch, rest) = match shape.len() {
            3 => (1, shape),
            4 => (shape[0], &shape[1..]),
            _ => {
                return Err(TensorError::Rank {
                    op: "patchify",
                    expected: 4,
                    shape: shape.to_vec(),
                })
            }
        };
        if rest != [self.channels, self.image_size, self.image_size] {
            return Err(TensorError::ShapeMismatch {
                op: "patchify",
                lhs: shape.to_vec(),
                rhs: vec![self.channels, self.image_size, self.image_size],
            });
        }
        Ok(batch)
    }
}

/// Project every p×p patch of `images` (`[C, H, W]` or `[S, C, H, W]`) with a
/// `[C*p*p, K]` weight and `[K]` bias. This is the stride-p convolution with K
/// kernels written as a matrix product. Output is `[n, K]` or `[S, n, K]`.
pub fn patchify(
    tape: &mut Tape,
    images: Var,
    weight: Var,
    bias: Var,
    geom: &PatchGeometry,
) -> Result<Var, TensorError> {
    let single = tape.shape(images).len() == 3;
    let batch = geom.check_images(tape.shape(images))?;
    let n = geom.num_patches();
    let rows = tape.gather(images, geom.patch_index(batch), &[batch * n, geom.patch_dim()])?;
    let proj = tape.matmul(rows, weight)?;
    let proj = tape.add_broadcast(proj, bias)?;
    let k = tape.shape(proj)[1];
    if single {
        Ok(proj)
    } else {
        tape.reshape(proj, &[batch, n, k])
    }
}

/// Prepend the class token and add position embeddings:
/// `out[0] = cls + pos[0]`, `out[i] = patches[i-1] + pos[i]`.
/// Accepts `[n, K]` or `[S, n, K]` patches; `pos` is `[n+1, K]`.
pub fn assemble_sequence(tape: &mut Tape, patches: Var, cls_token: Var, pos_embed: Var) -> Result<Var, TensorError> {
    let shape = tape.shape(patches).to_vec();
    let (batch, n, k) = match shape[..] {
        [n, k] => (1, n, k),
        [s, n, k] => (s, n, k),
        _ => {
            return Err(TensorError::Rank {
                op: "assemble_sequence",
                expected: 3,
                shape,
            })
        }
    };
    if tape.shape(pos_embed) != [n + 1, k] || tape.shape(cls_token) != [k] {
        return Err(TensorError::ShapeMismatch {
            op: "assemble_sequence",
            lhs: shape,
            rhs: tape.shape(pos_embed).to_vec(),
        });
    }
    let flat = tape.reshape(patches, &[batch * n, k])?;
    let cls = tape.reshape(cls_token, &[1, k])?;
    let joined = tape.concat(&[flat, cls])?;
    let cls_row = batch * n;
    let mut idx = Vec::with_capacity(batch * (n + 1) * k);
    for s in 0..batch {
        idx.extend((0..k).map(|j| cls_row * k + j));
        for i in 0..n {
            idx.extend((0..k).map(|j| (s * n + i) * k + j));
        }
    }
    let out_shape: Vec<usize> = if shape.len() == 2 {
        vec![n + 1, k]
    } else {
        vec![batch, n + 1, k]
    };
    let seq = tape.gather(joined, idx, &out_shape)?;
    tape.add_broadcast(seq, pos_embed)
}
