//! Vision-transformer backbone: pre-norm residual blocks of multi-head
//! self-attention and a GeLU MLP.
//!
//! Token sequences are `[S, T, K]` tensors (S slices, T = n + 1 tokens with
//! the class token at index 0). Each block's output is retained so the
//! decoder can sum intermediate features; attention probabilities are kept
//! only when requested.

use rand::{Rng, RngCore};

use crate::autodiff::{Tape, Var};
use crate::model::{BlockLayout, Linear, ModelState, Norm};
use crate::params::BoundParams;
use crate::patch_embed::{assemble_sequence, patchify, PatchGeometry};
use crate::tensor::{Scalar, Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

#[derive(Default)]
pub struct ForwardOptions<'r> {
    /// Keep per-block attention probabilities in [`BlockOutputs::attention`].
    pub record_attention: bool,
    /// Source of dropout masks; dropout is inactive without one.
    pub dropout_rng: Option<&'r mut dyn RngCore>,
}

impl ForwardOptions<'_> {
    pub fn recording() -> Self {
        Self {
            record_attention: true,
            dropout_rng: None,
        }
    }
}

/// Per-block token sequences `E_1..E_L`, each `[S, T, K]`, and, when
/// recorded, attention tensors of shape `[S*h, T, T]` (slice-major, then head).
#[derive(Debug, Clone)]
pub struct BlockOutputs {
    pub input: Var,
    pub blocks: Vec<Var>,
    pub attention: Vec<Var>,
    pub batch: usize,
    pub heads: usize,
}

impl BlockOutputs {
    /// Output of the last block, or the input sequence for a depth-0 encoder.
    pub fn last(&self) -> Var {
        self.blocks.last().copied().unwrap_or(self.input)
    }

    /// Attention probabilities of 1-indexed `block` for slice `s`, as
    /// `[h, T, T]`.
    pub fn attention_for(&self, tape: &Tape, block: usize, s: usize) -> Option<Tensor> {
        let a = tape.value(*self.attention.get(block.checked_sub(1)?)?);
        let t = a.shape()[1];
        let per = self.heads * t * t;
        let data = a.data()[s * per..(s + 1) * per].to_vec();
        Tensor::new(vec![self.heads, t, t], data).ok()
    }
}

/// `x · W + b` for `x` of shape `[.., in]`.
pub fn linear(tape: &mut Tape, x: Var, layer: &Linear, bound: &BoundParams) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let fan_in = *shape.last().unwrap_or(&0);
    let rows = shape.iter().product::<usize>() / fan_in.max(1);
    let flat = if shape.len() == 2 { x } else { tape.reshape(x, &[rows, fan_in])? };
    let y = tape.matmul(flat, bound.var(layer.weight))?;
    let y = tape.add_broadcast(y, bound.var(layer.bias))?;
    if shape.len() == 2 {
        return Ok(y);
    }
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = tape.shape(y)[1];
    tape.reshape(y, &out_shape)
}

pub fn layer_norm(tape: &mut Tape, x: Var, norm: &Norm, bound: &BoundParams, eps: Scalar) -> Result<Var> {
    tape.layernorm(x, bound.var(norm.gain), bound.var(norm.bias), eps)
}

/// Single-head attention `Softmax(Q Kᵀ / sqrt(d)) V` on `[n', d]` inputs.
pub fn self_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let shape = tape.shape(q).to_vec();
    if shape.len() != 2 || tape.shape(k) != shape.as_slice() || tape.shape(v) != shape.as_slice() {
        return Err(TensorError::ShapeMismatch {
            op: "self_attention",
            lhs: shape,
            rhs: tape.shape(k).to_vec(),
        });
    }
    let (n, d) = (shape[0], shape[1]);
    let q3 = tape.reshape(q, &[1, n, d])?;
    let k3 = tape.reshape(k, &[1, n, d])?;
    let v3 = tape.reshape(v, &[1, n, d])?;
    let (out, _) = batched_attention(tape, q3, k3, v3)?;
    tape.reshape(out, &[n, d])
}

/// Attention over a batch of independent heads, `[B, T, d]` each. Returns the
/// attended values and the probability matrices `[B, T, T]`.
pub fn batched_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let d = tape.shape(q)[2];
    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (d as Scalar).sqrt());
    let probs = tape.softmax_lastdim(scores)?;
    let out = tape.bmm(probs, v, false)?;
    Ok((out, probs))
}

fn dims(tape: &Tape, x: Var) -> Result<(usize, usize, usize)> {
    match *tape.shape(x) {
        [s, t, k] => Ok((s, t, k)),
        ref other => Err(TensorError::Rank {
            op: "encoder block",
            expected: 3,
            shape: other.to_vec(),
        }),
    }
}

/// Index map from a `[S*T, 3K]` fused qkv matrix to one of q, k, v laid out as
/// `[S*h, T, d]`.
fn split_heads_index(s: usize, t: usize, heads: usize, d: usize, which: usize) -> Vec<usize> {
    let k = heads * d;
    let mut idx = Vec::with_capacity(s * t * k);
    for si in 0..s {
        for h in 0..heads {
            for ti in 0..t {
                let row = (si * t + ti) * 3 * k + which * k + h * d;
                idx.extend(row..row + d);
            }
        }
    }
    idx
}

/// Index map from `[S*h, T, d]` head outputs to `[S*T, h*d]`.
fn merge_heads_index(s: usize, t: usize, heads: usize, d: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(s * t * heads * d);
    for si in 0..s {
        for ti in 0..t {
            for h in 0..heads {
                let row = ((si * heads + h) * t + ti) * d;
                idx.extend(row..row + d);
            }
        }
    }
    idx
}

fn dropout(tape: &mut Tape, x: Var, p: Scalar, rng: &mut Option<&mut dyn RngCore>) -> Var {
    let Some(rng) = rng.as_deref_mut() else { return x };
    if p <= 0.0 {
        return x;
    }
    let keep = 1.0 / (1.0 - p);
    let mask = Tensor::from_fn(tape.shape(x), |_| if rng.gen::<Scalar>() < p { 0.0 } else { keep });
    let mask = tape.constant(mask);
    tape.mul(x, mask).expect("mask shaped like input")
}

/// `x + Proj(Concat_h(SelfAttention(LN(x))))`. Returns the new sequence and
/// the `[S*h, T, T]` attention probabilities.
pub fn msa_block(
    tape: &mut Tape,
    x: Var,
    layout: &BlockLayout,
    bound: &BoundParams,
    state: &ModelState,
    opts: &mut ForwardOptions<'_>,
) -> Result<(Var, Var)> {
    let cfg = &state.config;
    let (s, t, k) = dims(tape, x)?;
    let (heads, d) = (cfg.heads, cfg.head_dim());
    let xn = layer_norm(tape, x, &layout.norm1, bound, cfg.layer_norm_eps)?;
    let qkv = linear(tape, xn, &layout.qkv, bound)?;
    let qkv = tape.reshape(qkv, &[s * t, 3 * k])?;
    let q = tape.gather(qkv, split_heads_index(s, t, heads, d, 0), &[s * heads, t, d])?;
    let kk = tape.gather(qkv, split_heads_index(s, t, heads, d, 1), &[s * heads, t, d])?;
    let v = tape.gather(qkv, split_heads_index(s, t, heads, d, 2), &[s * heads, t, d])?;
    let (attended, probs) = batched_attention(tape, q, kk, v)?;
    let merged = tape.gather(attended, merge_heads_index(s, t, heads, d), &[s * t, k])?;
    let projected = linear(tape, merged, &layout.proj, bound)?;
    let projected = tape.reshape(projected, &[s, t, k])?;
    let projected = dropout(tape, projected, cfg.dropout, &mut opts.dropout_rng);
    Ok((tape.add(x, projected)?, probs))
}

/// `x + W2 · GeLU(W1 · LN(x))`.
pub fn mlp_block(
    tape: &mut Tape,
    x: Var,
    layout: &BlockLayout,
    bound: &BoundParams,
    state: &ModelState,
    opts: &mut ForwardOptions<'_>,
) -> Result<Var> {
    let cfg = &state.config;
    let xn = layer_norm(tape, x, &layout.norm2, bound, cfg.layer_norm_eps)?;
    let hidden = linear(tape, xn, &layout.fc1, bound)?;
    let hidden = tape.gelu(hidden);
    let out = linear(tape, hidden, &layout.fc2, bound)?;
    let out = dropout(tape, out, cfg.dropout, &mut opts.dropout_rng);
    tape.add(x, out)
}

/// Patch tokens, class token and position embeddings for a `[S, C, H, W]`
/// image batch, giving a `[S, T, K]` sequence.
pub fn embed(tape: &mut Tape, images: Var, state: &ModelState, bound: &BoundParams) -> Result<Var> {
    let cfg = &state.config;
    let geom = PatchGeometry::new(cfg.image_size, cfg.patch_size, cfg.channels)?;
    let enc = &state.encoder;
    let images = if tape.shape(images).len() == 3 {
        let mut shape = vec![1];
        shape.extend_from_slice(tape.shape(images));
        tape.reshape(images, &shape)?
    } else {
        images
    };
    let patches = patchify(
        tape,
        images,
        bound.var(enc.patch.weight),
        bound.var(enc.patch.bias),
        &geom,
    )?;
    assemble_sequence(tape, patches, bound.var(enc.cls_token), bound.var(enc.pos_embed))
}

/// Run every block in order, retaining each block's output.
pub fn encode(
    tape: &mut Tape,
    seq: Var,
    state: &ModelState,
    bound: &BoundParams,
    opts: &mut ForwardOptions<'_>,
) -> Result<BlockOutputs> {
    let (s, _, _) = dims(tape, seq)?;
    let mut out = BlockOutputs {
        input: seq,
        blocks: Vec::with_capacity(state.config.depth),
        attention: Vec::new(),
        batch: s,
        heads: state.config.heads,
    };
    let mut x = seq;
    for layout in &state.encoder.blocks {
        let (after_attn, probs) = msa_block(tape, x, layout, bound, state, opts)?;
        if opts.record_attention {
            out.attention.push(probs);
        }
        x = mlp_block(tape, after_attn, layout, bound, state, opts)?;
        out.blocks.push(x);
    }
    Ok(out)
}

/// Final-norm class-token embeddings `[S, K]` from the last block.
pub fn class_tokens(tape: &mut Tape, outputs: &BlockOutputs, state: &ModelState, bound: &BoundParams) -> Result<Var> {
    let last = outputs.last();
    let (s, t, k) = dims(tape, last)?;
    let idx: Vec<usize> = (0..s).flat_map(|si| (si * t * k)..(si * t * k + k)).collect();
    let cls = tape.gather(last, idx, &[s, k])?;
    layer_norm(tape, cls, &state.encoder.norm, bound, state.config.layer_norm_eps)
}
