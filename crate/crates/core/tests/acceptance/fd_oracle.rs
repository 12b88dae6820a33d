//! Tape-free reference forward pass of encoder + decoder + masked ℓ1 loss for
//! one image, used as an independent finite-difference oracle.
//!
//! A parameter perturbation first changes the output of the layer that owns
//! the parameter, by an amount computable from cached unperturbed inputs.
//! Each perturbed state is therefore resumed from that layer, and many states
//! are pushed through the remaining layers as one batch.

use std::collections::HashMap;

use sbssl::model::ModelState;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub enum Stage {
    N1,
    Qkv,
    Proj,
    N2,
    Fc1,
    Fc2,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Point {
    Tok,
    Seq,
    Block(usize, Stage),
    Dec1,
    Dec2,
    Pix,
    /// Parameter does not reach the loss.
    Unused,
}

struct BlockCache {
    x_in: Vec<f64>,
    xhat1: Vec<f64>,
    n1: Vec<f64>,
    qkv: Vec<f64>,
    merged: Vec<f64>,
    proj: Vec<f64>,
    x2: Vec<f64>,
    xhat2: Vec<f64>,
    n2: Vec<f64>,
    h_pre: Vec<f64>,
    h_act: Vec<f64>,
    m: Vec<f64>,
    out: Vec<f64>,
}

pub struct Reference {
    p: HashMap<String, Vec<f64>>,
    k: usize,
    t: usize,
    n: usize,
    heads: usize,
    hidden: usize,
    patch_dim: usize,
    patch_area: usize,
    eps: f64,
    skip: Vec<usize>,
    /// Target and mask in patch-matrix layout `[n, patch_dim]`.
    target: Vec<f64>,
    mask: Vec<f64>,
    patches: Vec<f64>,
    tok: Vec<f64>,
    seq: Vec<f64>,
    blocks: Vec<BlockCache>,
    s_sum: Vec<f64>,
    u_pre: Vec<f64>,
    u_act: Vec<f64>,
    v: Vec<f64>,
    pix: Vec<f64>,
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// `x[rows, din] · w[din, dout] + b`.
fn mm(x: &[f64], rows: usize, din: usize, w: &[f64], dout: usize, b: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; rows * dout];
    if let Some(b) = b {
        for r in 0..rows {
            out[r * dout..(r + 1) * dout].copy_from_slice(b);
        }
    }
    unsafe {
        matrixmultiply::dgemm(
            rows,
            din,
            dout,
            1.0,
            x.as_ptr(),
            din as isize,
            1,
            w.as_ptr(),
            dout as isize,
            1,
            if b.is_some() { 1.0 } else { 0.0 },
            out.as_mut_ptr(),
            dout as isize,
            1,
        );
    }
    out
}

/// Returns `(xhat, y)`.
fn layer_norm(x: &[f64], dim: usize, g: &[f64], b: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for (r, row) in x.chunks(dim).enumerate() {
        let mean = row.iter().sum::<f64>() / dim as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / dim as f64;
        let rs = 1.0 / (var + eps).sqrt();
        for j in 0..dim {
            let h = (row[j] - mean) * rs;
            xhat[r * dim + j] = h;
            y[r * dim + j] = h * g[j] + b[j];
        }
    }
    (xhat, y)
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn repeat(x: &[f64], times: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() * times);
    for _ in 0..times {
        out.extend_from_slice(x);
    }
    out
}

impl Reference {
    /// `image` is `[C, H, W]` input (after corruption), `target` the
    /// reconstruction target and `mask` the pixel mask, same shape.
    pub fn new(model: &ModelState, skip: &[usize], image: &[f64], target: &[f64], mask: &[f64]) -> Self {
        let cfg = &model.config;
        let p: HashMap<String, Vec<f64>> = model
            .params
            .iter()
            .map(|q| (q.name.clone(), q.value.data().to_vec()))
            .collect();
        let (ps, size, c) = (cfg.patch_size, cfg.image_size, cfg.channels);
        let g = size / ps;
        let n = g * g;
        let patch_dim = c * ps * ps;
        let to_patches = |img: &[f64]| {
            let mut out = Vec::with_capacity(n * patch_dim);
            for gy in 0..g {
                for gx in 0..g {
                    for ch in 0..c {
                        for dy in 0..ps {
                            for dx in 0..ps {
                                out.push(img[(ch * size + gy * ps + dy) * size + gx * ps + dx]);
                            }
                        }
                    }
                }
            }
            out
        };
        let mut r = Reference {
            k: cfg.embed_dim,
            t: n + 1,
            n,
            heads: cfg.heads,
            hidden: cfg.embed_dim * cfg.mlp_ratio,
            patch_dim,
            patch_area: ps * ps,
            eps: cfg.layer_norm_eps,
            skip: skip.to_vec(),
            target: to_patches(target),
            mask: to_patches(mask),
            patches: to_patches(image),
            p,
            tok: vec![],
            seq: vec![],
            blocks: vec![],
            s_sum: vec![],
            u_pre: vec![],
            u_act: vec![],
            v: vec![],
            pix: vec![],
        };
        r.build_cache(cfg.depth);
        r
    }

    fn w(&self, name: &str) -> &[f64] {
        self.p.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    fn build_cache(&mut self, depth: usize) {
        let (k, t, n) = (self.k, self.t, self.n);
        self.tok = mm(
            &self.patches,
            n,
            self.patch_dim,
            self.w("encoder.patch_embed.weight"),
            k,
            Some(self.w("encoder.patch_embed.bias")),
        );
        self.seq = self.seq_from_tok(&self.tok);
        let mut x = self.seq.clone();
        for j in 0..depth {
            let pre = format!("encoder.blocks.{j}");
            let (xhat1, n1) = layer_norm(&x, k, self.w(&format!("{pre}.norm1.gain")), self.w(&format!("{pre}.norm1.bias")), self.eps);
            let qkv = mm(&n1, t, k, self.w(&format!("{pre}.attn.qkv.weight")), 3 * k, Some(self.w(&format!("{pre}.attn.qkv.bias"))));
            let merged = self.attention(&qkv, 1);
            let proj = mm(&merged, t, k, self.w(&format!("{pre}.attn.proj.weight")), k, Some(self.w(&format!("{pre}.attn.proj.bias"))));
            let x2 = add(&x, &proj);
            let (xhat2, n2) = layer_norm(&x2, k, self.w(&format!("{pre}.norm2.gain")), self.w(&format!("{pre}.norm2.bias")), self.eps);
            let h_pre = mm(&n2, t, k, self.w(&format!("{pre}.mlp.fc1.weight")), self.hidden, Some(self.w(&format!("{pre}.mlp.fc1.bias"))));
            let h_act: Vec<f64> = h_pre.iter().map(|&v| gelu(v)).collect();
            let m = mm(&h_act, t, self.hidden, self.w(&format!("{pre}.mlp.fc2.weight")), k, Some(self.w(&format!("{pre}.mlp.fc2.bias"))));
            let out = add(&x2, &m);
            self.blocks.push(BlockCache {
                x_in: x,
                xhat1,
                n1,
                qkv,
                merged,
                proj,
                x2,
                xhat2,
                n2,
                h_pre,
                h_act,
                m,
                out: out.clone(),
            });
            x = out;
        }
        let outs: Vec<Vec<f64>> = self.blocks.iter().map(|b| b.out.clone()).collect();
        self.s_sum = self.skip_sum(&outs, 1);
        self.u_pre = mm(&self.s_sum, n, k, self.w("decoder.pointwise1.weight"), k, Some(self.w("decoder.pointwise1.bias")));
        self.u_act = self.u_pre.iter().map(|&v| gelu(v)).collect();
        self.v = mm(&self.u_act, n, k, self.w("decoder.pointwise2.weight"), k, Some(self.w("decoder.pointwise2.bias")));
        self.pix = self.deconv(&self.v, 1);
    }

    fn seq_from_tok(&self, tok: &[f64]) -> Vec<f64> {
        let (k, n) = (self.k, self.n);
        let states = tok.len() / (n * k);
        let (cls, pos) = (self.w("encoder.cls_token"), self.w("encoder.pos_embed"));
        let mut out = Vec::with_capacity(states * self.t * k);
        for s in 0..states {
            out.extend(cls.iter().zip(&pos[..k]).map(|(a, b)| a + b));
            let base = s * n * k;
            out.extend(tok[base..base + n * k].iter().zip(&pos[k..]).map(|(a, b)| a + b));
        }
        out
    }

    /// Multi-head attention over `states` independent `[T, 3K]` qkv blocks.
    fn attention(&self, qkv: &[f64], states: usize) -> Vec<f64> {
        let (t, k, h) = (self.t, self.k, self.heads);
        let d = k / h;
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = vec![0.0; states * t * k];
        let mut row = vec![0.0; t];
        for s in 0..states {
            let base = s * t * 3 * k;
            for head in 0..h {
                for i in 0..t {
                    let q = &qkv[base + i * 3 * k + head * d..][..d];
                    let mut max = f64::NEG_INFINITY;
                    for (j, r) in row.iter_mut().enumerate() {
                        let kk = &qkv[base + j * 3 * k + k + head * d..][..d];
                        *r = q.iter().zip(kk).map(|(a, b)| a * b).sum::<f64>() * scale;
                        max = max.max(*r);
                    }
                    let mut z = 0.0;
                    for r in row.iter_mut() {
                        *r = (*r - max).exp();
                        z += *r;
                    }
                    let o = &mut out[(s * t + i) * k + head * d..][..d];
                    for (j, r) in row.iter().enumerate() {
                        let vv = &qkv[base + j * 3 * k + 2 * k + head * d..][..d];
                        for (oo, x) in o.iter_mut().zip(vv) {
                            *oo += r / z * x;
                        }
                    }
                }
            }
        }
        out
    }

    /// Patch rows of `Σ_{b∈B} E_b`, each `outs[b-1]` holding `states` sequences.
    fn skip_sum(&self, outs: &[Vec<f64>], states: usize) -> Vec<f64> {
        let (k, t, n) = (self.k, self.t, self.n);
        let mut s_sum = vec![0.0; states * n * k];
        for &b in &self.skip {
            let e = &outs[b - 1];
            for s in 0..states {
                for i in 0..n {
                    let src = &e[(s * t + 1 + i) * k..][..k];
                    let dst = &mut s_sum[(s * n + i) * k..][..k];
                    for (d, x) in dst.iter_mut().zip(src) {
                        *d += x;
                    }
                }
            }
        }
        s_sum
    }

    fn deconv(&self, v: &[f64], states: usize) -> Vec<f64> {
        let rows = states * self.n;
        let mut pix = mm(v, rows, self.k, self.w("decoder.deconv.weight"), self.patch_dim, None);
        let bias = self.w("decoder.deconv.bias");
        for r in 0..rows {
            for (q, px) in pix[r * self.patch_dim..(r + 1) * self.patch_dim].iter_mut().enumerate() {
                *px += bias[q / self.patch_area];
            }
        }
        pix
    }

    fn losses(&self, pix: &[f64], states: usize) -> Vec<f64> {
        let per = self.n * self.patch_dim;
        let count = self.mask.iter().sum::<f64>().max(1.0);
        (0..states)
            .map(|s| {
                let sum: f64 = pix[s * per..(s + 1) * per]
                    .iter()
                    .zip(&self.target)
                    .zip(&self.mask)
                    .map(|((r, x), m)| m * (r - x).abs())
                    .sum();
                sum / count
            })
            .collect()
    }

    /// Smallest `|recon - target|` over masked pixels of `states` reconstructions.
    fn min_masked_residual(&self, pix: &[f64], states: usize) -> f64 {
        let per = self.n * self.patch_dim;
        (0..states)
            .flat_map(|s| {
                pix[s * per..(s + 1) * per]
                    .iter()
                    .zip(&self.target)
                    .zip(&self.mask)
                    .filter(|(_, m)| **m > 0.0)
                    .map(|((r, x), _)| (r - x).abs())
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Continue block `j` (0-indexed) from `start` with per-state value `cur`.
    fn run_block(&self, j: usize, start: Stage, mut cur: Vec<f64>, x_in: &[f64], states: usize) -> Vec<f64> {
        let (k, t) = (self.k, self.t);
        let rows = states * t;
        let pre = format!("encoder.blocks.{j}");
        let c = &self.blocks[j];
        if start == Stage::N1 {
            cur = mm(&cur, rows, k, self.w(&format!("{pre}.attn.qkv.weight")), 3 * k, Some(self.w(&format!("{pre}.attn.qkv.bias"))));
        }
        if start <= Stage::Qkv {
            let merged = self.attention(&cur, states);
            cur = mm(&merged, rows, k, self.w(&format!("{pre}.attn.proj.weight")), k, Some(self.w(&format!("{pre}.attn.proj.bias"))));
        }
        let x2 = if start <= Stage::Proj { add(x_in, &cur) } else { repeat(&c.x2, states) };
        if start <= Stage::Proj {
            cur = layer_norm(&x2, k, self.w(&format!("{pre}.norm2.gain")), self.w(&format!("{pre}.norm2.bias")), self.eps).1;
        }
        if start <= Stage::N2 {
            cur = mm(&cur, rows, k, self.w(&format!("{pre}.mlp.fc1.weight")), self.hidden, Some(self.w(&format!("{pre}.mlp.fc1.bias"))));
        }
        if start <= Stage::Fc1 {
            let act: Vec<f64> = cur.iter().map(|&v| gelu(v)).collect();
            cur = mm(&act, rows, self.hidden, self.w(&format!("{pre}.mlp.fc2.weight")), k, Some(self.w(&format!("{pre}.mlp.fc2.bias"))));
        }
        add(&x2, &cur)
    }

    /// Losses of `states` perturbed copies whose value at `point` is `cur`.
    /// Also returns the smallest masked residual seen.
    pub fn resume(&self, point: Point, cur: Vec<f64>, states: usize) -> (Vec<f64>, f64) {
        let (k, n) = (self.k, self.n);
        let depth = self.blocks.len();
        let mut dec_point = point;
        let mut cur = cur;
        let mut first_block = depth;
        let mut outs: Vec<Vec<f64>> = self.blocks.iter().map(|b| repeat(&b.out, states)).collect();
        let mut start_stage = Stage::N1;
        let mut x = Vec::new();
        match point {
            Point::Tok => {
                x = self.seq_from_tok(&cur);
                first_block = 0;
            }
            Point::Seq => {
                x = cur.clone();
                first_block = 0;
            }
            Point::Block(j, s) => {
                first_block = j;
                start_stage = s;
                x = repeat(&self.blocks[j].x_in, states);
            }
            _ => {}
        }
        if first_block < depth {
            for j in first_block..depth {
                let out = if j == first_block && matches!(point, Point::Block(..)) {
                    self.run_block(j, start_stage, std::mem::take(&mut cur), &x, states)
                } else {
                    let pre = format!("encoder.blocks.{j}");
                    let n1 = layer_norm(&x, k, self.w(&format!("{pre}.norm1.gain")), self.w(&format!("{pre}.norm1.bias")), self.eps).1;
                    self.run_block(j, Stage::N1, n1, &x, states)
                };
                outs[j] = out.clone();
                x = out;
            }
            let s_sum = self.skip_sum(&outs, states);
            cur = mm(&s_sum, states * n, k, self.w("decoder.pointwise1.weight"), k, Some(self.w("decoder.pointwise1.bias")));
            dec_point = Point::Dec1;
        }
        if dec_point == Point::Dec1 {
            let act: Vec<f64> = cur.iter().map(|&v| gelu(v)).collect();
            cur = mm(&act, states * n, k, self.w("decoder.pointwise2.weight"), k, Some(self.w("decoder.pointwise2.bias")));
            dec_point = Point::Dec2;
        }
        if dec_point == Point::Dec2 {
            cur = self.deconv(&cur, states);
        }
        let losses = self.losses(&cur, states);
        (losses, self.min_masked_residual(&cur, states))
    }

    pub fn base_loss(&self) -> f64 {
        self.losses(&self.pix, 1)[0]
    }

    /// Injection point of a parameter and, for entry `e`, the sparse change
    /// `(index, coefficient)` of that point's value per unit perturbation.
    pub fn sensitivity(&self, name: &str, e: usize) -> (Point, Vec<(usize, f64)>) {
        let (k, t, n) = (self.k, self.t, self.n);
        let linear = |input: &[f64], rows: usize, din: usize, dout: usize, point: Point| {
            let (i, c) = (e / dout, e % dout);
            (point, (0..rows).map(|r| (r * dout + c, input[r * din + i])).collect())
        };
        let bias = |rows: usize, dout: usize, point: Point| (point, (0..rows).map(|r| (r * dout + e, 1.0)).collect());
        let gain = |xhat: &[f64], rows: usize, point: Point| (point, (0..rows).map(|r| (r * k + e, xhat[r * k + e])).collect());

        if let Some(rest) = name.strip_prefix("encoder.blocks.") {
            let (j, field) = rest.split_once('.').unwrap();
            let j: usize = j.parse().unwrap();
            let c = &self.blocks[j];
            let at = |s| Point::Block(j, s);
            return match field {
                "norm1.gain" => gain(&c.xhat1, t, at(Stage::N1)),
                "norm1.bias" => bias(t, k, at(Stage::N1)),
                "attn.qkv.weight" => linear(&c.n1, t, k, 3 * k, at(Stage::Qkv)),
                "attn.qkv.bias" => bias(t, 3 * k, at(Stage::Qkv)),
                "attn.proj.weight" => linear(&c.merged, t, k, k, at(Stage::Proj)),
                "attn.proj.bias" => bias(t, k, at(Stage::Proj)),
                "norm2.gain" => gain(&c.xhat2, t, at(Stage::N2)),
                "norm2.bias" => bias(t, k, at(Stage::N2)),
                "mlp.fc1.weight" => linear(&c.n2, t, k, self.hidden, at(Stage::Fc1)),
                "mlp.fc1.bias" => bias(t, self.hidden, at(Stage::Fc1)),
                "mlp.fc2.weight" => linear(&c.h_act, t, self.hidden, k, at(Stage::Fc2)),
                "mlp.fc2.bias" => bias(t, k, at(Stage::Fc2)),
                other => panic!("unknown block parameter {other}"),
            };
        }
        match name {
            "encoder.patch_embed.weight" => linear(&self.patches, n, self.patch_dim, k, Point::Tok),
            "encoder.patch_embed.bias" => bias(n, k, Point::Tok),
            "encoder.cls_token" => (Point::Seq, vec![(e, 1.0)]),
            "encoder.pos_embed" => (Point::Seq, vec![(e, 1.0)]),
            "encoder.norm.gain" | "encoder.norm.bias" => (Point::Unused, vec![]),
            "decoder.pointwise1.weight" => linear(&self.s_sum, n, k, k, Point::Dec1),
            "decoder.pointwise1.bias" => bias(n, k, Point::Dec1),
            "decoder.pointwise2.weight" => linear(&self.u_act, n, k, k, Point::Dec2),
            "decoder.pointwise2.bias" => bias(n, k, Point::Dec2),
            "decoder.deconv.weight" => linear(&self.v, n, k, self.patch_dim, Point::Pix),
            "decoder.deconv.bias" => (
                Point::Pix,
                (0..n)
                    .flat_map(|r| (e * self.patch_area..(e + 1) * self.patch_area).map(move |q| (r * self.patch_dim + q, 1.0)))
                    .map(|(i, c)| (i, c))
                    .collect(),
            ),
            other => panic!("unknown parameter {other}"),
        }
    }

    fn base_value(&self, point: Point) -> &[f64] {
        match point {
            Point::Tok => &self.tok,
            Point::Seq => &self.seq,
            Point::Block(j, s) => {
                let c = &self.blocks[j];
                match s {
                    Stage::N1 => &c.n1,
                    Stage::Qkv => &c.qkv,
                    Stage::Proj => &c.proj,
                    Stage::N2 => &c.n2,
                    Stage::Fc1 => &c.h_pre,
                    Stage::Fc2 => &c.m,
                }
            }
            Point::Dec1 => &self.u_pre,
            Point::Dec2 => &self.v,
            Point::Pix => &self.pix,
            Point::Unused => &[],
        }
    }

    /// Five-point central-difference derivative of the loss with respect to
    /// each of `entries` of parameter `name`, step `h`. Returns the
    /// derivatives and the smallest masked residual over all stencil states.
    pub fn derivatives(&self, name: &str, entries: &[usize], h: f64) -> (Vec<f64>, f64) {
        const OFFSETS: [f64; 4] = [-2.0, -1.0, 1.0, 2.0];
        const WEIGHTS: [f64; 4] = [1.0, -8.0, 8.0, -1.0];
        let (point, _) = self.sensitivity(name, 0);
        if point == Point::Unused {
            return (vec![0.0; entries.len()], f64::INFINITY);
        }
        let base = self.base_value(point);
        let states = entries.len() * OFFSETS.len();
        let mut cur = Vec::with_capacity(states * base.len());
        for &e in entries {
            let (_, delta) = self.sensitivity(name, e);
            for off in OFFSETS {
                let start = cur.len();
                cur.extend_from_slice(base);
                for &(i, c) in &delta {
                    cur[start + i] += off * h * c;
                }
            }
        }
        let (losses, min_res) = self.resume(point, cur, states);
        let derivs = losses
            .chunks(OFFSETS.len())
            .map(|l| l.iter().zip(WEIGHTS).map(|(a, w)| a * w).sum::<f64>() / (12.0 * h))
            .collect();
        (derivs, min_res)
    }

    pub fn masked_pixels(&self) -> usize {
        self.mask.iter().filter(|&&m| m > 0.0).count()
    }

    pub fn base_reconstruction(&self) -> &[f64] {
        &self.pix
    }

    /// Map a patch-layout index back to the `[C, H, W]` pixel index.
    pub fn patch_to_pixel(&self, idx: usize, size: usize, ps: usize) -> usize {
        let g = size / ps;
        let (row, q) = (idx / self.patch_dim, idx % self.patch_dim);
        let (gy, gx) = (row / g, row % g);
        let (ch, rem) = (q / self.patch_area, q % self.patch_area);
        let (dy, dx) = (rem / ps, rem % ps);
        (ch * size + gy * ps + dy) * size + gx * ps + dx
    }
}
