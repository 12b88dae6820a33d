//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and the handles of
//! its inputs. [`Tape::backward`] walks the nodes in reverse creation order,
//! which is a valid reverse topological order because inputs always precede
//! their consumers. Intermediate adjoints are scratch state of a single
//! backward call; only leaves that require gradients keep an accumulated
//! `grad` buffer, so repeated calls without [`Tape::zero_grad`] accumulate.

use crate::tensor::{Scalar, Tensor, TensorError};

/// Tanh approximation of GeLU: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
/// This is the single GeLU form used throughout the crate.
pub const GELU_TANH_COEFF: Scalar = 0.044_715;
const SQRT_2_OVER_PI: Scalar = 0.797_884_560_802_865_4;

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, Scalar),
    AddBroadcast(Var, Var),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Softmax(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<Scalar>,
        rstd: Vec<Scalar>,
    },
    Abs(Var),
    Sum(Var),
    Reshape(Var),
    Gather { src: Var, index: Vec<usize> },
    Concat(Vec<Var>),
    SegmentMean { x: Var, lengths: Vec<usize> },
    SegmentMax { x: Var, argmax: Vec<usize> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<Scalar> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Dynamic computation graph recorded during a forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a tensor as a leaf. Leaves with `requires_grad` receive a
    /// gradient buffer on [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| Tensor::zeros(value.shape()));
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, `None` for non-leaves and constants.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(Scalar, Scalar) -> Scalar) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shape preserved")
    }

    fn map(&self, a: Var, f: impl Fn(Scalar) -> Scalar) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
            .expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: Scalar) -> Var {
        let out = self.map(a, |x| x * factor);
        self.push(out, Op::Scale(a, factor), &[a])
    }

    /// `a + b` where `b`'s shape equals the trailing dimensions of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(TensorError::ShapeMismatch {
                op: "add_broadcast",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let bv = self.value(b).data();
        let inner = bv.len();
        let av = self.value(a);
        let data = av
            .data()
            .chunks(inner)
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| x + y))
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddBroadcast(a, b), &[a, b]))
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
        );
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]` (or `[B, n, k]` when
    /// `transpose_b`).
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            op: "bmm",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(mismatch());
        }
        let mut out = vec![0.0; batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                false,
                &bv[i * k * n..(i + 1) * k * n],
                transpose_b,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let out = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push(out, Op::BatchMatMul { a, b, transpose_b }, &[a, b]))
    }

    /// Softmax over the last dimension, stabilised by max subtraction.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let last = *t.shape().last().ok_or(TensorError::Rank {
            op: "softmax_lastdim",
            expected: 1,
            shape: vec![],
        })?;
        if t.data().iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: "softmax_lastdim" });
        }
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(last) {
            let max = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            row.iter_mut().for_each(|x| *x /= total);
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Softmax(a), &[a]))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.map(a, gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    /// Layer normalisation over the last dimension followed by a per-feature
    /// affine transform.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: Scalar) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let dim = *shape.last().ok_or(TensorError::Rank {
            op: "layernorm",
            expected: 1,
            shape: vec![],
        })?;
        for p in [gain, bias] {
            if self.shape(p) != [dim] {
                return Err(TensorError::ShapeMismatch {
                    op: "layernorm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.len() / dim;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * dim..(r + 1) * dim];
            let mean = row.iter().sum::<Scalar>() / dim as Scalar;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Scalar>() / dim as Scalar;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..dim {
                let h = (row[j] - mean) * rs;
                xhat[r * dim + j] = h;
                out[r * dim + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Elementwise absolute value; the subgradient at zero is zero.
    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.map(a, Scalar::abs);
        self.push(out, Op::Abs(a), &[a])
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// `out[i] = src[index[i]]` over the flattened buffers. Covers
    /// permutations, slicing and tiling.
    pub fn gather(&mut self, src: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let sv = self.value(src).data();
        if index.len() != shape.iter().product::<usize>() {
            return Err(TensorError::BufferLength {
                shape: shape.to_vec(),
                expected: shape.iter().product(),
                actual: index.len(),
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= sv.len()) {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: format!("index {bad} out of range for {} elements", sv.len()),
            });
        }
        let data = index.iter().map(|&i| sv[i]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(out, Op::Gather { src, index }, &[src]))
    }

    /// Concatenate along the leading axis; trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "nothing to concatenate".into(),
        })?;
        let tail = self.shape(first).get(1..).unwrap_or(&[]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    /// Mean over consecutive row groups of a `[rows, k]` matrix.
    pub fn segment_mean(&mut self, x: Var, lengths: &[usize]) -> Result<Var> {
        let (rows, k) = self.segment_dims("segment_mean", x, lengths)?;
        debug_assert_eq!(rows, lengths.iter().sum::<usize>());
        let xv = self.value(x).data();
        let mut out = vec![0.0; lengths.len() * k];
        let mut r = 0;
        for (g, &len) in lengths.iter().enumerate() {
            for _ in 0..len {
                for j in 0..k {
                    out[g * k + j] += xv[r * k + j];
                }
                r += 1;
            }
            for j in 0..k {
                out[g * k + j] /= len as Scalar;
            }
        }
        let out = Tensor::new(vec![lengths.len(), k], out)?;
        Ok(self.push(
            out,
            Op::SegmentMean {
                x,
                lengths: lengths.to_vec(),
            },
            &[x],
        ))
    }

    /// Max over consecutive row groups of a `[rows, k]` matrix.
    pub fn segment_max(&mut self, x: Var, lengths: &[usize]) -> Result<Var> {
        let (_, k) = self.segment_dims("segment_max", x, lengths)?;
        let xv = self.value(x).data();
        let mut out = vec![Scalar::NEG_INFINITY; lengths.len() * k];
        let mut argmax = vec![0; lengths.len() * k];
        let mut r = 0;
        for (g, &len) in lengths.iter().enumerate() {
            for _ in 0..len {
                for j in 0..k {
                    if xv[r * k + j] > out[g * k + j] {
                        out[g * k + j] = xv[r * k + j];
                        argmax[g * k + j] = r * k + j;
                    }
                }
                r += 1;
            }
        }
        let out = Tensor::new(vec![lengths.len(), k], out)?;
        Ok(self.push(out, Op::SegmentMax { x, argmax }, &[x]))
    }

    fn segment_dims(&self, op: &'static str, x: Var, lengths: &[usize]) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(TensorError::Rank {
                op,
                expected: 2,
                shape: s.to_vec(),
            });
        }
        if lengths.iter().any(|&l| l == 0) || lengths.iter().sum::<usize>() != s[0] {
            return Err(TensorError::Invalid {
                op,
                msg: format!("segment lengths {lengths:?} do not tile {} rows", s[0]),
            });
        }
        Ok((s[0], s[1]))
    }

    /// Mean cross-entropy of `[batch, classes]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: format!("logits {s:?} vs {} labels", labels.len()),
            });
        }
        let classes = s[1];
        if labels.iter().any(|&l| l >= classes) {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: "label out of range".into(),
            });
        }
        let lv = self.value(logits).data();
        if lv.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: "cross_entropy" });
        }
        let mut probs = vec![0.0; lv.len()];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &lv[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<Scalar>().ln();
            loss += lse - row[label];
            for j in 0..classes {
                probs[r * classes + j] = (row[j] - lse).exp();
            }
        }
        let out = Tensor::scalar(loss / labels.len() as Scalar);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Propagate adjoints from a scalar `loss` into every reachable leaf that
    /// requires gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        let mut adj: Vec<Option<Vec<Scalar>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let grad = self.nodes[i].grad.as_mut().expect("tracked leaf has grad");
                axpy(grad.data_mut(), &g, 1.0);
                continue;
            }
            let node = &self.nodes[i];
            let mut acc = Accumulator {
                nodes: &self.nodes,
                adj: &mut adj,
            };
            match &node.op {
                Op::Leaf => unreachable!("leaves handled above"),
                Op::Add(a, b) => {
                    acc.add(*a, |d| axpy(d, &g, 1.0));
                    acc.add(*b, |d| axpy(d, &g, 1.0));
                }
                Op::Sub(a, b) => {
                    acc.add(*a, |d| axpy(d, &g, 1.0));
                    acc.add(*b, |d| axpy(d, &g, -1.0));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (acc.val(*a), acc.val(*b));
                    acc.add(*a, |d| {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(bv) {
                            *d += g * y;
                        }
                    });
                    acc.add(*b, |d| {
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(av) {
                            *d += g * x;
                        }
                    });
                }
                Op::Scale(a, c) => acc.add(*a, |d| axpy(d, &g, *c)),
                Op::AddBroadcast(a, b) => {
                    acc.add(*a, |d| axpy(d, &g, 1.0));
                    let inner = acc.val(*b).len();
                    acc.add(*b, |d| {
                        for row in g.chunks(inner) {
                            axpy(d, row, 1.0);
                        }
                    });
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (acc.shape(*a), acc.shape(*b));
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let (av, bv) = (acc.val(*a), acc.val(*b));
                    // dA = dC B^T, dB = A^T dC
                    acc.add(*a, |d| gemm_acc(m, n, k, &g, false, bv, true, d));
                    acc.add(*b, |d| gemm_acc(k, m, n, av, true, &g, false, d));
                }
                Op::BatchMatMul { a, b, transpose_b } => {
                    let (sa, sb) = (acc.shape(*a), acc.shape(*b));
                    let (batch, m, k) = (sa[0], sa[1], sa[2]);
                    let n = if *transpose_b { sb[1] } else { sb[2] };
                    let (av, bv) = (acc.val(*a), acc.val(*b));
                    let tb = *transpose_b;
                    acc.add(*a, |d| {
                        for i in 0..batch {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let bi = &bv[i * k * n..(i + 1) * k * n];
                            // dA = dC B^T (B stored [k,n]) or dC B (B stored [n,k])
                            gemm_acc(m, n, k, gi, false, bi, !tb, &mut d[i * m * k..(i + 1) * m * k]);
                        }
                    });
                    acc.add(*b, |d| {
                        for i in 0..batch {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let ai = &av[i * m * k..(i + 1) * m * k];
                            let di = &mut d[i * k * n..(i + 1) * k * n];
                            if tb {
                                // B stored [n,k]: dB = dC^T A
                                gemm_acc(n, m, k, gi, true, ai, false, di);
                            } else {
                                gemm_acc(k, m, n, ai, true, gi, false, di);
                            }
                        }
                    });
                }
                Op::Softmax(a) => {
                    let y = node.value.data();
                    let last = *node.value.shape().last().unwrap();
                    acc.add(*a, |d| {
                        for ((dr, gr), yr) in d.chunks_mut(last).zip(g.chunks(last)).zip(y.chunks(last)) {
                            let dot: Scalar = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                            for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                                *d += y * (g - dot);
                            }
                        }
                    });
                }
                Op::Gelu(a) => {
                    let xv = acc.val(*a);
                    acc.add(*a, |d| {
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(xv) {
                            *d += g * gelu_grad(*x);
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let dim = acc.val(*gain).len();
                    let gv = acc.val(*gain);
                    acc.add(*x, |d| {
                        let mut dxhat = vec![0.0; dim];
                        for (r, rs) in rstd.iter().enumerate() {
                            let gr = &g[r * dim..(r + 1) * dim];
                            let hr = &xhat[r * dim..(r + 1) * dim];
                            let mut mean_d = 0.0;
                            let mut mean_dh = 0.0;
                            for j in 0..dim {
                                dxhat[j] = gr[j] * gv[j];
                                mean_d += dxhat[j];
                                mean_dh += dxhat[j] * hr[j];
                            }
                            mean_d /= dim as Scalar;
                            mean_dh /= dim as Scalar;
                            for j in 0..dim {
                                d[r * dim + j] += rs * (dxhat[j] - mean_d - hr[j] * mean_dh);
                            }
                        }
                    });
                    acc.add(*gain, |d| {
                        for (gr, hr) in g.chunks(dim).zip(xhat.chunks(dim)) {
                            for j in 0..dim {
                                d[j] += gr[j] * hr[j];
                            }
                        }
                    });
                    acc.add(*bias, |d| {
                        for gr in g.chunks(dim) {
                            axpy(d, gr, 1.0);
                        }
                    });
                }
                Op::Abs(a) => {
                    let xv = acc.val(*a);
                    acc.add(*a, |d| {
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(xv) {
                            let s = if *x > 0.0 {
                                1.0
                            } else if *x < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            *d += g * s;
                        }
                    });
                }
                Op::Sum(a) => acc.add(*a, |d| d.iter_mut().for_each(|d| *d += g[0])),
                Op::Reshape(a) => acc.add(*a, |d| axpy(d, &g, 1.0)),
                Op::Gather { src, index } => acc.add(*src, |d| {
                    for (&i, gv) in index.iter().zip(&g) {
                        d[i] += gv;
                    }
                }),
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = acc.val(p).len();
                        acc.add(p, |d| axpy(d, &g[offset..offset + len], 1.0));
                        offset += len;
                    }
                }
                Op::SegmentMean { x, lengths } => {
                    let k = g.len() / lengths.len();
                    acc.add(*x, |d| {
                        let mut r = 0;
                        for (gi, &len) in lengths.iter().enumerate() {
                            let w = 1.0 / len as Scalar;
                            for _ in 0..len {
                                for j in 0..k {
                                    d[r * k + j] += w * g[gi * k + j];
                                }
                                r += 1;
                            }
                        }
                    });
                }
                Op::SegmentMax { x, argmax } => acc.add(*x, |d| {
                    for (&i, gv) in argmax.iter().zip(&g) {
                        d[i] += gv;
                    }
                }),
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let classes = probs.len() / labels.len();
                    let w = g[0] / labels.len() as Scalar;
                    acc.add(*logits, |d| {
                        for (r, &label) in labels.iter().enumerate() {
                            for j in 0..classes {
                                let onehot = if j == label { 1.0 } else { 0.0 };
                                d[r * classes + j] += w * (probs[r * classes + j] - onehot);
                            }
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

struct Accumulator<'a> {
    nodes: &'a [Node],
    adj: &'a mut Vec<Option<Vec<Scalar>>>,
}

impl<'a> Accumulator<'a> {
    fn val(&self, v: Var) -> &'a [Scalar] {
        self.nodes[v.0].value.data()
    }

    fn shape(&self, v: Var) -> &'a [usize] {
        self.nodes[v.0].value.shape()
    }

    fn add(&mut self, v: Var, f: impl FnOnce(&mut [Scalar])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = self.adj[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }
}

fn axpy(dst: &mut [Scalar], src: &[Scalar], alpha: Scalar) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

pub fn gelu(x: Scalar) -> Scalar {
    let u = SQRT_2_OVER_PI * (x + GELU_TANH_COEFF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: Scalar) -> Scalar {
    let u = SQRT_2_OVER_PI * (x + GELU_TANH_COEFF * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_TANH_COEFF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// `c = op(a) · op(b)` where `op(a)` is `[m, k]` and `op(b)` is `[k, n]`.
/// Transposed operands are stored in their untransposed row-major layout.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[Scalar], ta: bool, b: &[Scalar], tb: bool, c: &mut [Scalar]) {
    c.iter_mut().for_each(|x| *x = 0.0);
    gemm_acc(m, k, n, a, ta, b, tb, c);
}

/// `c += op(a) · op(b)`.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(m: usize, k: usize, n: usize, a: &[Scalar], ta: bool, b: &[Scalar], tb: bool, c: &mut [Scalar]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three buffers, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
