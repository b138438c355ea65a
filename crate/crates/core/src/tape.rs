//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Feature maps are
//! `[C, H, W]` (one sample per tape); batched matrix products use
//! `[B, rows, cols]`. [`Tape::backward`] walks the record in reverse and
//! returns the gradient of a scalar root with respect to every node.
//!
//! Shape misuse is a programming error and panics; user-facing shape checks
//! live in the model modules.

use alloc::vec;
use alloc::vec::Vec;

use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddChannelBias(Var, Var),
    MulChannel(Var, Var),
    MulSpatial(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        groups: usize,
    },
    Gather {
        x: Var,
        index: Vec<u32>,
    },
    Reshape(Var),
    Concat(Vec<Var>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        rstd: Vec<f32>,
    },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Cosine {
        q: Var,
        k: Var,
        eps: f32,
    },
    HeadScale {
        x: Var,
        scale: Var,
        max_log: f32,
    },
    AddPeriodic {
        x: Var,
        y: Var,
        div: usize,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Bilinear(Var),
    GlobalAvgPool(Var),
    GlobalMaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    ChannelMean(Var),
    ChannelMax {
        x: Var,
        argmax: Vec<u32>,
    },
    Dice {
        x: Var,
        target: Tensor,
        eps: f32,
    },
    Bce {
        x: Var,
        target: Tensor,
        eps: f32,
    },
    Select {
        x: Var,
        index: usize,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Forward-pass record bound to a parameter store.
pub struct Tape<'p> {
    params: &'p ParamStore,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every recorded node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_vars: Vec<Option<Var>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for a parameter; `None` when it did not influence the root.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.param_vars
            .get(id.0)
            .copied()
            .flatten()
            .and_then(|v| self.grads[v.0].as_ref())
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(t) => t.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn acc_with(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], f: impl FnOnce(&mut [f32])) {
    let slot = &mut grads[v.0];
    if slot.is_none() {
        *slot = Some(Tensor::zeros(shape));
    }
    f(slot.as_mut().unwrap().data_mut());
}

/// Splits a shape into (batch, rows, cols) for a 2-D or 3-D matmul operand.
fn mat_dims(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        2 => (1, shape[0], shape[1]),
        3 => (shape[0], shape[1], shape[2]),
        _ => panic!("matmul operand must be 2-D or 3-D, got {shape:?}"),
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf for a stored parameter; repeated calls return the same handle.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Leaf);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: shape mismatch");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "add");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "sub");
        let mut out = self.value(a).clone();
        for (o, y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= *y;
        }
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "mul");
        let mut out = self.value(a).clone();
        for (o, y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= *y;
        }
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let mut out = self.value(a).clone();
        out.scale_assign(s);
        self.push(out, Op::Scale(a, s))
    }

    /// `x[c, ...] + b[c]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Var {
        let c = self.shape(x)[0];
        assert_eq!(self.value(b).numel(), c, "channel bias length");
        let mut out = self.value(x).clone();
        let per = out.numel() / c;
        let bias = self.value(b).data();
        for (ch, chunk) in out.data_mut().chunks_mut(per).enumerate() {
            chunk.iter_mut().for_each(|v| *v += bias[ch]);
        }
        self.push(out, Op::AddChannelBias(x, b))
    }

    /// `x[c, ...] * g[c]`.
    pub fn mul_channel(&mut self, x: Var, g: Var) -> Var {
        let c = self.shape(x)[0];
        assert_eq!(self.value(g).numel(), c, "channel gate length");
        let mut out = self.value(x).clone();
        let per = out.numel() / c;
        let gate = self.value(g).data();
        for (ch, chunk) in out.data_mut().chunks_mut(per).enumerate() {
            chunk.iter_mut().for_each(|v| *v *= gate[ch]);
        }
        self.push(out, Op::MulChannel(x, g))
    }

    /// `x[c, s] * g[s]` where `g` holds one value per spatial position.
    pub fn mul_spatial(&mut self, x: Var, g: Var) -> Var {
        let c = self.shape(x)[0];
        let per = self.value(x).numel() / c;
        assert_eq!(self.value(g).numel(), per, "spatial gate length");
        let mut out = self.value(x).clone();
        let gate = self.value(g).data();
        for chunk in out.data_mut().chunks_mut(per) {
            chunk.iter_mut().zip(gate).for_each(|(v, g)| *v *= *g);
        }
        self.push(out, Op::MulSpatial(x, g))
    }

    /// `op(a) @ op(b)` for 2-D operands or batch-matched 3-D operands.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (ba, ar, ac) = mat_dims(self.shape(a));
        let (bb, br, bc) = mat_dims(self.shape(b));
        assert_eq!(ba, bb, "matmul batch mismatch");
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![0.0; ba * m * n];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        for i in 0..ba {
            kernels::gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                ta,
                &bv[i * k * n..(i + 1) * k * n],
                tb,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let shape: Vec<usize> = if self.shape(a).len() == 3 {
            vec![ba, m, n]
        } else {
            vec![m, n]
        };
        self.push(Tensor::from_vec(&shape, out), Op::MatMul { a, b, ta, tb })
    }

    /// Grouped 2-D convolution of `x: [Cin, H, W]` with `w: [Cout, Cin/groups, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize, groups: usize) -> Var {
        let xs = self.shape(x);
        let ws = self.shape(w);
        assert_eq!(xs.len(), 3, "conv2d input must be [C, H, W]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [Cout, Cin/g, k, k]");
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, cin_g, k) = (ws[0], ws[1], ws[2]);
        assert_eq!(ws[3], k, "square kernels only");
        assert!(cin % groups == 0 && cout % groups == 0, "groups must divide channels");
        assert_eq!(cin / groups, cin_g, "conv2d weight/input channel mismatch");
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "kernel larger than padded input");
        let geom = ConvGeom {
            in_h: h,
            in_w: wd,
            kernel: k,
            stride,
            pad,
        };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let cout_g = cout / groups;
        let mut out = vec![0.0; cout * oh * ow];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let kk = cin_g * k * k;
        let mut cols = Vec::new();
        for g in 0..groups {
            let xg = &xv[g * cin_g * h * wd..(g + 1) * cin_g * h * wd];
            let colsref: &[f32] = if geom.is_pointwise() {
                xg
            } else {
                kernels::im2col(xg, cin_g, &geom, &mut cols);
                &cols
            };
            kernels::gemm(
                cout_g,
                kk,
                oh * ow,
                &wv[g * cout_g * kk..(g + 1) * cout_g * kk],
                false,
                colsref,
                false,
                &mut out[g * cout_g * oh * ow..(g + 1) * cout_g * oh * ow],
                false,
            );
        }
        self.push(
            Tensor::from_vec(&[cout, oh, ow], out),
            Op::Conv2d { x, w, geom, groups },
        )
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<u32>, shape: &[usize]) -> Var {
        let n: usize = shape.iter().product();
        assert_eq!(n, index.len(), "gather index length");
        let src = self.value(x).data();
        let out: Vec<f32> = index.iter().map(|&i| src[i as usize]).collect();
        self.push(Tensor::from_vec(shape, out), Op::Gather { x, index })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        self.push(out, Op::Reshape(x))
    }

    /// Concatenation along the leading axis; trailing shapes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let tail: Vec<usize> = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            assert_eq!(&self.shape(p)[1..], &tail[..], "concat trailing shape mismatch");
            lead += self.shape(p)[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        self.push(Tensor::from_vec(&shape, data), Op::Concat(parts.to_vec()))
    }

    /// Normalizes over the leading (channel) axis independently at each
    /// trailing position, then applies per-channel `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Var {
        let c = self.shape(x)[0];
        let xv = self.value(x);
        let s = xv.numel() / c;
        assert_eq!(self.value(gamma).numel(), c);
        assert_eq!(self.value(beta).numel(), c);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let d = xv.data();
        let mut mean = vec![0.0f32; s];
        let mut rstd = vec![0.0f32; s];
        for ch in 0..c {
            for (m, v) in mean.iter_mut().zip(&d[ch * s..(ch + 1) * s]) {
                *m += *v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= c as f32);
        for ch in 0..c {
            for ((r, v), m) in rstd.iter_mut().zip(&d[ch * s..(ch + 1) * s]).zip(&mean) {
                *r += (v - m) * (v - m);
            }
        }
        rstd.iter_mut()
            .for_each(|r| *r = 1.0 / libm::sqrtf(*r / c as f32 + eps));
        let mut out = vec![0.0; c * s];
        for ch in 0..c {
            let src = &d[ch * s..(ch + 1) * s];
            let dst = &mut out[ch * s..(ch + 1) * s];
            for p in 0..s {
                dst[p] = (src[p] - mean[p]) * rstd[p] * g[ch] + b[ch];
            }
        }
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::from_vec(&shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| 0.5 * v * (1.0 + libm::erff(v * core::f32::consts::FRAC_1_SQRT_2)));
        self.push(out, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().unwrap();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = libm::expf(*v - m);
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        self.push(out, Op::Softmax(x))
    }

    /// Pairwise cosine similarity `[B, n, d] x [B, m, d] -> [B, n, m]` with
    /// denominator `max(|q_a| |k_b|, eps)`.
    pub fn cosine(&mut self, q: Var, k: Var, eps: f32) -> Var {
        let (bq, n, d) = mat_dims(self.shape(q));
        let (bk, m, dk) = mat_dims(self.shape(k));
        assert_eq!((bq, d), (bk, dk), "cosine operand mismatch");
        let qn = row_norms(self.value(q).data(), d);
        let kn = row_norms(self.value(k).data(), d);
        let mut dots = vec![0.0; bq * n * m];
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        for b in 0..bq {
            kernels::gemm(
                n,
                d,
                m,
                &qv[b * n * d..(b + 1) * n * d],
                false,
                &kv[b * m * d..(b + 1) * m * d],
                true,
                &mut dots[b * n * m..(b + 1) * n * m],
                false,
            );
        }
        for b in 0..bq {
            for i in 0..n {
                for j in 0..m {
                    let den = (qn[b * n + i] * kn[b * m + j]).max(eps);
                    dots[(b * n + i) * m + j] /= den;
                }
            }
        }
        let shape = if self.shape(q).len() == 3 {
            vec![bq, n, m]
        } else {
            vec![n, m]
        };
        self.push(Tensor::from_vec(&shape, dots), Op::Cosine { q, k, eps })
    }

    /// Multiplies slab `b` of `x: [B, ...]` by `exp(min(scale[b % P], max_log))`.
    pub fn head_scale(&mut self, x: Var, scale: Var, max_log: f32) -> Var {
        let p = self.value(scale).numel();
        let bsz = self.shape(x)[0];
        assert_eq!(bsz % p, 0, "head_scale batch not a multiple of heads");
        let per = self.value(x).numel() / bsz;
        let sv: Vec<f32> = self
            .value(scale)
            .data()
            .iter()
            .map(|s| libm::expf(s.min(max_log)))
            .collect();
        let mut out = self.value(x).clone();
        for (b, chunk) in out.data_mut().chunks_mut(per).enumerate() {
            let f = sv[b % p];
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        self.push(out, Op::HeadScale { x, scale, max_log })
    }

    /// `x[b, ...] + y[(b / div) % P, ...]` for `x: [B, ...]`, `y: [P, ...]`.
    pub fn add_periodic(&mut self, x: Var, y: Var, div: usize) -> Var {
        let bsz = self.shape(x)[0];
        let p = self.shape(y)[0];
        let per = self.value(x).numel() / bsz;
        assert_eq!(self.value(y).numel(), p * per, "add_periodic slab mismatch");
        let mut out = self.value(x).clone();
        let yv = self.value(y).data();
        for (b, chunk) in out.data_mut().chunks_mut(per).enumerate() {
            let s = (b / div) % p;
            chunk
                .iter_mut()
                .zip(&yv[s * per..(s + 1) * per])
                .for_each(|(a, c)| *a += *c);
        }
        self.push(out, Op::AddPeriodic { x, y, div })
    }

    /// 2x2 max pooling with stride 2 over `[C, H, W]` (H, W even).
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let (c, h, w) = (s[0], s[1], s[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial size");
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = vec![0u32; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut bi = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = ch * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                            if xv[i] > best {
                                best = xv[i];
                                bi = i;
                            }
                        }
                    }
                    let o = ch * oh * ow + oy * ow + ox;
                    out[o] = best;
                    argmax[o] = bi as u32;
                }
            }
        }
        self.push(
            Tensor::from_vec(&[c, oh, ow], out),
            Op::MaxPool2 { x, argmax },
        )
    }

    /// Bilinear resize of `[C, H, W]` to `[C, out_h, out_w]`.
    pub fn bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let s = self.shape(x);
        let (c, h, w) = (s[0], s[1], s[2]);
        let out = kernels::bilinear_forward(self.value(x).data(), c, (h, w), (out_h, out_w));
        self.push(Tensor::from_vec(&[c, out_h, out_w], out), Op::Bilinear(x))
    }

    /// Mean over all trailing positions: `[C, ...] -> [C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let c = self.shape(x)[0];
        let per = self.value(x).numel() / c;
        let out: Vec<f32> = self
            .value(x)
            .data()
            .chunks(per)
            .map(|ch| ch.iter().sum::<f32>() / per as f32)
            .collect();
        self.push(Tensor::from_vec(&[c], out), Op::GlobalAvgPool(x))
    }

    /// Max over all trailing positions: `[C, ...] -> [C]`.
    pub fn global_max_pool(&mut self, x: Var) -> Var {
        let c = self.shape(x)[0];
        let per = self.value(x).numel() / c;
        let mut out = Vec::with_capacity(c);
        let mut argmax = Vec::with_capacity(c);
        for (ch, chunk) in self.value(x).data().chunks(per).enumerate() {
            let (mut bi, mut best) = (0, f32::NEG_INFINITY);
            for (i, &v) in chunk.iter().enumerate() {
                if v > best {
                    best = v;
                    bi = i;
                }
            }
            out.push(best);
            argmax.push((ch * per + bi) as u32);
        }
        self.push(Tensor::from_vec(&[c], out), Op::GlobalMaxPool { x, argmax })
    }

    /// Mean over channels: `[C, H, W] -> [1, H, W]`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let c = shape[0];
        let per = self.value(x).numel() / c;
        let mut out = vec![0.0; per];
        for chunk in self.value(x).data().chunks(per) {
            out.iter_mut().zip(chunk).for_each(|(o, v)| *o += *v);
        }
        out.iter_mut().for_each(|o| *o /= c as f32);
        let mut os = shape;
        os[0] = 1;
        self.push(Tensor::from_vec(&os, out), Op::ChannelMean(x))
    }

    /// Max over channels: `[C, H, W] -> [1, H, W]`.
    pub fn channel_max(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let c = shape[0];
        let per = self.value(x).numel() / c;
        let xv = self.value(x).data();
        let mut out = vec![f32::NEG_INFINITY; per];
        let mut argmax = vec![0u32; per];
        for ch in 0..c {
            for p in 0..per {
                let v = xv[ch * per + p];
                if v > out[p] {
                    out[p] = v;
                    argmax[p] = (ch * per + p) as u32;
                }
            }
        }
        let mut os = shape;
        os[0] = 1;
        self.push(Tensor::from_vec(&os, out), Op::ChannelMax { x, argmax })
    }

    /// Soft Dice loss on logits:
    /// `1 - (2 sum(p g) + eps) / (sum p + sum g + eps)` with `p = sigmoid(x)`.
    pub fn dice_loss(&mut self, x: Var, target: &Tensor, eps: f32) -> Var {
        assert_eq!(self.value(x).numel(), target.numel(), "dice target size");
        let (inter, psum, gsum) = dice_sums(self.value(x).data(), target.data());
        let e = eps as f64;
        let loss = 1.0 - (2.0 * inter + e) / (psum + gsum + e);
        self.push(
            Tensor::scalar(loss as f32),
            Op::Dice {
                x,
                target: target.clone(),
                eps,
            },
        )
    }

    /// Mean binary cross-entropy on logits with probabilities clamped to
    /// `[eps, 1 - eps]`, evaluated in the stable softplus form.
    pub fn bce_loss(&mut self, x: Var, target: &Tensor, eps: f32) -> Var {
        assert_eq!(self.value(x).numel(), target.numel(), "bce target size");
        let lim = bce_logit_limit(eps);
        let xv = self.value(x).data();
        let mut sum = 0.0f64;
        for (&l, &g) in xv.iter().zip(target.data()) {
            let z = l.clamp(-lim, lim) as f64;
            let g = g as f64;
            sum += z.max(0.0) - z * g + libm::log1p(libm::exp(-z.abs()));
        }
        let loss = sum / xv.len() as f64;
        self.push(
            Tensor::scalar(loss as f32),
            Op::Bce {
                x,
                target: target.clone(),
                eps,
            },
        )
    }

    /// Element `index` of a flat tensor as a one-element tensor.
    pub fn select(&mut self, x: Var, index: usize) -> Var {
        let v = self.value(x).data()[index];
        self.push(Tensor::scalar(v), Op::Select { x, index })
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).data().iter().map(|&v| v as f64).sum::<f64>();
        self.push(Tensor::scalar(v as f32), Op::Sum(x))
    }

    /// Back-propagates from a one-element `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).numel(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        }
    }

    fn backprop_node(&self, idx: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let g = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, gy.clone());
                acc(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, gy.clone());
                acc(grads, *b, gy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = gy.clone();
                ga.data_mut().iter_mut().zip(bv.data()).for_each(|(x, y)| *x *= *y);
                let mut gb = gy.clone();
                gb.data_mut().iter_mut().zip(av.data()).for_each(|(x, y)| *x *= *y);
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Scale(a, s) => acc(grads, *a, gy.map(|v| v * s)),
            Op::AddChannelBias(x, b) => {
                acc(grads, *x, gy.clone());
                let c = self.value(*b).numel();
                let per = g.len() / c;
                let gb: Vec<f32> = g.chunks(per).map(|ch| ch.iter().sum()).collect();
                acc(grads, *b, Tensor::from_vec(self.shape(*b), gb));
            }
            Op::MulChannel(x, gate) => {
                let c = self.value(*gate).numel();
                let per = g.len() / c;
                let gv = self.value(*gate).data();
                let xv = self.value(*x).data();
                let mut gx = gy.clone();
                for (ch, chunk) in gx.data_mut().chunks_mut(per).enumerate() {
                    chunk.iter_mut().for_each(|v| *v *= gv[ch]);
                }
                let gg: Vec<f32> = g
                    .chunks(per)
                    .zip(xv.chunks(per))
                    .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p * q).sum())
                    .collect();
                acc(grads, *x, gx);
                acc(grads, *gate, Tensor::from_vec(self.shape(*gate), gg));
            }
            Op::MulSpatial(x, gate) => {
                let per = self.value(*gate).numel();
                let gv = self.value(*gate).data();
                let xv = self.value(*x).data();
                let mut gx = gy.clone();
                for chunk in gx.data_mut().chunks_mut(per) {
                    chunk.iter_mut().zip(gv).for_each(|(v, q)| *v *= *q);
                }
                let mut gg = vec![0.0; per];
                for (gc, xc) in g.chunks(per).zip(xv.chunks(per)) {
                    for ((o, a), b) in gg.iter_mut().zip(gc).zip(xc) {
                        *o += a * b;
                    }
                }
                acc(grads, *x, gx);
                acc(grads, *gate, Tensor::from_vec(self.shape(*gate), gg));
            }
            Op::MatMul { a, b, ta, tb } => self.backprop_matmul(*a, *b, *ta, *tb, g, grads),
            Op::Conv2d { x, w, geom, groups } => {
                self.backprop_conv(*x, *w, geom, *groups, g, grads)
            }
            Op::Gather { x, index } => {
                let xs = self.shape(*x).to_vec();
                acc_with(grads, *x, &xs, |dx| {
                    for (&i, &v) in index.iter().zip(g) {
                        dx[i as usize] += v;
                    }
                });
            }
            Op::Reshape(x) => {
                let gx = gy.clone().reshape(self.shape(*x));
                acc(grads, *x, gx);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    let gp = Tensor::from_vec(self.shape(p), g[off..off + n].to_vec());
                    acc(grads, p, gp);
                    off += n;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let c = gv.len();
                let s = xv.len() / c;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                // per-position sums of dxhat and dxhat * xhat
                let mut sum1 = vec![0.0f32; s];
                let mut sum2 = vec![0.0f32; s];
                for ch in 0..c {
                    for p in 0..s {
                        let xhat = (xv[ch * s + p] - mean[p]) * rstd[p];
                        let gyv = g[ch * s + p];
                        dgamma[ch] += gyv * xhat;
                        dbeta[ch] += gyv;
                        let dxh = gyv * gv[ch];
                        sum1[p] += dxh;
                        sum2[p] += dxh * xhat;
                    }
                }
                let mut dx = vec![0.0; xv.len()];
                let cf = c as f32;
                for ch in 0..c {
                    for p in 0..s {
                        let xhat = (xv[ch * s + p] - mean[p]) * rstd[p];
                        let dxh = g[ch * s + p] * gv[ch];
                        dx[ch * s + p] = rstd[p] * (dxh - sum1[p] / cf - xhat * sum2[p] / cf);
                    }
                }
                acc(grads, *x, Tensor::from_vec(self.shape(*x), dx));
                acc(grads, *gamma, Tensor::from_vec(self.shape(*gamma), dgamma));
                acc(grads, *beta, Tensor::from_vec(self.shape(*beta), dbeta));
            }
            Op::Relu(x) => {
                let mut gx = gy.clone();
                gx.data_mut()
                    .iter_mut()
                    .zip(self.value(*x).data())
                    .for_each(|(d, v)| {
                        if *v <= 0.0 {
                            *d = 0.0
                        }
                    });
                acc(grads, *x, gx);
            }
            Op::Gelu(x) => {
                let mut gx = gy.clone();
                let inv_sqrt_2pi = 0.398_942_3_f32;
                gx.data_mut()
                    .iter_mut()
                    .zip(self.value(*x).data())
                    .for_each(|(d, &v)| {
                        let cdf = 0.5 * (1.0 + libm::erff(v * core::f32::consts::FRAC_1_SQRT_2));
                        let pdf = inv_sqrt_2pi * libm::expf(-0.5 * v * v);
                        *d *= cdf + v * pdf;
                    });
                acc(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let mut gx = gy.clone();
                gx.data_mut()
                    .iter_mut()
                    .zip(node.value.data())
                    .for_each(|(d, &s)| *d *= s * (1.0 - s));
                acc(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let n = *node.value.shape().last().unwrap();
                let mut gx = gy.clone();
                for (gr, yr) in gx.data_mut().chunks_mut(n).zip(node.value.data().chunks(n)) {
                    let dot: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    gr.iter_mut().zip(yr).for_each(|(d, y)| *d = y * (*d - dot));
                }
                acc(grads, *x, gx);
            }
            Op::Cosine { q, k, eps } => self.backprop_cosine(*q, *k, *eps, &node.value, g, grads),
            Op::HeadScale { x, scale, max_log } => {
                let sv = self.value(*scale).data();
                let p = sv.len();
                let bsz = self.shape(*x)[0];
                let per = g.len() / bsz;
                let xv = self.value(*x).data();
                let mut gx = gy.clone();
                let mut gs = vec![0.0; p];
                for (b, chunk) in gx.data_mut().chunks_mut(per).enumerate() {
                    let h = b % p;
                    let f = libm::expf(sv[h].min(*max_log));
                    if sv[h] <= *max_log {
                        let dot: f32 = g[b * per..(b + 1) * per]
                            .iter()
                            .zip(&xv[b * per..(b + 1) * per])
                            .map(|(a, c)| a * c)
                            .sum();
                        gs[h] += dot * f;
                    }
                    chunk.iter_mut().for_each(|v| *v *= f);
                }
                acc(grads, *x, gx);
                acc(grads, *scale, Tensor::from_vec(self.shape(*scale), gs));
            }
            Op::AddPeriodic { x, y, div } => {
                acc(grads, *x, gy.clone());
                let ys = self.shape(*y).to_vec();
                let p = ys[0];
                let bsz = self.shape(*x)[0];
                let per = g.len() / bsz;
                acc_with(grads, *y, &ys, |dy| {
                    for b in 0..bsz {
                        let s = (b / div) % p;
                        dy[s * per..(s + 1) * per]
                            .iter_mut()
                            .zip(&g[b * per..(b + 1) * per])
                            .for_each(|(a, c)| *a += *c);
                    }
                });
            }
            Op::MaxPool2 { x, argmax } | Op::GlobalMaxPool { x, argmax } | Op::ChannelMax { x, argmax } => {
                let xs = self.shape(*x).to_vec();
                acc_with(grads, *x, &xs, |dx| {
                    for (&i, &v) in argmax.iter().zip(g) {
                        dx[i as usize] += v;
                    }
                });
            }
            Op::Bilinear(x) => {
                let s = self.shape(*x);
                let os = node.value.shape();
                let dx = kernels::bilinear_backward(g, s[0], (s[1], s[2]), (os[1], os[2]));
                acc(grads, *x, Tensor::from_vec(s, dx));
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x).to_vec();
                let c = xs[0];
                let per = self.value(*x).numel() / c;
                let mut dx = vec![0.0; c * per];
                for (ch, chunk) in dx.chunks_mut(per).enumerate() {
                    let v = g[ch] / per as f32;
                    chunk.iter_mut().for_each(|d| *d = v);
                }
                acc(grads, *x, Tensor::from_vec(&xs, dx));
            }
            Op::ChannelMean(x) => {
                let xs = self.shape(*x).to_vec();
                let c = xs[0];
                let mut dx = Vec::with_capacity(c * g.len());
                for _ in 0..c {
                    dx.extend(g.iter().map(|v| v / c as f32));
                }
                acc(grads, *x, Tensor::from_vec(&xs, dx));
            }
            Op::Dice { x, target, eps } => {
                let xv = self.value(*x).data();
                let (inter, psum, gsum) = dice_sums(xv, target.data());
                let e = *eps as f64;
                let num = 2.0 * inter + e;
                let den = psum + gsum + e;
                let up = g[0] as f64;
                let dx: Vec<f32> = xv
                    .iter()
                    .zip(target.data())
                    .map(|(&l, &t)| {
                        let p = kernels::sigmoid(l) as f64;
                        let dl_dp = -(2.0 * t as f64 * den - num) / (den * den);
                        (up * dl_dp * p * (1.0 - p)) as f32
                    })
                    .collect();
                acc(grads, *x, Tensor::from_vec(self.shape(*x), dx));
            }
            Op::Bce { x, target, eps } => {
                let lim = bce_logit_limit(*eps);
                let xv = self.value(*x).data();
                let n = xv.len() as f32;
                let up = g[0];
                let dx: Vec<f32> = xv
                    .iter()
                    .zip(target.data())
                    .map(|(&l, &t)| {
                        if l.abs() >= lim {
                            0.0
                        } else {
                            up * (kernels::sigmoid(l) - t) / n
                        }
                    })
                    .collect();
                acc(grads, *x, Tensor::from_vec(self.shape(*x), dx));
            }
            Op::Select { x, index } => {
                let xs = self.shape(*x).to_vec();
                acc_with(grads, *x, &xs, |dx| dx[*index] += g[0]);
            }
            Op::Sum(x) => {
                let xs = self.shape(*x).to_vec();
                acc(grads, *x, Tensor::full(&xs, g[0]));
            }
        }
    }

    fn backprop_matmul(
        &self,
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        g: &[f32],
        grads: &mut [Option<Tensor>],
    ) {
        let (bs, ar, ac) = mat_dims(self.shape(a));
        let (_, br, bc) = mat_dims(self.shape(b));
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let n = if tb { br } else { bc };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut da = vec![0.0; av.len()];
        let mut db = vec![0.0; bv.len()];
        for i in 0..bs {
            let gi = &g[i * m * n..(i + 1) * m * n];
            let ai = &av[i * m * k..(i + 1) * m * k];
            let bi = &bv[i * k * n..(i + 1) * k * n];
            let dai = &mut da[i * m * k..(i + 1) * m * k];
            if ta {
                // dA (k x m) = op(B) (k x n) * dC^T (n x m)
                kernels::gemm(k, n, m, bi, tb, gi, true, dai, false);
            } else {
                // dA (m x k) = dC (m x n) * op(B)^T (n x k)
                kernels::gemm(m, n, k, gi, false, bi, !tb, dai, false);
            }
            let dbi = &mut db[i * k * n..(i + 1) * k * n];
            if tb {
                // dB (n x k) = dC^T (n x m) * op(A) (m x k)
                kernels::gemm(n, m, k, gi, true, ai, ta, dbi, false);
            } else {
                // dB (k x n) = op(A)^T (k x m) * dC (m x n)
                kernels::gemm(k, m, n, ai, !ta, gi, false, dbi, false);
            }
        }
        acc(grads, a, Tensor::from_vec(self.shape(a), da));
        acc(grads, b, Tensor::from_vec(self.shape(b), db));
    }

    fn backprop_conv(
        &self,
        x: Var,
        w: Var,
        geom: &ConvGeom,
        groups: usize,
        g: &[f32],
        grads: &mut [Option<Tensor>],
    ) {
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let ws = self.shape(w);
        let (cout, cin_g, k) = (ws[0], ws[1], ws[2]);
        let cout_g = cout / groups;
        let kk = cin_g * k * k;
        let plane = geom.in_h * geom.in_w;
        let opix = geom.out_h() * geom.out_w();
        let mut dx = vec![0.0; xv.len()];
        let mut dw = vec![0.0; wv.len()];
        let mut cols = Vec::new();
        let mut dcols = vec![0.0; kk * opix];
        for gi in 0..groups {
            let xg = &xv[gi * cin_g * plane..(gi + 1) * cin_g * plane];
            let gg = &g[gi * cout_g * opix..(gi + 1) * cout_g * opix];
            let wg = &wv[gi * cout_g * kk..(gi + 1) * cout_g * kk];
            let colsref: &[f32] = if geom.is_pointwise() {
                xg
            } else {
                kernels::im2col(xg, cin_g, geom, &mut cols);
                &cols
            };
            // dW = dOut (cout_g x opix) * cols^T (opix x kk)
            kernels::gemm(
                cout_g,
                opix,
                kk,
                gg,
                false,
                colsref,
                true,
                &mut dw[gi * cout_g * kk..(gi + 1) * cout_g * kk],
                false,
            );
            let dxg = &mut dx[gi * cin_g * plane..(gi + 1) * cin_g * plane];
            if geom.is_pointwise() {
                kernels::gemm(kk, cout_g, opix, wg, true, gg, false, dxg, false);
            } else {
                kernels::gemm(kk, cout_g, opix, wg, true, gg, false, &mut dcols, false);
                kernels::col2im_add(&dcols, cin_g, geom, dxg);
            }
        }
        acc(grads, x, Tensor::from_vec(self.shape(x), dx));
        acc(grads, w, Tensor::from_vec(ws, dw));
    }

    fn backprop_cosine(
        &self,
        q: Var,
        k: Var,
        eps: f32,
        out: &Tensor,
        g: &[f32],
        grads: &mut [Option<Tensor>],
    ) {
        let (bs, n, d) = mat_dims(self.shape(q));
        let (_, m, _) = mat_dims(self.shape(k));
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let qn = row_norms(qv, d);
        let kn = row_norms(kv, d);
        let c = out.data();
        let mut dq = vec![0.0; qv.len()];
        let mut dk = vec![0.0; kv.len()];
        // w = g / den (when unclamped); radial terms subtract c * g * x / |x|^2.
        let mut wmat = vec![0.0; n * m];
        for b in 0..bs {
            let mut qrad = vec![0.0f32; n];
            let mut krad = vec![0.0f32; m];
            for i in 0..n {
                for j in 0..m {
                    let idx = (b * n + i) * m + j;
                    let qa = qn[b * n + i];
                    let kb = kn[b * m + j];
                    let den = qa * kb;
                    if den > eps {
                        wmat[i * m + j] = g[idx] / den;
                        qrad[i] += g[idx] * c[idx] / (qa * qa);
                        krad[j] += g[idx] * c[idx] / (kb * kb);
                    } else {
                        wmat[i * m + j] = g[idx] / eps;
                    }
                }
            }
            let qb = &qv[b * n * d..(b + 1) * n * d];
            let kb = &kv[b * m * d..(b + 1) * m * d];
            let dqb = &mut dq[b * n * d..(b + 1) * n * d];
            kernels::gemm(n, m, d, &wmat, false, kb, false, dqb, false);
            for i in 0..n {
                for t in 0..d {
                    dqb[i * d + t] -= qrad[i] * qb[i * d + t];
                }
            }
            let dkb = &mut dk[b * m * d..(b + 1) * m * d];
            kernels::gemm(m, n, d, &wmat, true, qb, false, dkb, false);
            for j in 0..m {
                for t in 0..d {
                    dkb[j * d + t] -= krad[j] * kb[j * d + t];
                }
            }
        }
        acc(grads, q, Tensor::from_vec(self.shape(q), dq));
        acc(grads, k, Tensor::from_vec(self.shape(k), dk));
    }
}

fn row_norms(x: &[f32], d: usize) -> Vec<f32> {
    x.chunks(d)
        .map(|r| libm::sqrtf(r.iter().map(|v| v * v).sum()))
        .collect()
}

fn dice_sums(logits: &[f32], target: &[f32]) -> (f64, f64, f64) {
    let (mut inter, mut psum, mut gsum) = (0.0f64, 0.0f64, 0.0f64);
    for (&l, &t) in logits.iter().zip(target) {
        let p = kernels::sigmoid(l) as f64;
        inter += p * t as f64;
        psum += p;
        gsum += t as f64;
    }
    (inter, psum, gsum)
}

/// Logit magnitude at which the probability clamp `[eps, 1 - eps]` engages.
fn bce_logit_limit(eps: f32) -> f32 {
    let e = eps as f64;
    libm::log((1.0 - e) / e) as f32
}
