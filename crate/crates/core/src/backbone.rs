//! Hierarchical shifted-window transformer encoder (scaled cosine attention,
//! log-spaced continuous relative position bias) producing the encoder
//! column of the dense nest.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::layers::{ChannelNorm, Conv2d};
use crate::params::{Init, ParamBuilder, ParamId};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Side length of the square patches turned into stage-0 tokens.
pub const PATCH_SIZE: usize = 4;
/// Number of encoder stages (rows of the dense nest).
pub const NUM_STAGES: usize = 4;
/// Input sides must be divisible by the total downsampling factor.
pub const INPUT_MULTIPLE: usize = 32;
/// Cap on the exponentiated attention logit scale.
pub const LOGIT_SCALE_MAX: f32 = 4.605_170_2; // ln(100)
/// Initial value of the per-head logit scale, ln(10).
pub const LOGIT_SCALE_INIT: f32 = core::f32::consts::LN_10;
/// Denominator floor of the cosine similarity.
pub const COSINE_EPS: f32 = 1e-6;
/// Additive logit for token pairs from different regions of a shifted window.
const SHIFT_MASK_VALUE: f32 = -100.0;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    /// Stage-0 channel width `C0`; stage `i` has `C0 * 2^i`.
    pub embed_dim: usize,
    pub depths: [usize; NUM_STAGES],
    pub heads: [usize; NUM_STAGES],
    pub window: usize,
    pub mlp_ratio: usize,
    pub cpb_hidden: usize,
    /// Pre-normalization (`x + f(norm(x))`) when true, otherwise
    /// residual post-normalization (`x + norm(f(x))`).
    pub prenorm: bool,
}

impl BackboneConfig {
    /// Desk-scale defaults: small enough to train on a laptop CPU.
    pub fn desk() -> Self {
        Self {
            embed_dim: 16,
            depths: [1, 1, 1, 1],
            heads: [1, 2, 4, 8],
            window: 2,
            mlp_ratio: 4,
            cpb_hidden: 64,
            prenorm: true,
        }
    }

    /// Widths matching a 96-channel stage-0 embedding and 256x256 inputs.
    pub fn full() -> Self {
        Self {
            embed_dim: 96,
            depths: [2, 2, 2, 2],
            heads: [3, 6, 12, 24],
            window: 8,
            ..Self::desk()
        }
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    /// Checks widths and heads; resolution checks happen per input.
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.window == 0 || self.mlp_ratio == 0 || self.cpb_hidden == 0 {
            return Err(Error::Config("backbone widths and window must be >= 1".into()));
        }
        for s in 0..NUM_STAGES {
            let c = self.stage_channels(s);
            if self.heads[s] == 0 || c % self.heads[s] != 0 {
                return Err(Error::Config(format!(
                    "stage {s}: {} heads do not divide {c} channels",
                    self.heads[s]
                )));
            }
        }
        Ok(())
    }

    /// Checks that the window tiles every stage for an `h x w` input.
    pub fn validate_input(&self, h: usize, w: usize) -> Result<()> {
        check_input_dims(h, w)?;
        for s in 0..NUM_STAGES {
            let (sh, sw) = (h / PATCH_SIZE >> s, w / PATCH_SIZE >> s);
            if sh % self.window != 0 || sw % self.window != 0 {
                return Err(Error::Config(format!(
                    "window {} does not divide stage {s} resolution {sh}x{sw}",
                    self.window
                )));
            }
        }
        Ok(())
    }
}

fn check_input_dims(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 {
        return Err(Error::InputShape(format!(
            "image {h}x{w} is not a positive multiple of {INPUT_MULTIPLE}"
        )));
    }
    Ok(())
}

/// Stage feature map `[C, h, w]` on the tape.
#[derive(Clone, Copy, Debug)]
pub struct TokenGrid {
    pub tokens: Var,
    pub stage: usize,
}

/// Log-spaced, normalized relative coordinate for one axis offset `d`.
pub fn log_spaced_coord(d: i64, window: usize) -> f32 {
    if window <= 1 || d == 0 {
        return 0.0;
    }
    let denom = libm::log2((window - 1) as f64 + 1.0);
    let v = libm::log2(1.0 + d.unsigned_abs() as f64) / denom;
    (if d < 0 { -v } else { v }) as f32
}

/// Table of `(dy, dx)` log-spaced coordinates for every offset pair,
/// shape `[(2ws-1)^2, 2]`, rows ordered by `(dy + ws - 1) * (2ws - 1) + dx + ws - 1`.
pub fn log_spaced_coords(window: usize) -> Tensor {
    let span = 2 * window - 1;
    let mut data = Vec::with_capacity(span * span * 2);
    for iy in 0..span {
        for ix in 0..span {
            let dy = iy as i64 - (window as i64 - 1);
            let dx = ix as i64 - (window as i64 - 1);
            data.push(log_spaced_coord(dy, window));
            data.push(log_spaced_coord(dx, window));
        }
    }
    Tensor::from_vec(&[span * span, 2], data)
}

/// For token pair `(a, b)` inside a window, the row of [`log_spaced_coords`]
/// holding the offset `pos(a) - pos(b)`.
pub fn relative_index(window: usize) -> Vec<u32> {
    let n = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(n * n);
    for a in 0..n {
        for b in 0..n {
            let dy = (a / window) as i64 - (b / window) as i64 + window as i64 - 1;
            let dx = (a % window) as i64 - (b % window) as i64 + window as i64 - 1;
            idx.push((dy as usize * span + dx as usize) as u32);
        }
    }
    idx
}

/// Per-pair coordinates `[n, n, 2]` expanded from the offset table.
pub fn pair_coords(window: usize) -> Tensor {
    let table = log_spaced_coords(window);
    let n = window * window;
    let mut data = Vec::with_capacity(n * n * 2);
    for r in relative_index(window) {
        data.extend_from_slice(&table.data()[r as usize * 2..r as usize * 2 + 2]);
    }
    Tensor::from_vec(&[n, n, 2], data)
}

/// Two-layer MLP `2 -> hidden -> heads` mapping relative coordinates to
/// per-head attention bias.
#[derive(Clone, Debug)]
pub struct CpbMlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub hidden: usize,
    pub heads: usize,
}

impl CpbMlp {
    pub fn new(b: &mut ParamBuilder, name: &str, hidden: usize, heads: usize) -> Self {
        let mut s = b.scope(name);
        Self {
            w1: s.param("fc1.weight", &[hidden, 2], Init::FanInUniform { fan_in: 2 }),
            b1: s.param("fc1.bias", &[hidden], Init::FanInUniform { fan_in: 2 }),
            w2: s.param("fc2.weight", &[heads, hidden], Init::TruncNormal { std: 0.02 }),
            hidden,
            heads,
        }
    }
}

/// Bias table `[heads, n, n]` with `bias[h, a, b] = mlp(coords[a, b])[h]`.
pub fn continuous_position_bias(t: &mut Tape, mlp: &CpbMlp, window: usize) -> Var {
    let table = log_spaced_coords(window);
    let rows = table.dim(0);
    // [rows, 2] -> [2, rows] so the MLP acts over the leading axis
    let mut cols = vec![0.0; rows * 2];
    for r in 0..rows {
        cols[r] = table.data()[2 * r];
        cols[rows + r] = table.data()[2 * r + 1];
    }
    let coords = t.constant(Tensor::from_vec(&[2, rows], cols));
    let w1 = t.param(mlp.w1);
    let b1 = t.param(mlp.b1);
    let w2 = t.param(mlp.w2);
    let h = t.matmul(w1, coords, false, false);
    let h = t.add_channel_bias(h, b1);
    let h = t.relu(h);
    let per_offset = t.matmul(w2, h, false, false); // [heads, rows]
    let rel = relative_index(window);
    let n = window * window;
    let mut index = Vec::with_capacity(mlp.heads * n * n);
    for head in 0..mlp.heads {
        index.extend(rel.iter().map(|&r| (head * rows) as u32 + r));
    }
    t.gather(per_offset, index, &[mlp.heads, n, n])
}

/// Scaled cosine attention over batched token sets.
///
/// `q`, `k`, `v` are `[B, n, d]` with `B = groups * heads` and head index
/// `b % heads`; `logit_scale` is `[heads]`; `bias` is `[heads, n, n]`;
/// `mask` is `[groups, n, n]` added per group. Returns `(output, weights)`.
pub fn scaled_cosine_attention(
    t: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    logit_scale: Var,
    bias: Option<Var>,
    mask: Option<Var>,
) -> (Var, Var) {
    let heads = t.value(logit_scale).numel();
    let logits = t.cosine(q, k, COSINE_EPS);
    let mut logits = t.head_scale(logits, logit_scale, LOGIT_SCALE_MAX);
    if let Some(b) = bias {
        logits = t.add_periodic(logits, b, 1);
    }
    if let Some(m) = mask {
        logits = t.add_periodic(logits, m, heads);
    }
    let weights = t.softmax(logits);
    let out = t.matmul(weights, v, false, false);
    (out, weights)
}

/// Gather indices taking a `[C, H, W]` map (channel offset `base`) into
/// `[windows * heads, ws*ws, C/heads]` after a cyclic shift by `-shift`.
pub fn window_partition_index(
    c: usize,
    h: usize,
    w: usize,
    heads: usize,
    ws: usize,
    shift: usize,
    base: usize,
) -> Vec<u32> {
    let d = c / heads;
    let (nwy, nwx) = (h / ws, w / ws);
    let n = ws * ws;
    let mut idx = Vec::with_capacity(c * h * w);
    for wy in 0..nwy {
        for wx in 0..nwx {
            for head in 0..heads {
                for tok in 0..n {
                    let y = (wy * ws + tok / ws + shift) % h;
                    let x = (wx * ws + tok % ws + shift) % w;
                    for e in 0..d {
                        let ch = base + head * d + e;
                        idx.push((ch * h * w + y * w + x) as u32);
                    }
                }
            }
        }
    }
    idx
}

/// Inverse of [`window_partition_index`] (without channel offset): gather
/// indices from `[windows * heads, n, d]` back to `[C, H, W]`.
pub fn window_reverse_index(
    c: usize,
    h: usize,
    w: usize,
    heads: usize,
    ws: usize,
    shift: usize,
) -> Vec<u32> {
    let d = c / heads;
    let n = ws * ws;
    let nwx = w / ws;
    let mut idx = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let (head, e) = (ch / d, ch % d);
        for y in 0..h {
            for x in 0..w {
                let sy = (y + h - shift % h) % h;
                let sx = (x + w - shift % w) % w;
                let win = (sy / ws) * nwx + sx / ws;
                let tok = (sy % ws) * ws + sx % ws;
                idx.push((((win * heads + head) * n + tok) * d + e) as u32);
            }
        }
    }
    idx
}

/// Additive mask `[windows, n, n]` separating the regions a cyclic shift
/// wraps into the same window.
pub fn shift_window_mask(h: usize, w: usize, ws: usize, shift: usize) -> Tensor {
    let region = |p: usize, len: usize| -> usize {
        if p < len - ws {
            0
        } else if p < len - shift {
            1
        } else {
            2
        }
    };
    let (nwy, nwx) = (h / ws, w / ws);
    let n = ws * ws;
    let mut data = Vec::with_capacity(nwy * nwx * n * n);
    for wy in 0..nwy {
        for wx in 0..nwx {
            let label = |tok: usize| {
                let y = wy * ws + tok / ws;
                let x = wx * ws + tok % ws;
                region(y, h) * 3 + region(x, w)
            };
            for a in 0..n {
                for b in 0..n {
                    data.push(if label(a) == label(b) { 0.0 } else { SHIFT_MASK_VALUE });
                }
            }
        }
    }
    Tensor::from_vec(&[nwy * nwx, n, n], data)
}

#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub qkv: Conv2d,
    pub proj: Conv2d,
    pub logit_scale: ParamId,
    pub cpb: CpbMlp,
    pub channels: usize,
    pub heads: usize,
}

impl WindowAttention {
    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize, heads: usize, cpb_hidden: usize) -> Self {
        let mut s = b.scope(name);
        Self {
            qkv: Conv2d::pointwise(&mut s, "qkv", channels, 3 * channels, true),
            proj: Conv2d::pointwise(&mut s, "proj", channels, channels, true),
            logit_scale: s.param("logit_scale", &[heads], Init::Constant(LOGIT_SCALE_INIT)),
            cpb: CpbMlp::new(&mut s, "cpb", cpb_hidden, heads),
            channels,
            heads,
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var, window: usize, shift: usize) -> Var {
        let s = t.shape(x);
        let (c, h, w) = (s[0], s[1], s[2]);
        let qkv = self.qkv.forward(t, x);
        let d = c / self.heads;
        let batches = (h / window) * (w / window) * self.heads;
        let n = window * window;
        let mut parts = [qkv; 3];
        for (i, p) in parts.iter_mut().enumerate() {
            let idx = window_partition_index(c, h, w, self.heads, window, shift, i * c);
            *p = t.gather(qkv, idx, &[batches, n, d]);
        }
        let scale = t.param(self.logit_scale);
        let bias = continuous_position_bias(t, &self.cpb, window);
        let mask = (shift > 0).then(|| t.constant(shift_window_mask(h, w, window, shift)));
        let (out, _) = scaled_cosine_attention(t, parts[0], parts[1], parts[2], scale, Some(bias), mask);
        let back = t.gather(out, window_reverse_index(c, h, w, self.heads, window, shift), &[c, h, w]);
        self.proj.forward(t, back)
    }
}

#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub norm1: ChannelNorm,
    pub attn: WindowAttention,
    pub norm2: ChannelNorm,
    pub fc1: Conv2d,
    pub fc2: Conv2d,
    pub shift: usize,
    pub window: usize,
    pub prenorm: bool,
}

impl SwinBlock {
    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let x = if self.prenorm {
            let n = self.norm1.forward(t, x);
            let a = self.attn.forward(t, n, self.window, self.shift);
            t.add(x, a)
        } else {
            let a = self.attn.forward(t, x, self.window, self.shift);
            let n = self.norm1.forward(t, a);
            t.add(x, n)
        };
        if self.prenorm {
            let n = self.norm2.forward(t, x);
            let m = self.mlp(t, n);
            t.add(x, m)
        } else {
            let m = self.mlp(t, x);
            let n = self.norm2.forward(t, m);
            t.add(x, n)
        }
    }

    fn mlp(&self, t: &mut Tape, x: Var) -> Var {
        let h = self.fc1.forward(t, x);
        let h = t.gelu(h);
        self.fc2.forward(t, h)
    }
}

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Conv2d,
    pub norm: ChannelNorm,
}

impl PatchEmbed {
    pub fn new(b: &mut ParamBuilder, name: &str, embed_dim: usize) -> Self {
        let mut s = b.scope(name);
        Self {
            proj: Conv2d::new(&mut s, "proj", 3, embed_dim, PATCH_SIZE, PATCH_SIZE, 0, 1, true),
            norm: ChannelNorm::new(&mut s, "norm", embed_dim),
        }
    }

    /// `[3, H, W]` image to stage-0 tokens `[C0, H/4, W/4]`.
    pub fn forward(&self, t: &mut Tape, image: Var) -> Result<TokenGrid> {
        let s = t.shape(image);
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::InputShape(format!("expected [3, H, W] image, got {s:?}")));
        }
        check_input_dims(s[1], s[2])?;
        let x = self.proj.forward(t, image);
        let tokens = self.norm.forward(t, x);
        Ok(TokenGrid { tokens, stage: 0 })
    }
}

/// Space-to-depth gather `[C, h, w] -> [4C, h/2, w/2]`; the four
/// neighbours are ordered (0,0), (1,0), (0,1), (1,1) as (row, col) offsets.
pub fn merge_index(c: usize, h: usize, w: usize) -> Vec<u32> {
    let (oh, ow) = (h / 2, w / 2);
    let offsets = [(0, 0), (1, 0), (0, 1), (1, 1)];
    let mut idx = Vec::with_capacity(c * h * w);
    for (dy, dx) in offsets {
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    idx.push((ch * h * w + (2 * y + dy) * w + 2 * x + dx) as u32);
                }
            }
        }
    }
    idx
}

#[derive(Clone, Debug)]
pub struct PatchMerging {
    pub reduction: Conv2d,
    pub norm: ChannelNorm,
}

impl PatchMerging {
    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        let mut s = b.scope(name);
        Self {
            reduction: Conv2d::pointwise(&mut s, "reduction", 4 * channels, 2 * channels, false),
            norm: ChannelNorm::new(&mut s, "norm", 2 * channels),
        }
    }

    pub fn forward(&self, t: &mut Tape, tg: TokenGrid) -> Result<TokenGrid> {
        let s = t.shape(tg.tokens).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InputShape(format!("cannot merge odd token grid {h}x{w}")));
        }
        let grouped = t.gather(tg.tokens, merge_index(c, h, w), &[4 * c, h / 2, w / 2]);
        let reduced = self.reduction.forward(t, grouped);
        let tokens = self.norm.forward(t, reduced);
        Ok(TokenGrid {
            tokens,
            stage: tg.stage + 1,
        })
    }
}

#[derive(Clone, Debug)]
pub struct SwinBackbone {
    pub cfg: BackboneConfig,
    pub embed: PatchEmbed,
    pub stages: Vec<Vec<SwinBlock>>,
    pub merges: Vec<PatchMerging>,
    /// Normalization of each stage output handed to the nest.
    pub out_norms: Vec<ChannelNorm>,
}

impl SwinBackbone {
    pub fn new(b: &mut ParamBuilder, name: &str, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut s = b.scope(name);
        let embed = PatchEmbed::new(&mut s, "patch_embed", cfg.embed_dim);
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut merges = Vec::with_capacity(NUM_STAGES - 1);
        let mut out_norms = Vec::with_capacity(NUM_STAGES);
        for stage in 0..NUM_STAGES {
            let c = cfg.stage_channels(stage);
            let mut ss = s.scope(&format!("stage{stage}"));
            let mut blocks = Vec::with_capacity(cfg.depths[stage]);
            for bi in 0..cfg.depths[stage] {
                let mut bs = ss.scope(&format!("block{bi}"));
                blocks.push(SwinBlock {
                    norm1: ChannelNorm::new(&mut bs, "norm1", c),
                    attn: WindowAttention::new(&mut bs, "attn", c, cfg.heads[stage], cfg.cpb_hidden),
                    norm2: ChannelNorm::new(&mut bs, "norm2", c),
                    fc1: Conv2d::pointwise(&mut bs, "mlp.fc1", c, cfg.mlp_ratio * c, true),
                    fc2: Conv2d::pointwise(&mut bs, "mlp.fc2", cfg.mlp_ratio * c, c, true),
                    shift: if bi % 2 == 1 { cfg.window / 2 } else { 0 },
                    window: cfg.window,
                    prenorm: cfg.prenorm,
                });
            }
            stages.push(blocks);
            out_norms.push(ChannelNorm::new(&mut ss, "out_norm", c));
            if stage + 1 < NUM_STAGES {
                merges.push(PatchMerging::new(&mut ss, "merge", c));
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            stages,
            merges,
            out_norms,
        })
    }

    /// Encoder column `F(i,0)`, `i = 0..3`: `[C0 * 2^i, H/4/2^i, W/4/2^i]`.
    pub fn extract_pyramid(&self, t: &mut Tape, image: Var) -> Result<[Var; NUM_STAGES]> {
        let s = t.shape(image);
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::InputShape(format!("expected [3, H, W] image, got {s:?}")));
        }
        self.cfg.validate_input(s[1], s[2])?;
        let mut tg = self.embed.forward(t, image)?;
        let mut out = [tg.tokens; NUM_STAGES];
        for stage in 0..NUM_STAGES {
            let mut x = tg.tokens;
            for block in &self.stages[stage] {
                x = block.forward(t, x);
            }
            out[stage] = self.out_norms[stage].forward(t, x);
            if stage + 1 < NUM_STAGES {
                tg = self.merges[stage].forward(t, TokenGrid { tokens: x, stage })?;
            }
        }
        Ok(out)
    }
}
