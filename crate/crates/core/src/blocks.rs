//! Node processors of the dense nest: the residual CBAM block, the
//! three-operand merge, and the ACmix convolution/self-attention block.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::layers::{ChannelNorm, Conv2d};
use crate::params::{Init, ParamBuilder, ParamId};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Operands of a grid node after nothing has been resampled yet.
#[derive(Clone, Copy, Debug)]
pub struct NodeInputs {
    /// `F(i, j-1)`, already at row resolution and width.
    pub same_row_prev: Var,
    /// `F(i-1, j)`, twice the row resolution.
    pub shallower: Option<Var>,
    /// `F(i+1, j-1)`, half the row resolution.
    pub deeper: Option<Var>,
}

/// Channel attention: `x * sigmoid(mlp(avg(x)) + mlp(max(x)))`.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub fc1: Conv2d,
    pub fc2: Conv2d,
}

impl ChannelAttention {
    pub const REDUCTION: usize = 16;

    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        let hidden = (channels / Self::REDUCTION).max(1);
        let mut s = b.scope(name);
        Self {
            fc1: Conv2d::pointwise(&mut s, "fc1", channels, hidden, false),
            fc2: Conv2d::pointwise(&mut s, "fc2", hidden, channels, false),
        }
    }

    fn mlp(&self, t: &mut Tape, v: Var) -> Var {
        let c = t.shape(v)[0];
        let v = t.reshape(v, &[c, 1, 1]);
        let h = self.fc1.forward(t, v);
        let h = t.relu(h);
        let o = self.fc2.forward(t, h);
        t.reshape(o, &[c])
    }

    /// Gate values `[C]` for `x`.
    pub fn gate(&self, t: &mut Tape, x: Var) -> Var {
        let avg = t.global_avg_pool(x);
        let max = t.global_max_pool(x);
        let a = self.mlp(t, avg);
        let m = self.mlp(t, max);
        let s = t.add(a, m);
        t.sigmoid(s)
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let g = self.gate(t, x);
        t.mul_channel(x, g)
    }
}

/// Spatial attention: `x * sigmoid(conv7x7([mean_c(x), max_c(x)]))`.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub conv: Conv2d,
}

impl SpatialAttention {
    pub fn new(b: &mut ParamBuilder, name: &str) -> Self {
        Self {
            conv: Conv2d::new(b, name, 2, 1, 7, 1, 3, 1, false),
        }
    }

    pub fn gate(&self, t: &mut Tape, x: Var) -> Var {
        let mean = t.channel_mean(x);
        let max = t.channel_max(x);
        let both = t.concat(&[mean, max]);
        let s = self.conv.forward(t, both);
        t.sigmoid(s)
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let g = self.gate(t, x);
        t.mul_spatial(x, g)
    }
}

/// Residual CBAM block `y = x + SA(CA(body(x)))`, with
/// `body = conv3x3 -> [norm] -> relu -> conv3x3 -> [norm]`.
#[derive(Clone, Debug)]
pub struct Rcb {
    pub conv1: Conv2d,
    pub norm1: Option<ChannelNorm>,
    pub conv2: Conv2d,
    pub norm2: Option<ChannelNorm>,
    pub ca: ChannelAttention,
    pub sa: SpatialAttention,
}

impl Rcb {
    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize, norm: bool) -> Self {
        let mut s = b.scope(name);
        Self {
            conv1: Conv2d::same3(&mut s, "conv1", channels, channels, true),
            norm1: norm.then(|| ChannelNorm::new(&mut s, "norm1", channels)),
            conv2: Conv2d::same3(&mut s, "conv2", channels, channels, true),
            norm2: norm.then(|| ChannelNorm::new(&mut s, "norm2", channels)),
            ca: ChannelAttention::new(&mut s, "ca", channels),
            sa: SpatialAttention::new(&mut s, "sa"),
        }
    }

    pub fn body(&self, t: &mut Tape, x: Var) -> Var {
        let mut h = self.conv1.forward(t, x);
        if let Some(n) = &self.norm1 {
            h = n.forward(t, h);
        }
        h = t.relu(h);
        h = self.conv2.forward(t, h);
        if let Some(n) = &self.norm2 {
            h = n.forward(t, h);
        }
        h
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let h = self.body(t, x);
        let h = self.ca.forward(t, h);
        let h = self.sa.forward(t, h);
        t.add(x, h)
    }
}

/// Bilinear upsampling by the resolution ratio of two rows followed by a
/// 1x1 channel map to the target row's width.
#[derive(Clone, Debug)]
pub struct Up {
    pub conv: Conv2d,
    pub factor: usize,
}

impl Up {
    pub fn new(b: &mut ParamBuilder, name: &str, cin: usize, cout: usize, factor: usize) -> Self {
        Self {
            conv: Conv2d::pointwise(b, name, cin, cout, true),
            factor,
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let s = t.shape(x);
        let (h, w) = (s[1] * self.factor, s[2] * self.factor);
        let u = t.bilinear(x, h, w);
        self.conv.forward(t, u)
    }
}

/// `UP` from row `source_row` (width `source_channels`) to a shallower
/// `target_row`; same-row targets pass through.
pub fn up(
    b: &mut ParamBuilder,
    name: &str,
    source_row: usize,
    source_channels: usize,
    target_row: usize,
    target_channels: usize,
) -> Result<Option<Up>> {
    if target_row > source_row {
        return Err(Error::Usage(format!(
            "cannot upsample row {source_row} to deeper row {target_row}"
        )));
    }
    if target_row == source_row {
        return Ok(None);
    }
    let factor = 1 << (source_row - target_row);
    Ok(Some(Up::new(b, name, source_channels, target_channels, factor)))
}

/// `KEEP`: identity.
pub fn keep(x: Var) -> Var {
    x
}

/// Aligns the three operands of a node to row `i` and merges them with a
/// 1x1 convolution over their channel concatenation.
#[derive(Clone, Debug)]
pub struct MergeConv {
    pub down: Option<Conv2d>,
    pub up: Option<Up>,
    pub fuse: Conv2d,
    pub norm: Option<ChannelNorm>,
    pub channels: usize,
}

impl MergeConv {
    /// `shallower` / `deeper` give the channel widths of the optional operands.
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        channels: usize,
        shallower: Option<usize>,
        deeper: Option<usize>,
        norm: bool,
    ) -> Self {
        let mut s = b.scope(name);
        let down = shallower.map(|c| Conv2d::pointwise(&mut s, "down", c, channels, true));
        let up = deeper.map(|c| Up::new(&mut s, "up", c, channels, 2));
        let parts = 1 + down.is_some() as usize + up.is_some() as usize;
        Self {
            fuse: Conv2d::pointwise(&mut s, "fuse", parts * channels, channels, true),
            norm: norm.then(|| ChannelNorm::new(&mut s, "norm", channels)),
            down,
            up,
            channels,
        }
    }

    pub fn forward(&self, t: &mut Tape, inputs: &NodeInputs) -> Result<Var> {
        let base = t.shape(inputs.same_row_prev).to_vec();
        let mut parts = Vec::with_capacity(3);
        if let (Some(conv), Some(x)) = (&self.down, inputs.shallower) {
            let p = t.max_pool2(x);
            parts.push(conv.forward(t, p));
        }
        parts.push(keep(inputs.same_row_prev));
        if let (Some(up), Some(x)) = (&self.up, inputs.deeper) {
            parts.push(up.forward(t, x));
        }
        let expected = 1 + self.down.is_some() as usize + self.up.is_some() as usize;
        if parts.len() != expected {
            return Err(Error::Invariant(format!(
                "merge expects {expected} operands, got {}",
                parts.len()
            )));
        }
        for &p in &parts {
            let s = t.shape(p);
            if s[0] != self.channels || s[1..] != base[1..] {
                return Err(Error::Invariant(format!(
                    "aligned operand {s:?} does not match row shape {base:?}"
                )));
            }
        }
        let cat = if parts.len() == 1 { parts[0] } else { t.concat(&parts) };
        let merged = self.fuse.forward(t, cat);
        Ok(match &self.norm {
            Some(n) => n.forward(t, merged),
            None => merged,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AcmixFuse {
    Concat,
    Add,
}

/// Number of spatial shifts of the 3x3 aggregation kernel.
const SHIFTS: usize = 9;

/// ACmix: shared 1x1 q/k/v projections feeding a shift-aggregation
/// convolution path and a global multi-head self-attention path.
#[derive(Clone, Debug)]
pub struct Acmix {
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
    /// `[9, 3 * heads]` recombination of the projected head groups.
    pub fc: ParamId,
    /// Grouped 3x3 conv, `groups = head_dim`, initialized to the shift kernels.
    pub dep_conv: Conv2d,
    pub fuse_conv: Option<Conv2d>,
    pub fuse: AcmixFuse,
    pub activation: bool,
    pub channels: usize,
    pub heads: usize,
}

impl Acmix {
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        channels: usize,
        heads: usize,
        fuse: AcmixFuse,
        activation: bool,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::Config(format!(
                "acmix heads {heads} do not divide {channels} channels"
            )));
        }
        let d = channels / heads;
        let mut s = b.scope(name);
        let q = Conv2d::pointwise(&mut s, "q", channels, channels, true);
        let k = Conv2d::pointwise(&mut s, "k", channels, channels, true);
        let v = Conv2d::pointwise(&mut s, "v", channels, channels, true);
        let fc = s.param("fc.weight", &[SHIFTS, 3 * heads], Init::FanInUniform { fan_in: 3 * heads });
        let dep_conv = Conv2d::new(&mut s, "dep_conv", SHIFTS * d, channels, 3, 1, 1, d, true);
        let mut shift = Tensor::zeros(&[channels, SHIFTS, 3, 3]);
        for o in 0..channels {
            for sh in 0..SHIFTS {
                shift.data_mut()[(o * SHIFTS + sh) * 9 + sh] = 1.0;
            }
        }
        *s.value_mut(dep_conv.weight) = shift;
        let fuse_conv = (fuse == AcmixFuse::Concat)
            .then(|| Conv2d::pointwise(&mut s, "fuse", 2 * channels, channels, true));
        Ok(Self {
            q,
            k,
            v,
            fc,
            dep_conv,
            fuse_conv,
            fuse,
            activation,
            channels,
            heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    /// Shared projections `(q, k, v)`, each `[C, h, w]`.
    pub fn project(&self, t: &mut Tape, f: Var) -> (Var, Var, Var) {
        (self.q.forward(t, f), self.k.forward(t, f), self.v.forward(t, f))
    }

    /// Convolution path on projected features.
    pub fn conv_path(&self, t: &mut Tape, q: Var, k: Var, v: Var) -> Var {
        let s = t.shape(q).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let (heads, d, hw) = (self.heads, self.head_dim(), h * w);
        // [3*heads, d*hw]: group g = (which of q/k/v) * heads + head
        let all = t.concat(&[q, k, v]);
        let all = t.reshape(all, &[3 * heads, d * hw]);
        let fc = t.param(self.fc);
        let mixed = t.matmul(fc, all, false, false); // [9, d*hw]
        // to channel order e*9 + shift
        let mut idx = Vec::with_capacity(SHIFTS * d * hw);
        for e in 0..d {
            for sh in 0..SHIFTS {
                let base = (sh * d + e) * hw;
                idx.extend((0..hw).map(|p| (base + p) as u32));
            }
        }
        let grouped = t.gather(mixed, idx, &[d * SHIFTS, h, w]);
        let out = self.dep_conv.forward(t, grouped);
        debug_assert_eq!(t.shape(out)[0], c);
        out
    }

    /// Global multi-head scaled dot-product self-attention on projected features.
    pub fn attention_path(&self, t: &mut Tape, q: Var, k: Var, v: Var) -> Var {
        let s = t.shape(q).to_vec();
        let (heads, d, hw) = (self.heads, self.head_dim(), s[1] * s[2]);
        let q = t.reshape(q, &[heads, d, hw]);
        let k = t.reshape(k, &[heads, d, hw]);
        let v = t.reshape(v, &[heads, d, hw]);
        let logits = t.matmul(q, k, true, false); // [heads, hw, hw]
        let logits = t.scale(logits, 1.0 / libm::sqrtf(d as f32));
        let weights = t.softmax(logits);
        let out = t.matmul(v, weights, false, true); // [heads, d, hw]
        t.reshape(out, &s)
    }

    /// `fuse(a_c(f), a_t(f))` for an already merged node input `f`.
    pub fn forward_merged(&self, t: &mut Tape, f: Var) -> Var {
        let (q, k, v) = self.project(t, f);
        let ac = self.conv_path(t, q, k, v);
        let at = self.attention_path(t, q, k, v);
        self.combine(t, ac, at)
    }

    pub fn combine(&self, t: &mut Tape, ac: Var, at: Var) -> Var {
        let out = match (&self.fuse_conv, self.fuse) {
            (Some(conv), AcmixFuse::Concat) => {
                let cat = t.concat(&[ac, at]);
                conv.forward(t, cat)
            }
            _ => t.add(ac, at),
        };
        if self.activation {
            t.relu(out)
        } else {
            out
        }
    }
}

/// Merge followed by ACmix: the AB node processor.
#[derive(Clone, Debug)]
pub struct AcmixBlock {
    pub merge: MergeConv,
    pub acmix: Acmix,
}

impl AcmixBlock {
    pub fn forward(&self, t: &mut Tape, inputs: &NodeInputs) -> Result<Var> {
        let f = self.merge.forward(t, inputs)?;
        Ok(self.acmix.forward_merged(t, f))
    }
}

/// Merge followed by a residual CBAM block.
#[derive(Clone, Debug)]
pub struct RcbNode {
    pub merge: MergeConv,
    pub rcb: Rcb,
}

impl RcbNode {
    pub fn forward(&self, t: &mut Tape, inputs: &NodeInputs) -> Result<Var> {
        let f = self.merge.forward(t, inputs)?;
        Ok(self.rcb.forward(t, f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build<T>(f: impl FnOnce(&mut ParamBuilder) -> T) -> (ParamStore, T) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let out = f(&mut ParamBuilder::new(&mut store, &mut rng));
        (store, out)
    }

    #[test]
    fn dep_conv_starts_as_shift_kernels() {
        let (store, a) = build(|b| Acmix::new(b, "ab", 8, 4, AcmixFuse::Concat, false).unwrap());
        let w = store.get(a.dep_conv.weight);
        assert_eq!(w.shape(), &[8, 9, 3, 3]);
        assert_eq!(w.sum(), 8.0 * 9.0);
        assert_eq!(w.data()[4 * 9 + 4], 1.0);
    }

    #[test]
    fn up_rejects_deeper_targets_and_passes_same_row() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        assert!(matches!(up(&mut b, "u", 1, 8, 2, 16), Err(Error::Usage(_))));
        assert!(up(&mut b, "u", 2, 8, 2, 8).unwrap().is_none());
        assert_eq!(up(&mut b, "u", 3, 64, 0, 8).unwrap().unwrap().factor, 8);
    }
}
