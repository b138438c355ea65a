//! Parameterized building blocks shared across the network.

use crate::params::{Init, ParamBuilder, ParamId};
use crate::tape::{Tape, Var};

/// 2-D convolution with optional bias, PyTorch-style fan-in initialization.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        let mut s = b.scope(name);
        let fan_in = in_channels / groups * kernel * kernel;
        let weight = s.param(
            "weight",
            &[out_channels, in_channels / groups, kernel, kernel],
            Init::FanInUniform { fan_in },
        );
        let bias = bias.then(|| s.param("bias", &[out_channels], Init::FanInUniform { fan_in }));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            groups,
        }
    }

    /// 1x1 convolution, i.e. a per-position linear map over channels.
    pub fn pointwise(b: &mut ParamBuilder, name: &str, cin: usize, cout: usize, bias: bool) -> Self {
        Self::new(b, name, cin, cout, 1, 1, 0, 1, bias)
    }

    /// Same-size 3x3 convolution.
    pub fn same3(b: &mut ParamBuilder, name: &str, cin: usize, cout: usize, bias: bool) -> Self {
        Self::new(b, name, cin, cout, 3, 1, 1, 1, bias)
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let w = t.param(self.weight);
        let y = t.conv2d(x, w, self.stride, self.pad, self.groups);
        match self.bias {
            Some(b) => {
                let b = t.param(b);
                t.add_channel_bias(y, b)
            }
            None => y,
        }
    }
}

/// Normalization over channels at every spatial position.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f32,
}

impl ChannelNorm {
    pub const EPS: f32 = 1e-5;

    pub fn new(b: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        let mut s = b.scope(name);
        Self {
            gamma: s.param("gamma", &[channels], Init::Ones),
            beta: s.param("beta", &[channels], Init::Zeros),
            eps: Self::EPS,
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        let g = t.param(self.gamma);
        let b = t.param(self.beta);
        t.layer_norm(x, g, b, self.eps)
    }
}
