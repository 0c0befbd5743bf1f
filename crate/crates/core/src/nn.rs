//! Parameterised layers registered in a [`ParamStore`].

use alloc::format;

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{kaiming_uniform, normal, uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Weight initialisation scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Kaiming-uniform for ReLU-followed layers.
    Relu,
    /// Uniform with bound `sqrt(3 / fan_in)` for linear outputs.
    Linear,
    /// Zero-mean normal with the given std.
    Normal(f32),
}

fn init_weight<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize, init: Init) -> Tensor {
    match init {
        Init::Relu => kaiming_uniform(rng, shape, fan_in),
        Init::Linear => uniform(rng, shape, libm::sqrtf(3.0 / fan_in.max(1) as f32)),
        Init::Normal(std) => normal(rng, shape, std),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let shape = [out_channels, in_channels, kernel, kernel];
        let weight = store.insert(&format!("{name}/w"), init_weight(rng, &shape, fan_in, init));
        let bias = store.insert(&format!("{name}/b"), Tensor::zeros(&[out_channels]));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Transposed convolution; weights are `[in, out, k, k]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        // each output sees about in*k*k/stride^2 inputs
        let fan_in = (in_channels * kernel * kernel / (stride * stride)).max(1);
        let shape = [in_channels, out_channels, kernel, kernel];
        let weight = store.insert(&format!("{name}/w"), init_weight(rng, &shape, fan_in, init));
        let bias = store.insert(&format!("{name}/b"), Tensor::zeros(&[out_channels]));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    /// Upsamples to exactly `(out_h, out_w)`, deriving the output padding.
    pub fn forward_to(&self, g: &mut Graph<'_>, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (_, h, w) = g.value(x).chw();
        let base = |n: usize| (n - 1) * self.stride + self.kernel - 2 * self.pad;
        let pad_for = |n: usize, target: usize| {
            target
                .checked_sub(base(n))
                .filter(|p| *p < self.stride.max(1) || *p == 0)
        };
        let (ph, pw) = match (pad_for(h, out_h), pad_for(w, out_w)) {
            (Some(ph), Some(pw)) => (ph, pw),
            _ => {
                return Err(crate::error::invalid(format!(
                    "conv_transpose: cannot map {h}x{w} to {out_h}x{out_w} at stride {}",
                    self.stride
                )))
            }
        };
        let wv = g.param(self.weight);
        let bv = g.param(self.bias);
        g.conv_transpose2d(x, wv, Some(bv), self.stride, self.pad, (ph, pw))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let shape = [out_features, in_features];
        let weight = store.insert(&format!("{name}/w"), init_weight(rng, &shape, in_features, init));
        let bias = store.insert(&format!("{name}/b"), Tensor::zeros(&[out_features]));
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, Some(b))
    }
}
