//! Small parameterized layers shared by all streams.
//!
//! Weights use the uniform `1/sqrt(fan_in)` initialization; norm scales start at
//! one and shifts at zero.

use hrtnet_tensor::Var;

use crate::error::Result;
use crate::params::{Builder, Ctx, ParamId};

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// Padding is `kernel / 2`, so odd kernels at stride 1 preserve size.
    pub fn new(b: &mut Builder, cin: usize, cout: usize, kernel: usize, stride: usize, bias: bool) -> Self {
        let bound = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
        let weight = b.uniform("weight", &[cout, cin, kernel, kernel], bound);
        let bias = bias.then(|| b.uniform("bias", &[cout], bound));
        Conv {
            weight,
            bias,
            cin,
            cout,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    /// Biased conv whose bias starts at zero.
    pub fn zero_bias(b: &mut Builder, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        let bound = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
        Conv {
            weight: b.uniform("weight", &[cout, cin, kernel, kernel], bound),
            bias: Some(b.zeros("bias", &[cout])),
            cin,
            cout,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.p(self.weight);
        let b = self.bias.map(|id| cx.p(id));
        Ok(cx.tape.conv2d(x, w, b, self.stride, self.pad)?)
    }

    pub fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// Per-sample, per-channel normalization with affine parameters.
#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl InstanceNorm {
    pub fn new(b: &mut Builder, channels: usize) -> Self {
        InstanceNorm {
            gamma: b.ones("gamma", &[channels]),
            beta: b.zeros("beta", &[channels]),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let (g, b) = (cx.p(self.gamma), cx.p(self.beta));
        Ok(cx.tape.instance_norm(x, g, b)?)
    }
}

/// Bias-free conv, instance norm, optional GELU.
#[derive(Clone, Debug)]
pub struct ConvNorm {
    pub conv: Conv,
    pub norm: InstanceNorm,
    pub act: bool,
}

impl ConvNorm {
    pub fn new(b: &mut Builder, cin: usize, cout: usize, kernel: usize, stride: usize, act: bool) -> Self {
        ConvNorm {
            conv: Conv::new(&mut b.sub("conv"), cin, cout, kernel, stride, false),
            norm: InstanceNorm::new(&mut b.sub("norm"), cout),
            act,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.conv.forward(cx, x)?;
        let y = self.norm.forward(cx, y)?;
        if self.act {
            Ok(cx.tape.gelu(y)?)
        } else {
            Ok(y)
        }
    }
}

/// Token-wise affine map; weight is stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(b: &mut Builder, din: usize, dout: usize) -> Self {
        let bound = 1.0 / (din as f64).sqrt();
        Linear {
            weight: b.uniform("weight", &[din, dout], bound),
            bias: Some(b.uniform("bias", &[dout], bound)),
            din,
            dout,
        }
    }

    pub fn without_bias(b: &mut Builder, din: usize, dout: usize) -> Self {
        Linear {
            weight: b.uniform("weight", &[din, dout], 1.0 / (din as f64).sqrt()),
            bias: None,
            din,
            dout,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.p(self.weight);
        let b = self.bias.map(|id| cx.p(id));
        Ok(cx.tape.linear(x, w, b)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, dim: usize) -> Self {
        LayerNorm {
            gamma: b.ones("gamma", &[dim]),
            beta: b.zeros("beta", &[dim]),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let (g, b) = (cx.p(self.gamma), cx.p(self.beta));
        Ok(cx.tape.layer_norm(x, g, b)?)
    }
}

/// Two-layer GELU feed-forward on the last axis.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(b: &mut Builder, dim: usize, hidden: usize) -> Self {
        FeedForward {
            fc1: Linear::new(&mut b.sub("fc1"), dim, hidden),
            fc2: Linear::new(&mut b.sub("fc2"), hidden, dim),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.fc1.forward(cx, x)?;
        let h = cx.tape.gelu(h)?;
        self.fc2.forward(cx, h)
    }
}

/// `norm(x + y)`: the post-norm residual used by every transformer sub-layer.
pub fn add_norm(cx: &mut Ctx, norm: &LayerNorm, x: Var, y: Var) -> Result<Var> {
    let s = cx.tape.add(x, y)?;
    norm.forward(cx, s)
}
