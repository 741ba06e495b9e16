//! Small building blocks shared by every trunk and head.

use candle_core::{Tensor, D};

use super::conv::conv2d;
use super::params::Scope;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    /// Square-kernel convolution with "same" zero padding for odd `kernel`.
    pub fn new(
        scope: &mut Scope<'_>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = cin * kernel * kernel;
        let weight = scope.uniform_fan_in("weight", &[cout, cin, kernel, kernel], fan_in)?;
        let bias = if bias { Some(scope.uniform_fan_in("bias", &[cout], fan_in)?) } else { None };
        Ok(Self { weight, bias, stride, pad: kernel / 2 })
    }

    /// Same as [`Conv2d::new`] but with all weights and bias at zero.
    pub fn zeroed(
        scope: &mut Scope<'_>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let weight = scope.zeros("weight", &[cout, cin, kernel, kernel])?;
        let bias = Some(scope.zeros("bias", &[cout])?);
        Ok(Self { weight, bias, stride, pad: kernel / 2 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight, self.stride, self.pad)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(scope: &mut Scope<'_>, din: usize, dout: usize) -> Result<Self> {
        let weight = scope.uniform_fan_in("weight", &[dout, din], din)?;
        let bias = scope.uniform_fan_in("bias", &[dout], din)?;
        Ok(Self { weight, bias })
    }

    pub fn zeroed(scope: &mut Scope<'_>, din: usize, dout: usize) -> Result<Self> {
        let weight = scope.zeros("weight", &[dout, din])?;
        let bias = scope.zeros("bias", &[dout])?;
        Ok(Self { weight, bias })
    }

    /// Applies the map to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(y.broadcast_add(&self.bias)?)
    }
}

/// Per-pixel normalisation across channels of a (B, C, H, W) map. Purely
/// local, so it never leaks information between spatial positions.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl ChannelNorm {
    pub fn new(scope: &mut Scope<'_>, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: scope.ones("gamma", &[channels])?,
            beta: scope.zeros("beta", &[channels])?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        let mean = x.mean_keepdim(1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let g = self.gamma.reshape((1, c, 1, 1))?;
        let b = self.beta.reshape((1, c, 1, 1))?;
        Ok(normed.broadcast_mul(&g)?.broadcast_add(&b)?)
    }
}

/// Layer normalisation over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(scope: &mut Scope<'_>, dim: usize) -> Result<Self> {
        Ok(Self { gamma: scope.ones("gamma", &[dim])?, beta: scope.zeros("beta", &[dim])?, eps: 1e-5 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Channel gating from globally pooled statistics.
#[derive(Debug, Clone)]
pub struct SqueezeExcite {
    reduce: Conv2d,
    expand: Conv2d,
}

impl SqueezeExcite {
    pub fn new(scope: &mut Scope<'_>, channels: usize, squeeze: usize) -> Result<Self> {
        let squeeze = squeeze.max(1);
        Ok(Self {
            reduce: Conv2d::new(&mut scope.sub("reduce"), channels, squeeze, 1, 1, true)?,
            expand: Conv2d::new(&mut scope.sub("expand"), squeeze, channels, 1, 1, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.mean_keepdim(3)?.mean_keepdim(2)?;
        let s = self.reduce.forward(&s)?.silu()?;
        let s = candle_nn::ops::sigmoid(&self.expand.forward(&s)?)?;
        Ok(x.broadcast_mul(&s)?)
    }
}
