use candle_core::{DType, Tensor, D};

use super::{Init, ParamStore};
use crate::error::{Error, Result};

/// 2-D convolution with optional channel groups. Weights are laid out
/// `(out, in / groups, k, k)`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
    ) -> Result<Self> {
        let fan_in = c_in / groups.max(1) * kernel * kernel;
        Self::with_init(
            ps,
            name,
            c_in,
            c_out,
            kernel,
            stride,
            groups,
            Init::KaimingNormal { fan_in },
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_init(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        init: Init,
    ) -> Result<Self> {
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::shape(format!(
                "{name}: channels {c_in}->{c_out} not divisible into {groups} groups"
            )));
        }
        let weight = ps.var(
            &format!("{name}.weight"),
            &[c_out, c_in / groups, kernel, kernel],
            init,
        )?;
        let bias = ps.var(&format!("{name}.bias"), &[c_out], Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
            groups,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1] * self.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.in_channels() {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels()
            )));
        }
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, self.groups)?;
        let b = self.bias.reshape((1, self.out_channels(), 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

/// Affine map over the last axis: `x W^T + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_init(ps, name, d_in, d_out, Init::KaimingNormal { fan_in: d_in })
    }

    pub fn with_init(
        ps: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
    ) -> Result<Self> {
        let weight = ps.var(&format!("{name}.weight"), &[d_out, d_in], init)?;
        let bias = ps.var(&format!("{name}.bias"), &[d_out], Init::Zeros)?;
        Ok(Self { weight, bias })
    }

    pub fn in_features(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.dims()[0]
    }

    /// `x` is `(batch, in)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, d) = x.dims2()?;
        if d != self.in_features() {
            return Err(Error::shape(format!(
                "linear expects {} features, got {d}",
                self.in_features()
            )));
        }
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Group normalization over `(C / groups, H, W)` with per-channel affine.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::shape(format!(
                "{name}: {channels} channels not divisible into {groups} groups"
            )));
        }
        Ok(Self {
            groups,
            gamma: ps.var(&format!("{name}.weight"), &[channels], Init::Ones)?,
            beta: ps.var(&format!("{name}.bias"), &[channels], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(2)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(2)?;
        let normed = centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .reshape((b, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

/// Layer normalization across channels, independently at every spatial
/// location of a `(B, C, H, W)` map.
#[derive(Clone, Debug)]
pub struct ChannelLayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl ChannelLayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.var(&format!("{name}.weight"), &[channels], Init::Ones)?,
            beta: ps.var(&format!("{name}.bias"), &[channels], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        let mean = x.mean_keepdim(1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

/// Nearest-neighbour 2x upsampling of a `(B, C, H, W)` map.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?)
}

/// Average pooling with an `s x s` window and stride `s`.
pub fn avg_pool(x: &Tensor, s: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::shape(format!(
            "cannot pool {h}x{w} map with ratio {s}"
        )));
    }
    if s == 1 {
        return Ok(x.clone());
    }
    Ok(x.reshape((b, c, h / s, s, w / s, s))?
        .mean(5)?
        .mean(3)?)
}

/// Spatial mean of a `(B, C, H, W)` map, giving `(B, C)`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.mean(2)?)
}

/// Softmax over the last axis. The max shift is detached; the result does
/// not depend on it.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// `log(sum(exp(x)))` over the last axis, keeping the axis.
pub fn log_sum_exp_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let s = x.broadcast_sub(&m)?.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(s.broadcast_add(&m)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    // 1 / (1 + exp(-x)), written with differentiable primitives.
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

pub fn scalar_zero(dtype: DType, like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::zeros((), dtype, like.device())?)
}
