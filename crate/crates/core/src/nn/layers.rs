use crate::tensor::kernels::PadMode;
use crate::tensor::{invalid, Real, Result, Var};

use super::params::{Bound, Init, ParamBuilder, ParamId};

/// Square-kernel 2-D convolution with "same" padding for stride 1.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub mode: PadMode,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
        mode: PadMode,
    ) -> Result<Self> {
        if cin == 0 || cout == 0 {
            return Err(invalid("conv2d", format!("`{name}` needs nonzero channels, got {cin}->{cout}")));
        }
        let mut pb = pb.scope(name);
        let fan_in = cin * k * k;
        let weight = pb.tensor("weight", &[cout, cin, k, k], Init::FanIn(fan_in))?;
        let bias = if bias {
            Some(pb.tensor("bias", &[cout], Init::FanIn(fan_in))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            cin,
            cout,
            k,
            stride,
            mode,
        })
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv2d_padded(p[self.weight], self.bias.map(|b| p[b]), self.stride, self.k / 2, self.mode)
    }

    pub fn param_count(&self) -> usize {
        self.cout * self.cin * self.k * self.k + if self.bias.is_some() { self.cout } else { 0 }
    }
}

/// Largest divisor of `channels` that does not exceed eight.
pub fn norm_group_size(channels: usize) -> usize {
    (1..=channels.min(8)).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

/// Group normalization with learnable per-channel scale and shift.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

impl GroupNorm {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        let mut pb = pb.scope(name);
        Ok(Self {
            gamma: pb.tensor("gamma", &[channels], Init::Const(1.0))?,
            beta: pb.tensor("beta", &[channels], Init::Const(0.0))?,
            channels,
        })
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.group_norm(p[self.gamma], p[self.beta], norm_group_size(self.channels))
    }
}

/// Bias-free convolution, group normalization, rectifier.
#[derive(Debug, Clone)]
pub struct ConvNormRelu {
    pub conv: Conv2d,
    pub norm: GroupNorm,
}

impl ConvNormRelu {
    pub fn new<T: Real>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Result<Self> {
        let mut pb = pb.scope(name);
        Ok(Self {
            conv: Conv2d::new(&mut pb, "conv", cin, cout, 3, stride, false, PadMode::Replicate)?,
            norm: GroupNorm::new(&mut pb, "norm", cout)?,
        })
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.norm.forward(p, self.conv.forward(p, x)?)?.relu())
    }
}
