use crate::tensor::kernels::{PadMode, PoolMode};
use crate::tensor::{invalid, mismatch, Real, Result, Var};

use super::layers::Conv2d;
use super::params::{Bound, Init, ParamBuilder, ParamId};

pub const CBAM_REDUCTION: usize = 16;
const CBAM_MIN_HIDDEN: usize = 4;
const SPATIAL_KERNEL: usize = 7;

/// Channel-then-spatial attention gate.
#[derive(Debug, Clone)]
pub struct Cbam {
    pub channels: usize,
    pub hidden: usize,
    pub fc1: Conv2d,
    pub fc2: Conv2d,
    pub spatial: Conv2d,
}

impl Cbam {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        if channels < 2 {
            return Err(invalid("cbam", format!("`{name}` needs at least 2 channels, got {channels}")));
        }
        if reduction == 0 {
            return Err(invalid("cbam", "reduction ratio must be positive"));
        }
        let hidden = (channels / reduction).max(CBAM_MIN_HIDDEN).min(channels);
        let mut pb = pb.scope(name);
        Ok(Self {
            channels,
            hidden,
            fc1: Conv2d::new(&mut pb, "fc1", channels, hidden, 1, 1, true, PadMode::Zeros)?,
            fc2: Conv2d::new(&mut pb, "fc2", hidden, channels, 1, 1, true, PadMode::Zeros)?,
            spatial: Conv2d::new(&mut pb, "spatial", 2, 1, SPATIAL_KERNEL, 1, true, PadMode::Replicate)?,
        })
    }

    /// Channel gate in (0,1), shape `[n, c]`.
    pub fn channel_gate<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        let (n, c) = (s[0], s[1]);
        let mlp = |v: Var<'t, T>| -> Result<Var<'t, T>> {
            let v = v.reshape(&[n, c, 1, 1])?;
            let h = self.fc1.forward(p, v)?.relu();
            self.fc2.forward(p, h)?.reshape(&[n, c])
        };
        let avg = mlp(x.global_pool(PoolMode::Avg)?)?;
        let max = mlp(x.global_pool(PoolMode::Max)?)?;
        Ok(avg.add(max)?.sigmoid())
    }

    /// Spatial gate in (0,1), shape `[n, 1, h, w]`.
    pub fn spatial_gate<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let pooled = Var::concat(&[x.channel_pool(PoolMode::Avg)?, x.channel_pool(PoolMode::Max)?])?;
        Ok(self.spatial.forward(p, pooled)?.sigmoid())
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.channels {
            return Err(mismatch("cbam", "channels", format!("expected {} channels, got {s:?}", self.channels)));
        }
        let x = x.mul(self.channel_gate(p, x)?)?;
        x.mul(self.spatial_gate(p, x)?)
    }
}

/// Odd 1-D kernel size of an efficient-channel-attention conv over `channels`.
pub fn eca_kernel_size(channels: usize) -> usize {
    let t = ((channels.max(1) as f64).log2() / 2.0 + 0.5).abs() as usize;
    let k = if t % 2 == 1 { t } else { t + 1 };
    k.max(3)
}

/// Temporal fusion attention: pairwise-softmax channel and spatial weights
/// arbitrate between two feature maps of equal shape.
#[derive(Debug, Clone)]
pub struct Tfam {
    pub channels: usize,
    pub eca_k: usize,
    /// 1-D convs `[1, 4, k]` producing the first and second channel logits.
    pub channel_conv: [ParamId; 2],
    /// 2-D convs `[1, 4, 7, 7]` producing the first and second spatial logits.
    pub spatial_conv: [ParamId; 2],
}

/// Intermediate weights of one TFAM evaluation.
#[derive(Debug, Clone, Copy)]
pub struct TfamWeights<'t, T: Real> {
    /// Channel weights `[n, c]` for the first and second input.
    pub channel: (Var<'t, T>, Var<'t, T>),
    /// Spatial weights `[n, 1, h, w]` for the first and second input.
    pub spatial: (Var<'t, T>, Var<'t, T>),
    /// Pooled channel descriptor `[n, 4, c]`.
    pub s_c: Var<'t, T>,
    /// Pooled spatial descriptor `[n, 4, h, w]`.
    pub s_s: Var<'t, T>,
}

impl Tfam {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(invalid("tfam", format!("`{name}` needs channels")));
        }
        let k = eca_kernel_size(channels);
        let mut pb = pb.scope(name);
        let cfan = Init::FanIn(4 * k);
        let sfan = Init::FanIn(4 * SPATIAL_KERNEL * SPATIAL_KERNEL);
        let s = SPATIAL_KERNEL;
        Ok(Self {
            channels,
            eca_k: k,
            channel_conv: [
                pb.tensor("channel_conv1", &[1, 4, k], cfan)?,
                pb.tensor("channel_conv2", &[1, 4, k], cfan)?,
            ],
            spatial_conv: [
                pb.tensor("spatial_conv1", &[1, 4, s, s], sfan)?,
                pb.tensor("spatial_conv2", &[1, 4, s, s], sfan)?,
            ],
        })
    }

    pub fn weights<'t, T: Real>(&self, p: &Bound<'t, T>, t1: Var<'t, T>, t2: Var<'t, T>) -> Result<TfamWeights<'t, T>> {
        let (s1, s2) = (t1.shape(), t2.shape());
        if s1 != s2 {
            return Err(mismatch("tfam", "shape", format!("{s1:?} vs {s2:?}")));
        }
        if s1.len() != 4 || s1[1] != self.channels {
            return Err(mismatch("tfam", "channels", format!("expected {} channels, got {s1:?}", self.channels)));
        }
        let (n, c) = (s1[0], s1[1]);
        let row = |v: Var<'t, T>, mode| -> Result<Var<'t, T>> { v.global_pool(mode)?.reshape(&[n, 1, c]) };
        let s_c = Var::concat(&[
            row(t1, PoolMode::Avg)?,
            row(t1, PoolMode::Max)?,
            row(t2, PoolMode::Avg)?,
            row(t2, PoolMode::Max)?,
        ])?;
        let pad = self.eca_k / 2;
        let logit_c = |id: ParamId| -> Result<Var<'t, T>> { s_c.conv1d(p[id], None, pad)?.reshape(&[n, c]) };
        let channel = logit_c(self.channel_conv[0])?.softmax_pair(logit_c(self.channel_conv[1])?)?;

        let s_s = Var::concat(&[
            t1.channel_pool(PoolMode::Avg)?,
            t1.channel_pool(PoolMode::Max)?,
            t2.channel_pool(PoolMode::Avg)?,
            t2.channel_pool(PoolMode::Max)?,
        ])?;
        let logit_s = |id: ParamId| s_s.conv2d_padded(p[id], None, 1, SPATIAL_KERNEL / 2, PadMode::Replicate);
        let spatial = logit_s(self.spatial_conv[0])?.softmax_pair(logit_s(self.spatial_conv[1])?)?;
        Ok(TfamWeights {
            channel,
            spatial,
            s_c,
            s_s,
        })
    }

    pub fn forward_traced<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        t1: Var<'t, T>,
        t2: Var<'t, T>,
    ) -> Result<(Var<'t, T>, TfamWeights<'t, T>)> {
        let w = self.weights(p, t1, t2)?;
        let first = t1.mul(w.channel.0)?.add(t1.mul(w.spatial.0)?)?;
        let second = t2.mul(w.channel.1)?.add(t2.mul(w.spatial.1)?)?;
        Ok((first.add(second)?, w))
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, t1: Var<'t, T>, t2: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.forward_traced(p, t1, t2)?.0)
    }
}
