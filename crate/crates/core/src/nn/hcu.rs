use crate::tensor::kernels::{PadMode, PoolMode};
use crate::tensor::{invalid, Real, Result, Var};

use super::layers::{Conv2d, ConvNormRelu};
use super::params::{Bound, ParamBuilder};

/// Half-convolution unit.
///
/// The first half of the input channels runs through a 3×3 conv, norm and
/// rectifier; the second half is carried as a residual (max-pooled at
/// stride 2, widened by a 1×1 conv when the channel count changes). The two
/// halves are then interleaved channel by channel.
#[derive(Debug, Clone)]
pub struct Hcu {
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub core: ConvNormRelu,
    pub residual: Option<Conv2d>,
}

impl Hcu {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        if !cin.is_multiple_of(2) || !cout.is_multiple_of(2) || cin == 0 || cout == 0 {
            return Err(invalid("hcu", format!("`{name}` needs even channel counts, got {cin}->{cout}")));
        }
        if !(1..=2).contains(&stride) {
            return Err(invalid("hcu", format!("`{name}` stride must be 1 or 2, got {stride}")));
        }
        let mut pb = pb.scope(name);
        let core = ConvNormRelu::new(&mut pb, "core", cin / 2, cout / 2, stride)?;
        let residual = if cin != cout {
            Some(Conv2d::new(&mut pb, "residual", cin / 2, cout / 2, 1, 1, false, PadMode::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            cin,
            cout,
            stride,
            core,
            residual,
        })
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let c = x.shape().get(1).copied().unwrap_or(0);
        if c != self.cin {
            return Err(invalid("hcu", format!("expected {} input channels, got {c}", self.cin)));
        }
        let (xa, xb) = x.split_half()?;
        let processed = self.core.forward(p, xa)?;
        let mut residual = if self.stride == 2 { xb.pool2x2(PoolMode::Max)? } else { xb };
        if let Some(proj) = &self.residual {
            residual = proj.forward(p, residual)?;
        }
        processed.interleave(residual)
    }

    /// Learnable scalars in the 3×3 core convolution.
    pub fn core_conv_params(&self) -> usize {
        self.core.conv.param_count()
    }
}

/// Conventional 3×3 convolution weight count at the same widths.
pub fn full_conv_params(cin: usize, cout: usize) -> usize {
    9 * cin * cout
}

/// Alternating channel exchange between two feature maps: even channels stay,
/// odd channels swap.
pub fn channel_exchange<'t, T: Real>(t1: Var<'t, T>, t2: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let c = t1.shape().get(1).copied().unwrap_or(0);
    if c < 2 {
        return Err(invalid("channel_exchange", format!("needs at least 2 channels, got {c}")));
    }
    Ok((t1.exchange_channels(t2, 0)?, t2.exchange_channels(t1, 0)?))
}
