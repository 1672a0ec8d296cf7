use crate::tensor::kernels::PadMode;
use crate::tensor::{invalid, mismatch, Real, Result, Var};

use super::attention::{Cbam, CBAM_REDUCTION};
use super::hcu::Hcu;
use super::layers::{Conv2d, ConvNormRelu};
use super::params::{Bound, ParamBuilder};

/// One encoder stage.
#[derive(Debug, Clone)]
pub enum EncoderBlock {
    /// Full-resolution stage: stem conv on the RGB image, then two HCUs.
    First { stem: ConvNormRelu, hcus: [Hcu; 2] },
    /// Downsampling stage: stride-2 HCU, two HCUs, 3×3 conv, optional CBAM.
    Down {
        hcus: [Hcu; 3],
        conv: ConvNormRelu,
        cbam: Option<Cbam>,
    },
}

impl EncoderBlock {
    pub fn first<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, in_channels: usize, width: usize) -> Result<Self> {
        let mut pb = pb.scope(name);
        Ok(Self::First {
            stem: ConvNormRelu::new(&mut pb, "stem", in_channels, width, 1)?,
            hcus: [Hcu::new(&mut pb, "hcu0", width, width, 1)?, Hcu::new(&mut pb, "hcu1", width, width, 1)?],
        })
    }

    pub fn down<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize, cout: usize, cbam: bool) -> Result<Self> {
        if cout < cin {
            return Err(invalid("encoder_block", format!("`{name}` narrows channels {cin}->{cout}")));
        }
        let mut pb = pb.scope(name);
        Ok(Self::Down {
            hcus: [
                Hcu::new(&mut pb, "hcu0", cin, cout, 2)?,
                Hcu::new(&mut pb, "hcu1", cout, cout, 1)?,
                Hcu::new(&mut pb, "hcu2", cout, cout, 1)?,
            ],
            conv: ConvNormRelu::new(&mut pb, "conv", cout, cout, 1)?,
            cbam: if cbam {
                Some(Cbam::new(&mut pb, "cbam", cout, CBAM_REDUCTION)?)
            } else {
                None
            },
        })
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Self::First { hcus, .. } => hcus[1].cout,
            Self::Down { conv, .. } => conv.conv.cout,
        }
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        match self {
            Self::First { stem, hcus } => {
                let x = stem.forward(p, x)?;
                hcus[1].forward(p, hcus[0].forward(p, x)?)
            }
            Self::Down { hcus, conv, cbam } => {
                let mut x = x;
                for h in hcus {
                    x = h.forward(p, x)?;
                }
                let x = conv.forward(p, x)?;
                match cbam {
                    Some(c) => c.forward(p, x),
                    None => Ok(x),
                }
            }
        }
    }
}

/// Decoder stage: upsample the coarse map, project it to the skip width,
/// concatenate with the skip and fuse with two HCUs.
#[derive(Debug, Clone)]
pub struct ChangeBlock {
    pub low: usize,
    pub skip: usize,
    pub project: Conv2d,
    pub hcus: [Hcu; 2],
}

impl ChangeBlock {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, low: usize, skip: usize) -> Result<Self> {
        let mut pb = pb.scope(name);
        Ok(Self {
            low,
            skip,
            project: Conv2d::new(&mut pb, "project", low, skip, 1, 1, true, PadMode::Zeros)?,
            hcus: [Hcu::new(&mut pb, "hcu0", 2 * skip, skip, 1)?, Hcu::new(&mut pb, "hcu1", skip, skip, 1)?],
        })
    }

    pub fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, low: Var<'t, T>, skip: Var<'t, T>) -> Result<Var<'t, T>> {
        let (ls, ss) = (low.shape(), skip.shape());
        if ls.len() != 4 || ss.len() != 4 || ls[0] != ss[0] {
            return Err(mismatch("change_block", "rank", format!("{ls:?} vs {ss:?}")));
        }
        if ls[2] * 2 != ss[2] || ls[3] * 2 != ss[3] {
            return Err(mismatch(
                "change_block",
                "extent",
                format!("low {}x{} must be half of skip {}x{}", ls[2], ls[3], ss[2], ss[3]),
            ));
        }
        let up = self.project.forward(p, low.upsample2x()?)?;
        let x = Var::concat(&[up, skip])?;
        self.hcus[1].forward(p, self.hcus[0].forward(p, x)?)
    }
}
