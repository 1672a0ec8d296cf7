//! Network building blocks. Each block owns [`ParamId`]s into a shared
//! [`ParamStore`] and evaluates against parameters bound to a tape.

mod attention;
mod blocks;
mod hcu;
mod layers;
mod params;

pub use attention::{eca_kernel_size, Cbam, Tfam, TfamWeights, CBAM_REDUCTION};
pub use blocks::{ChangeBlock, EncoderBlock};
pub use hcu::{channel_exchange, full_conv_params, Hcu};
pub use layers::{norm_group_size, Conv2d, ConvNormRelu, GroupNorm};
pub use params::{Bound, Init, ParamBuilder, ParamId, ParamStore};
