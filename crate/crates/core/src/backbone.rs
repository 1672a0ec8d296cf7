//! Full change-detection models: the exchanging dual encoder-decoder (EDED),
//! its non-exchanging ablation (DED), and a single-decoder Siamese baseline
//! (MESD).

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{channel_exchange, Bound, ChangeBlock, Conv2d, EncoderBlock, ParamBuilder, ParamStore, Tfam};
use crate::tensor::kernels::PadMode;
use crate::tensor::{invalid, mismatch, Real, Result, Tape, Tensor, TensorError, Var};

/// Spatial factor between the input and the deepest encoder stage.
pub const DOWNSAMPLE: usize = 32;
pub const STAGES: usize = 5;
/// Narrowest stage width; half-convolution units need at least 4 channels
/// per half for normalization groups to be meaningful.
pub const MIN_STAGE_WIDTH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Eded,
    Ded,
    Mesd,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Eded, Variant::Ded, Variant::Mesd];

    /// Whether the model emits half-resolution branch masks.
    pub fn has_branches(self) -> bool {
        self != Variant::Mesd
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Eded => "EDED",
            Variant::Ded => "DED",
            Variant::Mesd => "MESD",
        })
    }
}

impl FromStr for Variant {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "EDED" => Ok(Variant::Eded),
            "DED" => Ok(Variant::Ded),
            "MESD" => Ok(Variant::Mesd),
            _ => Err(invalid("variant", format!("unknown variant `{s}` (expected EDED, DED or MESD)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Width of the deepest encoder stage.
    pub max_width: usize,
    /// Encoder block (1..=5) whose output is exchanged; EDED only.
    pub exchange_position: usize,
    pub cbam: bool,
    /// Loss weights for the fusion, first-branch and second-branch masks.
    pub loss_weights: [f64; 3],
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Eded,
            max_width: 16,
            exchange_position: 3,
            cbam: true,
            loss_weights: [1.0, 0.5, 0.5],
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn new(variant: Variant, max_width: usize) -> Self {
        Self {
            variant,
            max_width,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_width == 0 || !self.max_width.is_multiple_of(16) {
            return Err(invalid("model_config", format!("max_width must be a positive multiple of 16, got {}", self.max_width)));
        }
        if !(1..=STAGES).contains(&self.exchange_position) {
            return Err(invalid(
                "model_config",
                format!("exchange_position must be in 1..=5, got {}", self.exchange_position),
            ));
        }
        if self.loss_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("model_config", format!("loss weights must be finite and non-negative, got {:?}", self.loss_weights)));
        }
        Ok(())
    }

    /// Encoder widths `[B, 2B, 4B, 8B, 16B]` with `B = max_width / 16`,
    /// each raised to at least [`MIN_STAGE_WIDTH`].
    pub fn stage_widths(&self) -> [usize; STAGES] {
        let base = self.max_width / 16;
        std::array::from_fn(|k| (base << k).max(MIN_STAGE_WIDTH))
    }
}

/// Output masks in (0,1). Branch masks are at half resolution and absent
/// for the single-decoder variant.
#[derive(Debug, Clone, Copy)]
pub struct Masks<'t, T: Real> {
    pub fusion: Var<'t, T>,
    pub t1: Option<Var<'t, T>>,
    pub t2: Option<Var<'t, T>>,
}

#[derive(Debug, Clone)]
struct Head {
    conv: Conv2d,
}

impl Head {
    fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, name: &str, cin: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(pb, name, cin, 1, 1, 1, true, PadMode::Zeros)?,
        })
    }

    fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.conv.forward(p, x)?.sigmoid())
    }
}

#[derive(Debug, Clone)]
enum Decoders {
    Dual {
        /// Shared branch decoder, deepest block first (1/16 → 1/2).
        branch: Vec<ChangeBlock>,
        branch_head: Head,
        /// TFAMs from the deepest scale (index 0) to full resolution.
        tfams: Vec<Tfam>,
        /// Fusion decoder, deepest block first (1/16 → 1/1).
        fusion: Vec<ChangeBlock>,
        fusion_head: Head,
    },
    Single {
        /// Per-scale 1×1 projections of concatenated encoder features, shallow first.
        fuse: Vec<Conv2d>,
        decoder: Vec<ChangeBlock>,
        head: Head,
    },
}

/// A built model: configuration, parameters and wiring.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    encoder: Vec<EncoderBlock>,
    decoders: Decoders,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let widths = config.stage_widths();
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut pb = ParamBuilder::new(&mut params, &mut rng);

        let mut encoder = Vec::with_capacity(STAGES);
        {
            let mut enc = pb.scope("encoder");
            encoder.push(EncoderBlock::first(&mut enc, "block1", 3, widths[0])?);
            for k in 1..STAGES {
                encoder.push(EncoderBlock::down(&mut enc, &format!("block{}", k + 1), widths[k - 1], widths[k], config.cbam)?);
            }
        }

        let decoders = if config.variant.has_branches() {
            let branch = {
                let mut dec = pb.scope("decoder");
                let blocks = (1..STAGES - 1)
                    .rev()
                    .map(|k| ChangeBlock::new(&mut dec, &format!("block{}", k + 1), widths[k + 1], widths[k]))
                    .collect::<Result<Vec<_>>>()?;
                let head = Head::new(&mut dec, "head", widths[1])?;
                (blocks, head)
            };
            let mut fus = pb.scope("fusion");
            let tfams = (0..STAGES)
                .rev()
                .map(|k| Tfam::new(&mut fus, &format!("tfam{}", k + 1), widths[k]))
                .collect::<Result<Vec<_>>>()?;
            let fusion = (0..STAGES - 1)
                .rev()
                .map(|k| ChangeBlock::new(&mut fus, &format!("block{}", k + 1), widths[k + 1], widths[k]))
                .collect::<Result<Vec<_>>>()?;
            let fusion_head = Head::new(&mut fus, "head", widths[0])?;
            Decoders::Dual {
                branch: branch.0,
                branch_head: branch.1,
                tfams,
                fusion,
                fusion_head,
            }
        } else {
            let mut dec = pb.scope("decoder");
            let fuse = (0..STAGES)
                .map(|k| Conv2d::new(&mut dec, &format!("fuse{}", k + 1), 2 * widths[k], widths[k], 1, 1, true, PadMode::Zeros))
                .collect::<Result<Vec<_>>>()?;
            let decoder = (0..STAGES - 1)
                .rev()
                .map(|k| ChangeBlock::new(&mut dec, &format!("block{}", k + 1), widths[k + 1], widths[k]))
                .collect::<Result<Vec<_>>>()?;
            let head = Head::new(&mut dec, "head", widths[0])?;
            Decoders::Single { fuse, decoder, head }
        };

        Ok(Self {
            config,
            params,
            encoder,
            decoders,
        })
    }

    /// Total learnable scalars.
    pub fn count_params(&self) -> usize {
        self.params.total()
    }

    /// Learnable scalars per `component.block` group, in construction order.
    pub fn param_table(&self) -> Vec<(String, usize)> {
        self.params.grouped(2)
    }

    fn check_inputs(t1: &[usize], t2: &[usize]) -> Result<()> {
        const OP: &str = "forward";
        if t1 != t2 {
            return Err(mismatch(OP, "shape", format!("bitemporal inputs differ: {t1:?} vs {t2:?}")));
        }
        if t1.len() != 4 || t1[1] != 3 {
            return Err(mismatch(OP, "channels", format!("expected N x 3 x H x W images, got {t1:?}")));
        }
        for (dim, &e) in [("height", &t1[2]), ("width", &t1[3])] {
            if e == 0 || e % DOWNSAMPLE != 0 {
                let padded = e.div_ceil(DOWNSAMPLE).max(1) * DOWNSAMPLE;
                return Err(mismatch(
                    OP,
                    dim,
                    format!("{dim} {e} is not divisible by {DOWNSAMPLE}; pad by {} to {padded}", padded - e),
                ));
            }
        }
        Ok(())
    }

    /// Encoder features of both branches after every block, with the channel
    /// exchange applied at the configured position for EDED. Also returns
    /// the pre-exchange features used as skip connections.
    #[allow(clippy::type_complexity)]
    pub fn encode<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        t1: Var<'t, T>,
        t2: Var<'t, T>,
    ) -> Result<(Vec<(Var<'t, T>, Var<'t, T>)>, Vec<(Var<'t, T>, Var<'t, T>)>)> {
        Self::check_inputs(&t1.shape(), &t2.shape())?;
        let (mut a, mut b) = (t1, t2);
        let mut out = Vec::with_capacity(STAGES);
        let mut skips = Vec::with_capacity(STAGES);
        for (k, block) in self.encoder.iter().enumerate() {
            a = block.forward(p, a)?;
            b = block.forward(p, b)?;
            skips.push((a, b));
            if self.config.variant == Variant::Eded && k + 1 == self.config.exchange_position {
                (a, b) = channel_exchange(a, b)?;
            }
            out.push((a, b));
        }
        Ok((out, skips))
    }

    /// Forward pass against parameters already bound to a tape.
    pub fn forward_bound<'t, T: Real>(&self, p: &Bound<'t, T>, t1: Var<'t, T>, t2: Var<'t, T>) -> Result<Masks<'t, T>> {
        let (feats, skips) = self.encode(p, t1, t2)?;
        let deepest = feats[STAGES - 1];
        match &self.decoders {
            Decoders::Dual {
                branch,
                branch_head,
                tfams,
                fusion,
                fusion_head,
            } => {
                // Branch decoders at 1/8, 1/4, 1/2 (shared weights).
                let (mut da, mut db) = deepest;
                let mut decoded = Vec::with_capacity(branch.len());
                for (i, block) in branch.iter().enumerate() {
                    let (sa, sb) = skips[STAGES - 2 - i];
                    da = block.forward(p, da, sa)?;
                    db = block.forward(p, db, sb)?;
                    decoded.push((da, db));
                }
                let m1 = branch_head.forward(p, da)?;
                let m2 = branch_head.forward(p, db)?;

                let mut f = tfams[0].forward(p, deepest.0, deepest.1)?;
                for (i, block) in fusion.iter().enumerate() {
                    let (sa, sb) = if i < decoded.len() { decoded[i] } else { skips[0] };
                    let skip = tfams[i + 1].forward(p, sa, sb)?;
                    f = block.forward(p, f, skip)?;
                }
                Ok(Masks {
                    fusion: fusion_head.forward(p, f)?,
                    t1: Some(m1),
                    t2: Some(m2),
                })
            }
            Decoders::Single { fuse, decoder, head } => {
                let fused = skips
                    .iter()
                    .zip(fuse)
                    .map(|(&(a, b), conv)| conv.forward(p, Var::concat(&[a, b])?))
                    .collect::<Result<Vec<_>>>()?;
                let mut f = fused[STAGES - 1];
                for (i, block) in decoder.iter().enumerate() {
                    f = block.forward(p, f, fused[STAGES - 2 - i])?;
                }
                Ok(Masks {
                    fusion: head.forward(p, f)?,
                    t1: None,
                    t2: None,
                })
            }
        }
    }

    /// Inference on f32 images `N × 3 × H × W`; returns (fusion, branch1, branch2).
    pub fn predict(&self, t1: &Tensor<f32>, t2: &Tensor<f32>) -> Result<(Tensor<f32>, Option<Tensor<f32>>, Option<Tensor<f32>>)> {
        Self::check_inputs(t1.shape(), t2.shape())?;
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let m = self.forward_bound(&p, tape.constant(t1.clone()), tape.constant(t2.clone()))?;
        Ok((m.fusion.to_tensor(), m.t1.map(|v| v.to_tensor()), m.t2.map(|v| v.to_tensor())))
    }

    /// Operation counts of one forward pass on a single `h × w` pair:
    /// (FLOPs with convolutions at two per multiply-accumulate, convolution
    /// multiply-accumulates).
    pub fn estimate_flops(&self, h: usize, w: usize) -> Result<(u64, u64)> {
        Self::check_inputs(&[1, 3, h, w], &[1, 3, h, w])?;
        let tape = Tape::<f32>::shape_only();
        let p = self.params.bind_frozen(&tape);
        let t1 = tape.shaped_leaf(&[1, 3, h, w], false);
        let t2 = tape.shaped_leaf(&[1, 3, h, w], false);
        self.forward_bound(&p, t1, t2)?;
        Ok((tape.flops(), tape.macs()))
    }

    /// The same network with the roles of the two temporal inputs exchanged
    /// inside every fusion attention module: its fusion output on `(t2, t1)`
    /// equals this model's fusion output on `(t1, t2)`.
    pub fn swapped_roles(&self) -> Model {
        let mut out = self.clone();
        if let Decoders::Dual { tfams, .. } = &self.decoders {
            for tfam in tfams {
                for pair in [tfam.channel_conv, tfam.spatial_conv] {
                    let a = swap_temporal_inputs(self.params.get(pair[1]));
                    let b = swap_temporal_inputs(self.params.get(pair[0]));
                    *out.params.get_mut(pair[0]) = a;
                    *out.params.get_mut(pair[1]) = b;
                }
            }
        }
        out
    }
}

/// Permute input channels (0,1) ↔ (2,3) of a `[1, 4, ...]` kernel.
fn swap_temporal_inputs(w: &Tensor<f32>) -> Tensor<f32> {
    let per = w.numel() / 4;
    let d = w.data();
    let mut out = Vec::with_capacity(d.len());
    for c in [2, 3, 0, 1] {
        out.extend_from_slice(&d[c * per..(c + 1) * per]);
    }
    Tensor::new(w.shape().to_vec(), out).expect("same shape")
}
