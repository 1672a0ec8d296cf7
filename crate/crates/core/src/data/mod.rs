//! Synthetic bitemporal scenes, augmentation, tiling and the A/B/label
//! dataset layout.

mod augment;
mod io;
mod scene;

use std::fmt;
use std::str::FromStr;

pub use augment::{augment_pair, AugmentConfig, FlipAxis};
pub use io::{read_dataset, read_rgb, split, tile_grid, tile_pair, write_dataset, write_mask};
pub use scene::{gen_scene, generate_set, render_buildings, sample_seed, Building, SceneSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bumped whenever generator output changes for a fixed seed.
pub const GENERATOR_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scenario {
    /// Intraclass change: multi-class primitives plus a global tint.
    Iccd,
    /// Single-view buildings with drop shadows.
    Svbcd,
    /// Multiview buildings with parallax-displaced roofs.
    Mvbcd,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Iccd => "iccd",
            Scenario::Svbcd => "svbcd",
            Scenario::Mvbcd => "mvbcd",
        })
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "iccd" => Ok(Scenario::Iccd),
            "svbcd" => Ok(Scenario::Svbcd),
            "mvbcd" => Ok(Scenario::Mvbcd),
            _ => Err(Error::Data(format!("unknown scenario `{s}` (expected iccd, svbcd or mvbcd)"))),
        }
    }
}

/// Planar `channels × height × width` image with values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Sub-window `[y, y + h) × [x, x + w)`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Image {
        let mut out = Image::new(self.channels, h, w);
        for c in 0..self.channels {
            for r in 0..h {
                let src = self.idx(c, y + r, x);
                let dst = out.idx(c, r, 0);
                out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        out
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleMeta {
    pub id: String,
    pub scenario: Option<Scenario>,
    pub seed: Option<u64>,
    pub version: u32,
}

/// A bitemporal image pair with its binary change label.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub t1: Image,
    pub t2: Image,
    /// Single channel, values exactly 0 or 1.
    pub label: Image,
    pub meta: SampleMeta,
}

impl SamplePair {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.label.height, self.label.width);
        for (name, img, c) in [("t1", &self.t1, 3), ("t2", &self.t2, 3), ("label", &self.label, 1)] {
            if img.channels != c || img.height != h || img.width != w {
                return Err(Error::Data(format!(
                    "{}: {name} is {}x{}x{}, expected {c}x{h}x{w}",
                    self.meta.id, img.channels, img.height, img.width
                )));
            }
        }
        if !self.label.is_binary() {
            return Err(Error::Data(format!("{}: label is not binary", self.meta.id)));
        }
        Ok(())
    }
}

/// 2×2 max-pool of a binary label.
pub fn downsample_label(label: &Image) -> Result<Image> {
    if !label.height.is_multiple_of(2) || !label.width.is_multiple_of(2) {
        return Err(Error::Data(format!("cannot halve a {}x{} label", label.height, label.width)));
    }
    let (h, w) = (label.height / 2, label.width / 2);
    let mut out = Image::new(label.channels, h, w);
    for c in 0..label.channels {
        for y in 0..h {
            for x in 0..w {
                let m = label
                    .get(c, 2 * y, 2 * x)
                    .max(label.get(c, 2 * y, 2 * x + 1))
                    .max(label.get(c, 2 * y + 1, 2 * x))
                    .max(label.get(c, 2 * y + 1, 2 * x + 1));
                out.set(c, y, x, m);
            }
        }
    }
    Ok(out)
}

/// Stack samples into `(t1, t2, label)` batches of shape `N×3×H×W`,
/// `N×3×H×W` and `N×1×H×W`.
pub fn to_batch(samples: &[&SamplePair]) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let (h, w) = (first.label.height, first.label.width);
    let mut t1 = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut t2 = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut label = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        s.validate()?;
        if (s.label.height, s.label.width) != (h, w) {
            return Err(Error::Data(format!("{}: batch mixes extents", s.meta.id)));
        }
        t1.extend_from_slice(&s.t1.data);
        t2.extend_from_slice(&s.t2.data);
        label.extend_from_slice(&s.label.data);
    }
    let n = samples.len();
    Ok((Tensor::new([n, 3, h, w], t1)?, Tensor::new([n, 3, h, w], t2)?, Tensor::new([n, 1, h, w], label)?))
}
