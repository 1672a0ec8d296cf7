use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Image, SamplePair};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipAxis {
    /// Mirror columns: `x → W−1−x`.
    Horizontal,
    /// Mirror rows: `y → H−1−y`.
    Vertical,
    Both,
}

/// Probabilities and magnitudes of the training augmentations.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub flip: f64,
    /// Fixed flip axis; a random axis is drawn when `None`.
    pub flip_axis: Option<FlipAxis>,
    pub transpose: f64,
    pub shift: f64,
    pub scale: f64,
    pub rotate: f64,
    /// Probability of one photometric op, drawn per image.
    pub photometric: f64,
    pub swap: f64,
    /// Shift limit as a fraction of the extent.
    pub shift_limit: f64,
    pub scale_limit: f64,
    pub rotate_limit_deg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip: 0.5,
            flip_axis: None,
            transpose: 0.5,
            shift: 0.3,
            scale: 0.3,
            rotate: 0.3,
            photometric: 0.3,
            swap: 0.5,
            shift_limit: 0.0625,
            scale_limit: 0.1,
            rotate_limit_deg: 45.0,
        }
    }
}

impl AugmentConfig {
    /// Every transform disabled.
    pub fn none() -> Self {
        Self {
            flip: 0.0,
            transpose: 0.0,
            shift: 0.0,
            scale: 0.0,
            rotate: 0.0,
            photometric: 0.0,
            swap: 0.0,
            ..Self::default()
        }
    }
}

fn map_pixels(img: &Image, h: usize, w: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Image {
    let mut out = Image::new(img.channels, h, w);
    for c in 0..img.channels {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = src(y, x);
                out.set(c, y, x, img.get(c, sy, sx));
            }
        }
    }
    out
}

fn flip(img: &Image, axis: FlipAxis) -> Image {
    let (h, w) = (img.height, img.width);
    map_pixels(img, h, w, |y, x| match axis {
        FlipAxis::Horizontal => (y, w - 1 - x),
        FlipAxis::Vertical => (h - 1 - y, x),
        FlipAxis::Both => (h - 1 - y, w - 1 - x),
    })
}

fn transpose(img: &Image) -> Image {
    map_pixels(img, img.width, img.height, |y, x| (x, y))
}

/// Mirror an index into `[0, n)` without repeating the edge sample.
fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m >= n as i64 { period - m } else { m }) as usize
}

/// Inverse affine map from output to source coordinates about the centre.
#[derive(Debug, Clone, Copy)]
struct Affine {
    cos: f64,
    sin: f64,
    scale: f64,
    ty: f64,
    tx: f64,
}

impl Affine {
    fn source(&self, y: usize, x: usize, h: usize, w: usize) -> (f64, f64) {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (py, px) = ((y as f64 - cy - self.ty) / self.scale, (x as f64 - cx - self.tx) / self.scale);
        (self.cos * py - self.sin * px + cy, self.sin * py + self.cos * px + cx)
    }
}

fn warp_bilinear(img: &Image, a: &Affine) -> Image {
    let (h, w) = (img.height, img.width);
    let mut out = Image::new(img.channels, h, w);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = a.source(y, x, h, w);
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = ((sy - y0) as f32, (sx - x0) as f32);
            let (y0, x0) = (y0 as i64, x0 as i64);
            let (ya, yb) = (reflect(y0, h), reflect(y0 + 1, h));
            let (xa, xb) = (reflect(x0, w), reflect(x0 + 1, w));
            for c in 0..img.channels {
                let top = img.get(c, ya, xa) * (1.0 - fx) + img.get(c, ya, xb) * fx;
                let bot = img.get(c, yb, xa) * (1.0 - fx) + img.get(c, yb, xb) * fx;
                out.set(c, y, x, (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0));
            }
        }
    }
    out
}

fn warp_nearest_binary(img: &Image, a: &Affine) -> Image {
    let (h, w) = (img.height, img.width);
    let mut out = Image::new(img.channels, h, w);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = a.source(y, x, h, w);
            let (ry, rx) = (reflect(sy.round() as i64, h), reflect(sx.round() as i64, w));
            for c in 0..img.channels {
                out.set(c, y, x, if img.get(c, ry, rx) >= 0.5 { 1.0 } else { 0.0 });
            }
        }
    }
    out
}

fn photometric(img: &mut Image, rng: &mut ChaCha8Rng) {
    match rng.random_range(0..3) {
        0 => {
            let alpha = 1.0 + rng.random_range(-0.2..=0.2f32);
            let beta = rng.random_range(-0.2..=0.2f32);
            img.data.iter_mut().for_each(|v| *v = (*v * alpha + beta).clamp(0.0, 1.0));
        }
        1 => {
            let gamma = rng.random_range(0.8..=1.2f32);
            img.data.iter_mut().for_each(|v| *v = v.powf(gamma).clamp(0.0, 1.0));
        }
        _ => {
            let sigma = rng.random_range(0.01..=0.05f32);
            let noise = Normal::new(0.0, sigma).expect("positive sigma");
            img.data.iter_mut().for_each(|v| *v = (*v + noise.sample(rng)).clamp(0.0, 1.0));
        }
    }
}

/// Apply the seeded augmentation pipeline. Geometric transforms act
/// identically on both images and the label; photometric ones act on each
/// image independently; the temporal order may be swapped.
pub fn augment_pair(s: &SamplePair, cfg: &AugmentConfig, seed: u64) -> SamplePair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = s.clone();
    let geometric = |f: &dyn Fn(&Image) -> Image, out: &mut SamplePair| {
        out.t1 = f(&out.t1);
        out.t2 = f(&out.t2);
        out.label = f(&out.label);
    };

    if rng.random_bool(cfg.flip) {
        let axis = cfg.flip_axis.unwrap_or(match rng.random_range(0..3) {
            0 => FlipAxis::Horizontal,
            1 => FlipAxis::Vertical,
            _ => FlipAxis::Both,
        });
        geometric(&|i| flip(i, axis), &mut out);
    }
    if rng.random_bool(cfg.transpose) {
        geometric(&transpose, &mut out);
    }

    let mut affine = Affine {
        cos: 1.0,
        sin: 0.0,
        scale: 1.0,
        ty: 0.0,
        tx: 0.0,
    };
    let mut warped = false;
    if rng.random_bool(cfg.shift) {
        affine.ty = rng.random_range(-cfg.shift_limit..=cfg.shift_limit) * out.label.height as f64;
        affine.tx = rng.random_range(-cfg.shift_limit..=cfg.shift_limit) * out.label.width as f64;
        warped = true;
    }
    if rng.random_bool(cfg.scale) {
        affine.scale = 1.0 + rng.random_range(-cfg.scale_limit..=cfg.scale_limit);
        warped = true;
    }
    if rng.random_bool(cfg.rotate) {
        let theta = rng.random_range(-cfg.rotate_limit_deg..=cfg.rotate_limit_deg).to_radians();
        (affine.sin, affine.cos) = theta.sin_cos();
        warped = true;
    }
    if warped {
        out.t1 = warp_bilinear(&out.t1, &affine);
        out.t2 = warp_bilinear(&out.t2, &affine);
        out.label = warp_nearest_binary(&out.label, &affine);
    }

    for img in [&mut out.t1, &mut out.t2] {
        if rng.random_bool(cfg.photometric) {
            photometric(img, &mut rng);
        }
    }
    if rng.random_bool(cfg.swap) {
        std::mem::swap(&mut out.t1, &mut out.t2);
    }
    out
}
