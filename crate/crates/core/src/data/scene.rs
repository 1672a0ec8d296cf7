use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Image, SampleMeta, SamplePair, Scenario, GENERATOR_VERSION};
use crate::error::{Error, Result};
use crate::parallel;

/// Parameters of the synthetic scene generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    /// Square canvas side in pixels; must be divisible by 32.
    pub size: usize,
    /// Inclusive object count range.
    pub objects: (usize, usize),
    /// Inclusive object side-length range in pixels.
    pub extent: (usize, usize),
    /// Probability that an object takes part in a true change.
    pub change_prob: f64,
    /// Number of semantic classes for the intraclass scenario.
    pub classes: usize,
    /// Maximum per-channel gain deviation of the second-epoch tint.
    pub tint: f64,
    /// Inclusive building height range.
    pub heights: (f64, f64),
    /// Parallax coefficient: roofs move `round(kappa · height)` pixels.
    pub kappa: f64,
    /// Unit direction of parallax displacement.
    pub parallax_dir: (i32, i32),
    /// Unit direction of cast shadows.
    pub shadow_dir: (i32, i32),
    /// Shadow length in pixels per unit height.
    pub shadow_len: f64,
    /// Placement attempts per object before giving up.
    pub max_retries: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            size: 64,
            objects: (2, 5),
            extent: (6, 14),
            change_prob: 0.5,
            classes: 4,
            tint: 0.15,
            heights: (2.0, 8.0),
            kappa: 0.75,
            parallax_dir: (1, 0),
            shadow_dir: (1, 1),
            shadow_len: 0.5,
            max_retries: 200,
        }
    }
}

impl SceneSpec {
    /// Default spec on a `size` canvas, object count scaled with area.
    pub fn with_size(size: usize) -> Self {
        let base = Self::default();
        let area = (size * size) as f64 / (base.size * base.size) as f64;
        let scale = |n: usize| ((n as f64 * area).round() as usize).max(1);
        Self {
            size,
            objects: (scale(base.objects.0), scale(base.objects.1)),
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Data(msg));
        if self.size == 0 || !self.size.is_multiple_of(32) {
            return bad(format!("canvas size {} is not a positive multiple of 32", self.size));
        }
        if self.objects.0 > self.objects.1 || self.extent.0 == 0 || self.extent.0 > self.extent.1 {
            return bad(format!("empty object range {:?} or extent range {:?}", self.objects, self.extent));
        }
        if self.extent.1 > self.size {
            return bad(format!("object extent {} exceeds canvas {}", self.extent.1, self.size));
        }
        if !(0.0..=1.0).contains(&self.change_prob) {
            return bad(format!("change probability {} outside [0,1]", self.change_prob));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return bad(format!("parallax coefficient must be non-negative, got {}", self.kappa));
        }
        if self.classes == 0 || self.heights.0 > self.heights.1 || self.heights.0 < 0.0 {
            return bad("need at least one class and a non-negative height range".into());
        }
        if !(0.0..1.0).contains(&self.tint) {
            return bad(format!("tint {} outside [0,1)", self.tint));
        }
        Ok(())
    }
}

/// Per-sample seed derived from a set seed and an index.
pub fn sample_seed(base: u64, index: usize) -> u64 {
    let mut z = base ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `n` samples with independent per-sample seeds, generated in parallel.
pub fn generate_set(spec: &SceneSpec, scenario: Scenario, n: usize, seed: u64) -> Result<Vec<SamplePair>> {
    spec.validate()?;
    parallel::map_indexed(n, |i| {
        let mut s = gen_scene(spec, scenario, sample_seed(seed, i))?;
        s.meta.id = format!("{i:05}");
        Ok(s)
    })
    .into_iter()
    .collect()
}

pub fn gen_scene(spec: &SceneSpec, scenario: Scenario, seed: u64) -> Result<SamplePair> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ground = ground_texture(spec.size, &mut rng);
    let (t1, t2, label) = match scenario {
        Scenario::Iccd => intraclass(spec, &ground, &mut rng),
        Scenario::Svbcd | Scenario::Mvbcd => {
            let buildings = place_buildings(spec, scenario, &mut rng)?;
            render_buildings(spec, scenario, &ground, &buildings)
        }
    };
    Ok(SamplePair {
        t1,
        t2,
        label,
        meta: SampleMeta {
            id: format!("{seed:016x}"),
            scenario: Some(scenario),
            seed: Some(seed),
            version: GENERATOR_VERSION,
        },
    })
}

/// Shared background: a smooth soil-like field with fine grain.
pub(crate) fn ground_texture(size: usize, rng: &mut ChaCha8Rng) -> Image {
    let base = [
        rng.random_range(0.35..0.50f32),
        rng.random_range(0.35..0.48f32),
        rng.random_range(0.25..0.38f32),
    ];
    let waves: Vec<(f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.02..0.15f32),
                rng.random_range(0.02..0.15f32),
                rng.random_range(0.0..std::f32::consts::TAU),
                rng.random_range(0.02..0.06f32),
            )
        })
        .collect();
    let mut img = Image::new(3, size, size);
    for y in 0..size {
        for x in 0..size {
            let smooth: f32 = waves.iter().map(|&(fx, fy, ph, a)| a * (fx * x as f32 + fy * y as f32 + ph).sin()).sum();
            let grain = rng.random_range(-0.03..0.03f32);
            for (c, b) in base.iter().enumerate() {
                img.set(c, y, x, (b + smooth + grain).clamp(0.0, 1.0));
            }
        }
    }
    img
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Rect,
    Ellipse,
    /// Full-span strip through the box, horizontal when `true`.
    Band(bool),
}

#[derive(Debug, Clone, Copy)]
struct Primitive {
    shape: Shape,
    y: usize,
    x: usize,
    h: usize,
    w: usize,
    /// Class in each epoch; `None` when absent.
    class: [Option<usize>; 2],
}

impl Primitive {
    fn covers(&self, y: usize, x: usize, size: usize) -> bool {
        match self.shape {
            Shape::Rect => y >= self.y && y < self.y + self.h && x >= self.x && x < self.x + self.w,
            Shape::Ellipse => {
                let (cy, cx) = (self.y as f32 + self.h as f32 / 2.0, self.x as f32 + self.w as f32 / 2.0);
                let (ry, rx) = (self.h as f32 / 2.0, self.w as f32 / 2.0);
                let dy = (y as f32 + 0.5 - cy) / ry;
                let dx = (x as f32 + 0.5 - cx) / rx;
                dy * dy + dx * dx <= 1.0
            }
            Shape::Band(horizontal) => {
                let thick = (self.h.min(self.w) / 3).max(2);
                if horizontal {
                    y >= self.y && y < self.y + thick && x < size
                } else {
                    x >= self.x && x < self.x + thick && y < size
                }
            }
        }
    }
}

const CLASS_COLORS: [[f32; 3]; 8] = [
    [0.20, 0.55, 0.20],
    [0.80, 0.78, 0.72],
    [0.15, 0.30, 0.65],
    [0.70, 0.25, 0.20],
    [0.85, 0.75, 0.25],
    [0.45, 0.30, 0.55],
    [0.30, 0.30, 0.30],
    [0.55, 0.70, 0.80],
];

/// Class-specific fill: a base colour modulated by a class texture.
fn class_color(class: usize, y: usize, x: usize) -> [f32; 3] {
    let base = CLASS_COLORS[class % CLASS_COLORS.len()];
    let m = match class % 4 {
        0 => 1.0,
        1 => {
            if (y / 2).is_multiple_of(2) {
                1.0
            } else {
                0.8
            }
        }
        2 => {
            if (x / 2).is_multiple_of(2) {
                1.0
            } else {
                0.8
            }
        }
        _ => {
            if (x / 3 + y / 3).is_multiple_of(2) {
                1.0
            } else {
                0.75
            }
        }
    };
    base.map(|v| (v * m).clamp(0.0, 1.0))
}

fn intraclass(spec: &SceneSpec, ground: &Image, rng: &mut ChaCha8Rng) -> (Image, Image, Image) {
    let size = spec.size;
    let count = rng.random_range(spec.objects.0..=spec.objects.1);
    let prims: Vec<Primitive> = (0..count)
        .map(|_| {
            let h = rng.random_range(spec.extent.0..=spec.extent.1);
            let w = rng.random_range(spec.extent.0..=spec.extent.1);
            let y = rng.random_range(0..=size - h);
            let x = rng.random_range(0..=size - w);
            let shape = match rng.random_range(0..4) {
                0 | 1 => Shape::Rect,
                2 => Shape::Ellipse,
                _ => Shape::Band(rng.random_bool(0.5)),
            };
            let class = rng.random_range(0..spec.classes);
            let class = if rng.random_bool(spec.change_prob) {
                match rng.random_range(0..3) {
                    0 => [None, Some(class)],
                    1 => [Some(class), None],
                    _ if spec.classes > 1 => {
                        let other = (class + rng.random_range(1..spec.classes)) % spec.classes;
                        [Some(class), Some(other)]
                    }
                    _ => [None, Some(class)],
                }
            } else {
                [Some(class), Some(class)]
            };
            Primitive {
                shape,
                y,
                x,
                h,
                w,
                class,
            }
        })
        .collect();
    let gain: [f32; 3] = std::array::from_fn(|_| 1.0 + rng.random_range(-spec.tint..=spec.tint) as f32);

    let mut images = [ground.clone(), ground.clone()];
    let mut classes = [vec![0usize; size * size], vec![0usize; size * size]];
    for (epoch, img) in images.iter_mut().enumerate() {
        for y in 0..size {
            for x in 0..size {
                let class = prims
                    .iter()
                    .rev()
                    .find(|p| p.class[epoch].is_some() && p.covers(y, x, size))
                    .and_then(|p| p.class[epoch]);
                if let Some(k) = class {
                    classes[epoch][y * size + x] = k + 1;
                    for (c, v) in class_color(k, y, x).into_iter().enumerate() {
                        img.set(c, y, x, v);
                    }
                }
            }
        }
    }
    let [t1, mut t2] = images;
    for c in 0..3 {
        let n = size * size;
        for v in &mut t2.data[c * n..(c + 1) * n] {
            *v = (*v * gain[c]).clamp(0.0, 1.0);
        }
    }
    let mut label = Image::new(1, size, size);
    for (i, v) in label.data.iter_mut().enumerate() {
        *v = f32::from(u8::from(classes[0][i] != classes[1][i]));
    }
    (t1, t2, label)
}

/// An axis-aligned building footprint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Building {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
    pub height: f64,
    /// Whether the building stands in the first and second epoch.
    pub present: [bool; 2],
    pub roof: [f32; 3],
}

impl Building {
    fn offset(&self, dir: (i32, i32), scale: f64) -> (i64, i64) {
        let d = (scale * self.height).round() as i64;
        (dir.1 as i64 * d, dir.0 as i64 * d)
    }
}

/// Bounding box `(y0, x0, y1, x1)` (exclusive) of a building including its
/// shadow or parallax sweep.
fn reach(spec: &SceneSpec, scenario: Scenario, b: &Building) -> (i64, i64, i64, i64) {
    let (dy, dx) = match scenario {
        Scenario::Svbcd => b.offset(spec.shadow_dir, spec.shadow_len),
        _ => b.offset(spec.parallax_dir, spec.kappa),
    };
    let (y, x, h, w) = (b.y as i64, b.x as i64, b.h as i64, b.w as i64);
    (y.min(y + dy), x.min(x + dx), (y + h).max(y + h + dy), (x + w).max(x + w + dx))
}

fn place_buildings(spec: &SceneSpec, scenario: Scenario, rng: &mut ChaCha8Rng) -> Result<Vec<Building>> {
    const ROOFS: [[f32; 3]; 5] = [
        [0.78, 0.78, 0.80],
        [0.70, 0.30, 0.25],
        [0.30, 0.45, 0.70],
        [0.62, 0.62, 0.58],
        [0.85, 0.55, 0.35],
    ];
    let size = spec.size as i64;
    let count = rng.random_range(spec.objects.0..=spec.objects.1);
    let mut placed: Vec<Building> = Vec::with_capacity(count);
    let mut boxes: Vec<(i64, i64, i64, i64)> = Vec::with_capacity(count);
    for index in 0..count {
        let h = rng.random_range(spec.extent.0..=spec.extent.1);
        let w = rng.random_range(spec.extent.0..=spec.extent.1);
        let height = rng.random_range(spec.heights.0..=spec.heights.1);
        let present = if rng.random_bool(spec.change_prob) {
            if rng.random_bool(0.5) {
                [false, true]
            } else {
                [true, false]
            }
        } else {
            [true, true]
        };
        let roof = ROOFS[rng.random_range(0..ROOFS.len())];
        let mut done = false;
        for _ in 0..spec.max_retries {
            let b = Building {
                y: rng.random_range(0..=spec.size - h),
                x: rng.random_range(0..=spec.size - w),
                h,
                w,
                height,
                present,
                roof,
            };
            let r = reach(spec, scenario, &b);
            let inside = r.0 >= 0 && r.1 >= 0 && r.2 <= size && r.3 <= size;
            let clear = boxes.iter().all(|o| r.2 < o.0 || o.2 < r.0 || r.3 < o.1 || o.3 < r.1);
            if inside && clear {
                placed.push(b);
                boxes.push(r);
                done = true;
                break;
            }
        }
        if !done {
            return Err(Error::Data(format!(
                "could not place building {} of {count} on a {}px canvas after {} attempts",
                index + 1,
                spec.size,
                spec.max_retries
            )));
        }
    }
    Ok(placed)
}

fn fill_rect(img: &mut Image, y: i64, x: i64, h: usize, w: usize, color: impl Fn(usize, usize) -> [f32; 3]) {
    for yy in y.max(0)..(y + h as i64).min(img.height as i64) {
        for xx in x.max(0)..(x + w as i64).min(img.width as i64) {
            let (yy, xx) = (yy as usize, xx as usize);
            for (c, v) in color(yy, xx).into_iter().enumerate().take(img.channels) {
                img.set(c, yy, xx, v);
            }
        }
    }
}

fn roof_color(b: &Building, y: usize) -> [f32; 3] {
    let ridge = if (y as i64 - b.y as i64) * 2 < b.h as i64 { 1.0 } else { 0.88 };
    b.roof.map(|v| v * ridge)
}

/// Render explicit buildings onto a shared background. The label marks the
/// footprints of buildings present in exactly one epoch.
pub fn render_buildings(spec: &SceneSpec, scenario: Scenario, ground: &Image, buildings: &[Building]) -> (Image, Image, Image) {
    let size = spec.size;
    let mut images = [ground.clone(), ground.clone()];
    for (epoch, img) in images.iter_mut().enumerate() {
        let standing: Vec<&Building> = buildings.iter().filter(|b| b.present[epoch]).collect();
        match scenario {
            Scenario::Svbcd => {
                let mut shade = vec![false; size * size];
                for b in &standing {
                    let (dy, dx) = b.offset(spec.shadow_dir, spec.shadow_len);
                    for s in 1..=dy.abs().max(dx.abs()) {
                        let sy = b.y as i64 + dy.signum() * s.min(dy.abs());
                        let sx = b.x as i64 + dx.signum() * s.min(dx.abs());
                        for yy in sy.max(0)..(sy + b.h as i64).min(size as i64) {
                            for xx in sx.max(0)..(sx + b.w as i64).min(size as i64) {
                                shade[yy as usize * size + xx as usize] = true;
                            }
                        }
                    }
                }
                for (i, &s) in shade.iter().enumerate() {
                    if s {
                        for c in 0..3 {
                            img.data[c * size * size + i] *= 0.5;
                        }
                    }
                }
                for b in &standing {
                    fill_rect(img, b.y as i64, b.x as i64, b.h, b.w, |y, _| roof_color(b, y));
                }
            }
            _ => {
                let oblique = epoch == 1;
                for b in &standing {
                    let (dy, dx) = if oblique { b.offset(spec.parallax_dir, spec.kappa) } else { (0, 0) };
                    let steps = dy.abs().max(dx.abs());
                    for s in 0..steps {
                        let fy = b.y as i64 + dy.signum() * s.min(dy.abs());
                        let fx = b.x as i64 + dx.signum() * s.min(dx.abs());
                        fill_rect(img, fy, fx, b.h, b.w, |_, _| b.roof.map(|v| v * 0.55));
                    }
                    fill_rect(img, b.y as i64 + dy, b.x as i64 + dx, b.h, b.w, |y, _| {
                        roof_color(b, (y as i64 - dy) as usize)
                    });
                }
            }
        }
    }
    let mut label = Image::new(1, size, size);
    for b in buildings.iter().filter(|b| b.present[0] != b.present[1]) {
        fill_rect(&mut label, b.y as i64, b.x as i64, b.h, b.w, |_, _| [1.0, 1.0, 1.0]);
    }
    let [t1, t2] = images;
    (t1, t2, label)
}
