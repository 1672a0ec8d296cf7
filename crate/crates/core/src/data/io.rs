use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Image, SampleMeta, SamplePair, GENERATOR_VERSION};
use crate::error::{io_err, Error, Result};

const DIRS: [&str; 3] = ["A", "B", "label"];

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save_rgb(img: &Image, path: &Path) -> Result<()> {
    let (h, w) = (img.height, img.width);
    let buf = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb(std::array::from_fn(|c| to_u8(img.get(c, y as usize, x as usize))))
    });
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Write a single-channel map as an 8-bit PNG, 255 where the value is at
/// least 0.5 and 0 elsewhere.
pub fn write_mask(img: &Image, path: &Path) -> Result<()> {
    let buf = GrayImage::from_fn(img.width as u32, img.height as u32, |x, y| {
        image::Luma([if img.get(0, y as usize, x as usize) >= 0.5 { 255 } else { 0 }])
    });
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Read a PNG as an RGB image with values in [0,1].
pub fn read_rgb(path: &Path) -> Result<Image> {
    let buf = open(path)?.to_rgb8();
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let mut img = Image::new(3, h, w);
    for (x, y, p) in buf.enumerate_pixels() {
        for c in 0..3 {
            img.set(c, y as usize, x as usize, f32::from(p.0[c]) / 255.0);
        }
    }
    Ok(img)
}

fn load_label(path: &Path) -> Result<Image> {
    let buf = open(path)?.to_luma8();
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let mut img = Image::new(1, h, w);
    for (x, y, p) in buf.enumerate_pixels() {
        let v = match p.0[0] {
            0 => 0.0,
            255 => 1.0,
            other => {
                return Err(Error::Data(format!(
                    "{}: label value {other} at ({x}, {y}) is neither 0 nor 255",
                    path.display()
                )))
            }
        };
        img.set(0, y as usize, x as usize, v);
    }
    Ok(img)
}

/// Write samples as `root/{A,B,label}/<id>.png`.
pub fn write_dataset(root: &Path, samples: &[SamplePair]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::with_capacity(samples.len() * 3);
    for d in DIRS {
        fs::create_dir_all(root.join(d)).map_err(io_err(root.join(d)))?;
    }
    for s in samples {
        s.validate()?;
        let name = format!("{}.png", s.meta.id);
        let paths = DIRS.map(|d| root.join(d).join(&name));
        save_rgb(&s.t1, &paths[0])?;
        save_rgb(&s.t2, &paths[1])?;
        write_mask(&s.label, &paths[2])?;
        written.extend(paths);
    }
    Ok(written)
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut stems = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

/// Read every sample of an A/B/label dataset, sorted by id. A directory
/// without images yields an empty list.
pub fn read_dataset(root: &Path) -> Result<Vec<SamplePair>> {
    if !root.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", root.display())));
    }
    let stems = DIRS.map(|d| png_stems(&root.join(d)));
    let [a, b, l] = stems;
    let (a, b, l) = (a?, b?, l?);
    for (name, other) in [("B", &b), ("label", &l)] {
        if let Some(missing) = a.iter().find(|s| !other.contains(s)) {
            return Err(Error::Data(format!("{}: A/{missing}.png has no {name} counterpart", root.display())));
        }
    }
    if let Some(extra) = b.iter().chain(&l).find(|s| !a.contains(s)) {
        return Err(Error::Data(format!("{}: {extra}.png has no A counterpart", root.display())));
    }
    a.iter()
        .map(|id| {
            let file = format!("{id}.png");
            let sample = SamplePair {
                t1: read_rgb(&root.join("A").join(&file))?,
                t2: read_rgb(&root.join("B").join(&file))?,
                label: load_label(&root.join("label").join(&file))?,
                meta: SampleMeta {
                    id: id.clone(),
                    scenario: None,
                    seed: None,
                    version: GENERATOR_VERSION,
                },
            };
            sample.validate()?;
            Ok(sample)
        })
        .collect()
}

/// Top-left corners of raster-order tiles with the given overlap.
pub fn tile_grid(height: usize, width: usize, tile: usize, overlap: usize) -> Result<Vec<(usize, usize)>> {
    if tile == 0 || overlap >= tile {
        return Err(Error::Data(format!("overlap {overlap} must be smaller than tile {tile}")));
    }
    if height < tile || width < tile {
        return Err(Error::Data(format!("{height}x{width} image is smaller than a {tile} tile")));
    }
    let stride = tile - overlap;
    let ys = (0..=(height - tile) / stride).map(|i| i * stride);
    Ok(ys.flat_map(|y| (0..=(width - tile) / stride).map(move |x| (y, x * stride))).collect())
}

pub fn tile_pair(s: &SamplePair, tile: usize, overlap: usize) -> Result<Vec<SamplePair>> {
    let grid = tile_grid(s.label.height, s.label.width, tile, overlap)?;
    Ok(grid
        .into_iter()
        .enumerate()
        .map(|(k, (y, x))| SamplePair {
            t1: s.t1.crop(y, x, tile, tile),
            t2: s.t2.crop(y, x, tile, tile),
            label: s.label.crop(y, x, tile, tile),
            meta: SampleMeta {
                id: format!("{}_{k:03}", s.meta.id),
                ..s.meta.clone()
            },
        })
        .collect())
}

/// Seeded permutation partitioned into train/val/test by `ratios`.
/// Counts are floors with the remainder handed out by largest fraction.
pub fn split<T>(items: Vec<T>, ratios: [f64; 3], seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Data(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let n = items.len();
    let exact = ratios.map(|r| r * n as f64);
    let mut counts = exact.map(|e| e.floor() as usize);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let mut left = n - counts.iter().sum::<usize>();
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    let mut take = |range: std::ops::Range<usize>| -> Vec<T> {
        idx[range].iter().map(|&i| slots[i].take().expect("index used once")).collect()
    };
    let train = take(0..counts[0]);
    let val = take(counts[0]..counts[0] + counts[1]);
    let test = take(counts[0] + counts[1]..n);
    Ok((train, val, test))
}
