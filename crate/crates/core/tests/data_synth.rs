use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgsln_core::data::{
    augment_pair, downsample_label, gen_scene, generate_set, read_dataset, render_buildings, split, tile_grid, tile_pair,
    to_batch, write_dataset, AugmentConfig, Building, FlipAxis, Image, SampleMeta, SamplePair, Scenario, SceneSpec,
};

const ALL: [Scenario; 3] = [Scenario::Iccd, Scenario::Svbcd, Scenario::Mvbcd];

fn label_sum(img: &Image) -> f32 {
    img.data.iter().sum()
}

fn random_mask(h: usize, w: usize, seed: u64, density: f64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Image::new(1, h, w);
    for v in &mut img.data {
        *v = if rng.random_bool(density) { 1.0 } else { 0.0 };
    }
    img
}

fn flat_ground(size: usize) -> Image {
    let mut g = Image::new(3, size, size);
    g.data.iter_mut().for_each(|v| *v = 0.4);
    g
}

fn building(y: usize, x: usize, h: usize, w: usize, present: [bool; 2]) -> Building {
    Building {
        y,
        x,
        h,
        w,
        height: 4.0,
        present,
        roof: [0.8, 0.7, 0.6],
    }
}

#[test]
fn generation_is_deterministic() {
    let spec = SceneSpec::default();
    for scenario in ALL {
        let a = gen_scene(&spec, scenario, 42).unwrap();
        let b = gen_scene(&spec, scenario, 42).unwrap();
        assert_eq!(a, b, "{scenario}");
        let c = gen_scene(&spec, scenario, 43).unwrap();
        assert_ne!(a.t1, c.t1, "{scenario}");
    }
    let x = generate_set(&spec, Scenario::Svbcd, 6, 9).unwrap();
    let y = generate_set(&spec, Scenario::Svbcd, 6, 9).unwrap();
    assert_eq!(x, y);
    assert_eq!(x[3].meta.id, "00003");
}

#[test]
fn samples_are_valid_and_in_range() {
    let spec = SceneSpec::default();
    for scenario in ALL {
        for seed in 0..20 {
            let s = gen_scene(&spec, scenario, seed).unwrap();
            s.validate().unwrap();
            assert!(s.t1.data.iter().chain(&s.t2.data).all(|v| (0.0..=1.0).contains(v)));
            assert_eq!((s.t1.height, s.t1.width, s.label.channels), (64, 64, 1));
            assert_eq!(s.meta.scenario, Some(scenario));
        }
    }
}

#[test]
fn no_change_gives_empty_label() {
    let spec = SceneSpec {
        change_prob: 0.0,
        ..SceneSpec::default()
    };
    for scenario in ALL {
        for seed in 0..10 {
            let s = gen_scene(&spec, scenario, seed).unwrap();
            assert_eq!(label_sum(&s.label), 0.0, "{scenario} seed {seed}");
        }
    }
}

#[test]
fn parallax_without_change_is_a_pseudo_change() {
    let spec = SceneSpec {
        change_prob: 0.0,
        kappa: 1.0,
        ..SceneSpec::default()
    };
    for seed in 0..10 {
        let s = gen_scene(&spec, Scenario::Mvbcd, seed).unwrap();
        assert_eq!(label_sum(&s.label), 0.0);
        assert_ne!(s.t1, s.t2, "seed {seed}");
    }
}

#[test]
fn zero_parallax_without_change_matches() {
    let spec = SceneSpec {
        change_prob: 0.0,
        kappa: 0.0,
        ..SceneSpec::default()
    };
    for seed in 0..10 {
        let s = gen_scene(&spec, Scenario::Mvbcd, seed).unwrap();
        assert_eq!(s.t1, s.t2, "seed {seed}");
    }
}

#[test]
fn zero_parallax_differs_only_inside_changed_footprints() {
    let spec = SceneSpec {
        kappa: 0.0,
        change_prob: 0.5,
        ..SceneSpec::default()
    };
    for seed in 0..10 {
        let s = gen_scene(&spec, Scenario::Mvbcd, seed).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                if s.label.get(0, y, x) == 0.0 {
                    for c in 0..3 {
                        assert_eq!(s.t1.get(c, y, x), s.t2.get(c, y, x));
                    }
                }
            }
        }
    }
}

#[test]
fn one_added_building_counts_its_pixels() {
    let spec = SceneSpec::default();
    let ground = flat_ground(64);
    for scenario in [Scenario::Svbcd, Scenario::Mvbcd] {
        let bs = [building(20, 12, 10, 10, [false, true]), building(40, 40, 8, 12, [true, true])];
        let (t1, t2, label) = render_buildings(&spec, scenario, &ground, &bs);
        assert_eq!(label_sum(&label), 100.0, "{scenario}");
        for y in 0..64 {
            for x in 0..64 {
                let inside = (20..30).contains(&y) && (12..22).contains(&x);
                assert_eq!(label.get(0, y, x) == 1.0, inside);
            }
        }
        assert_ne!(t1, t2);
    }
}

#[test]
fn shadows_stay_out_of_the_label() {
    let spec = SceneSpec::default();
    let ground = flat_ground(64);
    let (t1, t2, label) = render_buildings(&spec, Scenario::Svbcd, &ground, &[building(10, 10, 10, 10, [false, true])]);
    assert!(t1.data.iter().all(|&v| v == 0.4));
    // shadow pixel diagonal from the footprint
    assert_eq!(t2.get(0, 21, 21), 0.2);
    assert_eq!(label.get(0, 21, 21), 0.0);
    assert_eq!(label_sum(&label), 100.0);
}

#[test]
fn intraclass_tint_is_not_labelled() {
    let spec = SceneSpec {
        change_prob: 0.0,
        ..SceneSpec::default()
    };
    let s = gen_scene(&spec, Scenario::Iccd, 5).unwrap();
    assert_eq!(label_sum(&s.label), 0.0);
    assert_ne!(s.t1, s.t2);
}

#[test]
fn overcrowded_spec_is_rejected() {
    let spec = SceneSpec {
        objects: (40, 40),
        extent: (16, 16),
        max_retries: 50,
        ..SceneSpec::default()
    };
    let err = gen_scene(&spec, Scenario::Svbcd, 0).unwrap_err().to_string();
    assert!(err.contains("could not place"), "{err}");
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(gen_scene(&SceneSpec::with_size(60), Scenario::Iccd, 0).is_err());
    let neg = SceneSpec {
        kappa: -0.5,
        ..SceneSpec::default()
    };
    assert!(gen_scene(&neg, Scenario::Mvbcd, 0).is_err());
    assert!(SceneSpec::with_size(128).validate().is_ok());
}

#[test]
fn disabled_augmentation_is_identity() {
    let s = gen_scene(&SceneSpec::default(), Scenario::Svbcd, 1).unwrap();
    for seed in 0..5 {
        assert_eq!(augment_pair(&s, &AugmentConfig::none(), seed), s);
    }
}

#[test]
fn forced_swap_exchanges_epochs() {
    let s = gen_scene(&SceneSpec::default(), Scenario::Mvbcd, 2).unwrap();
    let cfg = AugmentConfig {
        swap: 1.0,
        ..AugmentConfig::none()
    };
    let out = augment_pair(&s, &cfg, 7);
    assert_eq!((out.t1, out.t2, out.label), (s.t2, s.t1, s.label));
}

#[test]
fn forced_horizontal_flip_mirrors_columns() {
    let s = gen_scene(&SceneSpec::default(), Scenario::Svbcd, 3).unwrap();
    let cfg = AugmentConfig {
        flip: 1.0,
        flip_axis: Some(FlipAxis::Horizontal),
        ..AugmentConfig::none()
    };
    let out = augment_pair(&s, &cfg, 0);
    let w = s.label.width;
    for y in 0..s.label.height {
        for x in 0..w {
            assert_eq!(out.label.get(0, y, x), s.label.get(0, y, w - 1 - x));
            for c in 0..3 {
                assert_eq!(out.t1.get(c, y, x), s.t1.get(c, y, w - 1 - x));
                assert_eq!(out.t2.get(c, y, x), s.t2.get(c, y, w - 1 - x));
            }
        }
    }
}

#[test]
fn flips_and_transpose_commute_with_rasterisation() {
    let spec = SceneSpec::default();
    let ground = flat_ground(64);
    let bs = vec![
        building(3, 5, 9, 14, [true, false]),
        building(30, 40, 12, 8, [false, true]),
        building(44, 6, 10, 10, [true, true]),
    ];
    let (t1, t2, label) = render_buildings(&spec, Scenario::Svbcd, &ground, &bs);
    let sample = SamplePair {
        t1,
        t2,
        label,
        meta: SampleMeta {
            id: "x".into(),
            scenario: None,
            seed: None,
            version: 1,
        },
    };
    type Remap = fn(&Building) -> Building;
    let cases: [(AugmentConfig, Remap); 4] = [
        (
            AugmentConfig { flip: 1.0, flip_axis: Some(FlipAxis::Horizontal), ..AugmentConfig::none() },
            |b| Building { x: 64 - b.x - b.w, ..*b },
        ),
        (
            AugmentConfig { flip: 1.0, flip_axis: Some(FlipAxis::Vertical), ..AugmentConfig::none() },
            |b| Building { y: 64 - b.y - b.h, ..*b },
        ),
        (
            AugmentConfig { flip: 1.0, flip_axis: Some(FlipAxis::Both), ..AugmentConfig::none() },
            |b| Building { y: 64 - b.y - b.h, x: 64 - b.x - b.w, ..*b },
        ),
        (
            AugmentConfig { transpose: 1.0, ..AugmentConfig::none() },
            |b| Building { y: b.x, x: b.y, h: b.w, w: b.h, ..*b },
        ),
    ];
    for (cfg, remap) in cases {
        let augmented = augment_pair(&sample, &cfg, 0).label;
        let moved: Vec<Building> = bs.iter().map(remap).collect();
        let (_, _, rasterised) = render_buildings(&spec, Scenario::Svbcd, &ground, &moved);
        assert_eq!(augmented, rasterised, "{cfg:?}");
    }
}

#[test]
fn default_augmentation_keeps_labels_binary() {
    let spec = SceneSpec::default();
    let cfg = AugmentConfig {
        shift: 1.0,
        scale: 1.0,
        rotate: 1.0,
        photometric: 1.0,
        ..AugmentConfig::default()
    };
    for seed in 0..30 {
        let s = gen_scene(&spec, ALL[seed as usize % 3], seed).unwrap();
        for c in [&cfg, &AugmentConfig::default()] {
            let out = augment_pair(&s, c, seed * 31 + 1);
            assert!(out.label.is_binary());
            out.validate().unwrap();
            assert!(out.t1.data.iter().chain(&out.t2.data).all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn augmentation_is_seeded() {
    let s = gen_scene(&SceneSpec::default(), Scenario::Iccd, 4).unwrap();
    let cfg = AugmentConfig::default();
    assert_eq!(augment_pair(&s, &cfg, 12), augment_pair(&s, &cfg, 12));
}

#[test]
fn downsample_examples() {
    let mut ones = Image::new(1, 8, 8);
    ones.data.iter_mut().for_each(|v| *v = 1.0);
    assert!(downsample_label(&ones).unwrap().data.iter().all(|&v| v == 1.0));

    let mut single = Image::new(1, 8, 8);
    single.set(0, 5, 2, 1.0);
    let d = downsample_label(&single).unwrap();
    assert_eq!((d.height, d.width), (4, 4));
    assert_eq!(label_sum(&d), 1.0);
    assert_eq!(d.get(0, 2, 1), 1.0);

    assert!(downsample_label(&Image::new(1, 7, 8)).is_err());
    assert!(downsample_label(&Image::new(1, 8, 5)).is_err());
}

#[test]
fn downsample_matches_quadrant_scan() {
    for seed in 0..50 {
        let m = random_mask(16, 24, seed, 0.1);
        let d = downsample_label(&m).unwrap();
        for y in 0..8 {
            for x in 0..12 {
                let mut any = false;
                for dy in 0..2 {
                    for dx in 0..2 {
                        any |= m.data[(2 * y + dy) * 24 + 2 * x + dx] == 1.0;
                    }
                }
                assert_eq!(d.data[y * 12 + x], if any { 1.0 } else { 0.0 });
            }
        }
        assert!(d.is_binary());
    }
}

#[test]
fn tile_counts() {
    assert_eq!(tile_grid(512, 512, 256, 0).unwrap().len(), 4);
    let g = tile_grid(512, 512, 256, 128).unwrap();
    assert_eq!(g.len(), 9);
    let stride = 256 - 128;
    let rows = (512 - 256) / stride + 1;
    assert_eq!(g.len(), rows * rows);
    assert_eq!(&g[..4], &[(0, 0), (0, 128), (0, 256), (128, 0)]);
    assert!(tile_grid(128, 512, 256, 0).is_err());
    assert!(tile_grid(512, 512, 256, 256).is_err());
}

#[test]
fn tiles_crop_the_pair() {
    let s = gen_scene(&SceneSpec::with_size(128), Scenario::Svbcd, 8).unwrap();
    let tiles = tile_pair(&s, 64, 32).unwrap();
    assert_eq!(tiles.len(), 9);
    let t = &tiles[4];
    assert_eq!(t.label.height, 64);
    assert_eq!(t.t1.get(2, 10, 20), s.t1.get(2, 42, 52));
    assert_eq!(t.label.get(0, 63, 0), s.label.get(0, 95, 32));
    assert_eq!(tiles[8].meta.id, format!("{}_008", s.meta.id));
}

#[test]
fn split_sizes_follow_ratios() {
    let (a, b, c) = split((0..10).collect::<Vec<_>>(), [0.7, 0.1, 0.2], 3).unwrap();
    assert_eq!((a.len(), b.len(), c.len()), (7, 1, 2));
    let mut all: Vec<i32> = a.iter().chain(&b).chain(&c).copied().collect();
    all.sort();
    assert_eq!(all, (0..10).collect::<Vec<_>>());
    let again = split((0..10).collect::<Vec<_>>(), [0.7, 0.1, 0.2], 3).unwrap();
    assert_eq!((a, b, c), again);
    assert!(split(vec![1, 2, 3], [0.7, 0.2, 0.2], 0).is_err());
    assert!(split(vec![1, 2, 3], [1.2, -0.2, 0.0], 0).is_err());
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate_set(&SceneSpec::default(), Scenario::Iccd, 3, 5).unwrap();
    let written = write_dataset(dir.path(), &samples).unwrap();
    assert_eq!(written.len(), 9);
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in samples.iter().zip(&back) {
        assert_eq!(a.meta.id, b.meta.id);
        assert_eq!(a.label, b.label);
        for (x, y) in a.t1.data.iter().chain(&a.t2.data).zip(b.t1.data.iter().chain(&b.t2.data)) {
            assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}

#[test]
fn grey_label_is_rejected_with_filename() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate_set(&SceneSpec::default(), Scenario::Svbcd, 1, 0).unwrap();
    write_dataset(dir.path(), &samples).unwrap();
    let path = dir.path().join("label").join("00000.png");
    let mut grey = image::GrayImage::new(64, 64);
    grey.put_pixel(3, 4, image::Luma([128]));
    grey.save(&path).unwrap();
    let err = read_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("00000.png") && err.contains("128"), "{err}");
}

#[test]
fn missing_counterpart_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate_set(&SceneSpec::default(), Scenario::Svbcd, 2, 0).unwrap();
    write_dataset(dir.path(), &samples).unwrap();
    std::fs::remove_file(dir.path().join("B").join("00001.png")).unwrap();
    let err = read_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("00001"), "{err}");
}

#[test]
fn empty_directory_is_an_empty_stream() {
    let dir = tempfile::tempdir().unwrap();
    assert!(read_dataset(dir.path()).unwrap().is_empty());
    assert!(read_dataset(&dir.path().join("absent")).is_err());
}

#[test]
fn batches_stack_samples() {
    let samples = generate_set(&SceneSpec::default(), Scenario::Mvbcd, 2, 1).unwrap();
    let refs: Vec<&SamplePair> = samples.iter().collect();
    let (t1, t2, label) = to_batch(&refs).unwrap();
    assert_eq!(t1.shape(), &[2, 3, 64, 64]);
    assert_eq!(t2.shape(), &[2, 3, 64, 64]);
    assert_eq!(label.shape(), &[2, 1, 64, 64]);
    assert_eq!(label.data()[64 * 64..], samples[1].label.data[..]);
    assert!(to_batch(&[]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn any_seed_gives_binary_label(seed in any::<u64>(), k in 0usize..3) {
        let s = gen_scene(&SceneSpec::default(), ALL[k], seed).unwrap();
        prop_assert!(s.label.is_binary());
        let aug = augment_pair(&s, &AugmentConfig::default(), seed);
        prop_assert!(aug.label.is_binary());
    }

    #[test]
    fn downsample_preserves_any_change(seed in any::<u64>()) {
        let m = random_mask(8, 8, seed, 0.05);
        let d = downsample_label(&m).unwrap();
        prop_assert_eq!(label_sum(&m) > 0.0, label_sum(&d) > 0.0);
        prop_assert!(label_sum(&d) <= label_sum(&m));
    }
}
