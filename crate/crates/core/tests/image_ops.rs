use std::collections::HashSet;
use std::path::PathBuf;

use avsc::image_ops::*;
use avsc::rng::{derive_seed, rng_from};
use proptest::prelude::*;

/// Smooth gradient plus a diagonal stripe pattern, no pixel equal to 128.
fn textured(h: usize, w: usize) -> Image {
    let mut px = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let stripe = if (x + y) % 4 < 2 { 40 } else { 0 };
            px.push((10 + 7 * x + stripe) as u8);
            px.push((20 + 9 * y) as u8);
            px.push((200 - 3 * (x + y)) as u8);
        }
    }
    for p in px.iter_mut().filter(|p| **p == 128) {
        *p = 127;
    }
    Image::new(h, w, px).unwrap()
}

fn all_ops() -> Vec<ImageOp> {
    std::iter::once(ImageOp::Identity).chain(SEARCH_SPACE).collect()
}

fn arb_image() -> impl Strategy<Value = Image> {
    (8usize..14, 8usize..14).prop_flat_map(|(h, w)| {
        proptest::collection::vec(any::<u8>(), h * w * 3)
            .prop_map(move |px| Image::new(h, w, px).unwrap())
    })
}

#[test]
fn search_space_lists_fifteen_distinct_ops() {
    let set: HashSet<_> = SEARCH_SPACE.iter().collect();
    assert_eq!(set.len(), 15);
    assert!(!set.contains(&ImageOp::Identity));
    for op in all_ops() {
        assert_eq!(op.name().parse::<ImageOp>().unwrap(), op);
    }
}

#[test]
fn identity_is_bit_exact_for_every_magnitude() {
    let img = textured(16, 20);
    for m in [0, 7, 14, 30] {
        let out = apply_op(&img, ImageOp::Identity, m, &mut rng_from(&[m as u64])).unwrap();
        assert_eq!(out, img);
    }
}

#[test]
fn invert_is_an_involution() {
    let img = textured(12, 9);
    let mut rng = rng_from(&[0]);
    let once = apply_op(&img, ImageOp::Invert, 14, &mut rng).unwrap();
    assert_eq!(once.get(3, 4, 1), 255 - img.get(3, 4, 1));
    assert_eq!(apply_op(&once, ImageOp::Invert, 14, &mut rng).unwrap(), img);
}

#[test]
fn magnitude_zero_is_identity_for_parametrized_ops() {
    let img = textured(16, 17);
    let skip = [ImageOp::Invert, ImageOp::Equalize, ImageOp::AutoContrast];
    for op in SEARCH_SPACE.into_iter().filter(|op| !skip.contains(op)) {
        for seed in 0..4 {
            let out = apply_op(&img, op, 0, &mut rng_from(&[seed])).unwrap();
            assert_eq!(out, img, "{op} at M=0");
        }
    }
}

#[test]
fn magnitude_above_thirty_is_rejected() {
    let img = textured(8, 8);
    assert!(apply_op(&img, ImageOp::Rotate, 31, &mut rng_from(&[0])).is_err());
}

#[test]
fn solarize_and_posterize_follow_the_table() {
    let img = textured(10, 10);
    let mut rng = rng_from(&[1]);
    // M=15: threshold 128.
    let sol = apply_op(&img, ImageOp::Solarize, 15, &mut rng).unwrap();
    // M=30: 4 bits kept.
    let post = apply_op(&img, ImageOp::Posterize, 30, &mut rng).unwrap();
    for (i, &p) in img.pixels().iter().enumerate() {
        let want = if p >= 128 { 255 - p } else { p };
        assert_eq!(sol.pixels()[i], want);
        assert_eq!(post.pixels()[i], p & 0xF0);
    }
    // M=30: threshold 0, everything inverted.
    let all = apply_op(&img, ImageOp::Solarize, 30, &mut rng).unwrap();
    assert_eq!(all, apply_op(&img, ImageOp::Invert, 0, &mut rng).unwrap());
}

#[test]
fn brightness_scales_towards_black() {
    let img = Image::filled(8, 8, [100, 50, 20]).unwrap();
    let mut seen = HashSet::new();
    for seed in 0..16 {
        let out = apply_op(&img, ImageOp::Brightness, 30, &mut rng_from(&[seed])).unwrap();
        let rgb = (out.get(0, 0, 0), out.get(0, 0, 1), out.get(0, 0, 2));
        // factor 1.9 or 0.1, rounded half-up.
        assert!(rgb == (190, 95, 38) || rgb == (10, 5, 2), "{rgb:?}");
        seen.insert(rgb);
    }
    assert_eq!(seen.len(), 2, "both signs should occur");
}

#[test]
fn color_on_gray_image_is_identity() {
    let img = Image::filled(9, 9, [77, 77, 77]).unwrap();
    let out = apply_op(&img, ImageOp::Color, 30, &mut rng_from(&[3])).unwrap();
    assert_eq!(out, img);
}

#[test]
fn contrast_keeps_the_gray_mean_fixed() {
    let mut px = Vec::new();
    for i in 0..64 {
        let v = if i % 2 == 0 { 90 } else { 110 };
        px.extend([v, v, v]);
    }
    let img = Image::new(8, 8, px).unwrap();
    for seed in 0..8 {
        let out = apply_op(&img, ImageOp::Contrast, 30, &mut rng_from(&[seed])).unwrap();
        let (a, b) = (out.get(0, 0, 0), out.get(0, 1, 0));
        // mean 100, deviations of 10 scaled by 1.9 or 0.1
        assert!((a, b) == (81, 119) || (a, b) == (99, 101), "{a} {b}");
    }
}

#[test]
fn sharpness_leaves_flat_regions_and_borders() {
    let img = Image::filled(10, 10, [60, 120, 180]).unwrap();
    let out = apply_op(&img, ImageOp::Sharpness, 30, &mut rng_from(&[0])).unwrap();
    assert_eq!(out, img);

    let tex = textured(10, 10);
    let out = apply_op(&tex, ImageOp::Sharpness, 30, &mut rng_from(&[0])).unwrap();
    for x in 0..10 {
        for c in 0..3 {
            assert_eq!(out.get(0, x, c), tex.get(0, x, c));
            assert_eq!(out.get(9, x, c), tex.get(9, x, c));
        }
    }
}

#[test]
fn translate_at_full_magnitude_shifts_by_45_percent() {
    let img = textured(20, 20);
    for seed in 0..6 {
        let out = apply_op(&img, ImageOp::TranslateX, 30, &mut rng_from(&[seed])).unwrap();
        // 0.45 * 20 = 9 pixel shift, left or right
        let right = (0..20).all(|y| (9..20).all(|x| out.get(y, x, 0) == img.get(y, x - 9, 0)));
        let left = (0..20).all(|y| (0..11).all(|x| out.get(y, x, 0) == img.get(y, x + 9, 0)));
        assert!(right ^ left);
        let filled = (0..20)
            .flat_map(|y| (0..20).map(move |x| (y, x)))
            .filter(|&(y, x)| out.get(y, x, 0) == 128)
            .count();
        assert_eq!(filled, 9 * 20);
    }
}

#[test]
fn rotate_and_shear_keep_constant_interiors_and_center() {
    let img = Image::filled(21, 21, [33, 66, 99]).unwrap();
    for op in [ImageOp::Rotate, ImageOp::ShearX, ImageOp::ShearY] {
        let out = apply_op(&img, op, 30, &mut rng_from(&[5])).unwrap();
        assert_eq!(out.get(10, 10, 2), 99, "{op}");
        assert_eq!(out.get(8, 12, 0), 33, "{op}");
    }
    let tex = textured(21, 21);
    let rot = apply_op(&tex, ImageOp::Rotate, 30, &mut rng_from(&[5])).unwrap();
    assert_eq!(rot.get(10, 10, 0), tex.get(10, 10, 0));
    assert_ne!(rot, tex);
}

#[test]
fn cutout_fills_a_bounded_square_with_gray() {
    let img = textured(20, 20);
    for seed in 0..10 {
        let out = apply_op(&img, ImageOp::Cutout, 30, &mut rng_from(&[seed])).unwrap();
        let changed: Vec<_> = (0..20)
            .flat_map(|y| (0..20).map(move |x| (y, x)))
            .filter(|&(y, x)| out.get(y, x, 0) != img.get(y, x, 0))
            .collect();
        // side round(0.4 * 20) = 8, possibly clipped at the border
        assert!(!changed.is_empty() && changed.len() <= 64);
        for &(y, x) in &changed {
            assert_eq!((out.get(y, x, 0), out.get(y, x, 1), out.get(y, x, 2)), (128, 128, 128));
        }
        let ys: Vec<_> = changed.iter().map(|p| p.0).collect();
        let xs: Vec<_> = changed.iter().map(|p| p.1).collect();
        assert!(ys.iter().max().unwrap() - ys.iter().min().unwrap() < 8);
        assert!(xs.iter().max().unwrap() - xs.iter().min().unwrap() < 8);
    }
}

#[test]
fn equalize_is_identity_on_a_flat_histogram() {
    let px: Vec<u8> = (0..256).flat_map(|v| [v as u8, (255 - v) as u8, v as u8]).collect();
    let img = Image::new(16, 16, px).unwrap();
    let out = apply_op(&img, ImageOp::Equalize, 0, &mut rng_from(&[0])).unwrap();
    assert_eq!(out, img);
    assert_eq!(apply_op(&out, ImageOp::Equalize, 0, &mut rng_from(&[0])).unwrap(), out);
}

#[test]
fn equalize_spreads_a_narrow_histogram() {
    let px: Vec<u8> = (0..1024).flat_map(|i| { let v = 100 + (i % 4) as u8; [v, v, v] }).collect();
    let img = Image::new(32, 32, px).unwrap();
    let out = apply_op(&img, ImageOp::Equalize, 0, &mut rng_from(&[0])).unwrap();
    let vals: HashSet<u8> = out.pixels().iter().copied().collect();
    assert!(vals.contains(&0));
    assert!(*vals.iter().max().unwrap() >= 190);
}

#[test]
fn autocontrast_stretches_each_channel_to_full_range() {
    let img = textured(12, 12);
    let out = apply_op(&img, ImageOp::AutoContrast, 0, &mut rng_from(&[0])).unwrap();
    for c in 0..3 {
        let ch: Vec<u8> = out.pixels().iter().skip(c).step_by(3).copied().collect();
        assert_eq!(*ch.iter().min().unwrap(), 0);
        assert_eq!(*ch.iter().max().unwrap(), 255);
    }
}

#[test]
fn rand_augment_with_identity_policy_is_a_no_op() {
    let img = textured(14, 14);
    for n in 1..4 {
        let cfg = RandAugmentConfig {
            n_ops: n,
            magnitude: 30,
            policy: vec![ImageOp::Identity],
            seed: 9,
        };
        assert_eq!(rand_augment(&img, &cfg).unwrap(), img);
    }
}

#[test]
fn rand_augment_rejects_bad_configs() {
    let img = textured(8, 8);
    let empty = RandAugmentConfig { policy: vec![], ..Default::default() };
    assert!(rand_augment(&img, &empty).is_err());
    let zero = RandAugmentConfig { n_ops: 0, ..Default::default() };
    assert!(rand_augment(&img, &zero).is_err());
    let big = RandAugmentConfig { magnitude: 31, ..Default::default() };
    assert!(rand_augment(&img, &big).is_err());
}

#[test]
fn rand_augment_policy_output_is_a_composition_of_policy_ops() {
    let img = textured(12, 12);
    let cfg = RandAugmentConfig::default();
    assert_eq!((cfg.n_ops, cfg.magnitude), (2, 14));
    assert_eq!(cfg.policy, SCENE_POLICY.to_vec());

    // Every single-op result reachable under either sign.
    let step = |inputs: &HashSet<Vec<u8>>, h, w| -> HashSet<Vec<u8>> {
        let mut out = HashSet::new();
        for px in inputs {
            let x = Image::new(h, w, px.clone()).unwrap();
            for &op in &SCENE_POLICY {
                for s in 0..24 {
                    out.insert(apply_op(&x, op, 14, &mut rng_from(&[s])).unwrap().pixels().to_vec());
                }
            }
        }
        out
    };
    let one = step(&HashSet::from([img.pixels().to_vec()]), 12, 12);
    assert_eq!(one.len(), 5);
    let two = step(&one, 12, 12);
    for seed in 0..20 {
        let out = rand_augment(&img, &RandAugmentConfig { seed, ..cfg.clone() }).unwrap();
        assert!(two.contains(out.pixels()), "seed {seed}");
        assert_eq!(out, rand_augment(&img, &RandAugmentConfig { seed, ..cfg.clone() }).unwrap());
    }
}

#[test]
fn rand_augment_full_space_is_reproducible() {
    let img = textured(24, 24);
    let cfg = RandAugmentConfig {
        n_ops: 3,
        magnitude: 20,
        policy: SEARCH_SPACE.to_vec(),
        seed: 1234,
    };
    let a = rand_augment(&img, &cfg).unwrap();
    let b = rand_augment(&img, &cfg).unwrap();
    assert_eq!(a.pixels(), b.pixels());
    let outputs: HashSet<Vec<u8>> = (0..10)
        .map(|s| rand_augment(&img, &RandAugmentConfig { seed: s, ..cfg.clone() }).unwrap().pixels().to_vec())
        .collect();
    assert!(outputs.len() > 5);
}

#[test]
fn resize_constant_and_same_size() {
    let img = Image::filled(10, 13, [4, 5, 6]).unwrap();
    let out = resize_bilinear(&img, 224, 224).unwrap();
    assert_eq!((out.height(), out.width()), (224, 224));
    assert!(out.pixels().chunks(3).all(|p| p == [4, 5, 6]));
    let tex = textured(11, 15);
    assert_eq!(resize_bilinear(&tex, 11, 15).unwrap(), tex);
}

#[test]
fn resize_checkerboard_matches_interpolation_weights() {
    // Pixel checkerboard upscaled 2x. With half-pixel centers each output
    // coordinate d maps to d/2 - 0.25: even d (>0) blends neighbours with
    // weights 0.25/0.75, odd d with 0.75/0.25, and both ends clamp.
    let n = 8;
    let v = |y: usize, x: usize| if (x + y) % 2 == 0 { 0.0 } else { 240.0 };
    let px: Vec<u8> = (0..n * n).flat_map(|i| { let p = v(i / n, i % n) as u8; [p, p, p] }).collect();
    let img = Image::new(n, n, px).unwrap();
    let out = resize_bilinear(&img, 2 * n, 2 * n).unwrap();
    let taps = |d: usize| -> (usize, usize, f64) {
        match d {
            0 => (0, 0, 0.0),
            d if d == 2 * n - 1 => (n - 1, n - 1, 0.0),
            d if d % 2 == 1 => (d / 2, d / 2 + 1, 0.25),
            d => (d / 2 - 1, d / 2, 0.75),
        }
    };
    for y in 0..2 * n {
        let (y0, y1, wy) = taps(y);
        for x in 0..2 * n {
            let (x0, x1, wx) = taps(x);
            let want = (1.0 - wy) * ((1.0 - wx) * v(y0, x0) + wx * v(y0, x1))
                + wy * ((1.0 - wx) * v(y1, x0) + wx * v(y1, x1));
            assert_eq!(out.get(y, x, 0) as f64, (want + 0.5).floor(), "({y},{x})");
        }
    }
    // Corners copy the source; (1,1) blends 0.75^2*0 + 2*0.75*0.25*240 + 0.25^2*0.
    assert_eq!(out.get(0, 0, 0), 0);
    assert_eq!(out.get(1, 1, 0), 90);
}

#[test]
fn png_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("frame.png");
    let img = textured(9, 11);
    img.save_png(&path).unwrap();
    assert_eq!(Image::load_png(&path).unwrap(), img);
    assert!(Image::load_png(&dir.path().join("missing.png")).is_err());
}

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden")
}

const GOLDEN_MAGNITUDES: [u32; 3] = [0, 14, 30];

/// Compares every (op, M) output with the committed PNGs. Set
/// `AVSC_BLESS_GOLDEN=1` to regenerate them.
#[test]
fn golden_images_match() {
    let dir = golden_dir();
    let bless = std::env::var_os("AVSC_BLESS_GOLDEN").is_some();
    if bless {
        std::fs::create_dir_all(&dir).unwrap();
        textured(32, 32).save_png(&dir.join("input.png")).unwrap();
    }
    let input = Image::load_png(&dir.join("input.png")).unwrap();
    assert_eq!(input, textured(32, 32));
    for (k, op) in all_ops().into_iter().enumerate() {
        for m in GOLDEN_MAGNITUDES {
            let mut rng = rng_from(&[derive_seed(&[k as u64, m as u64])]);
            let out = apply_op(&input, op, m, &mut rng).unwrap();
            let path = dir.join(format!("{}_m{m:02}.png", op.name()));
            if bless {
                out.save_png(&path).unwrap();
            }
            let want = Image::load_png(&path).unwrap();
            assert_eq!(out, want, "{}", path.display());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn ops_preserve_shape(img in arb_image(), k in 0usize..16, m in 0u32..=30, seed in any::<u64>()) {
        let op = all_ops()[k];
        let out = apply_op(&img, op, m, &mut rng_from(&[seed])).unwrap();
        prop_assert_eq!((out.height(), out.width()), (img.height(), img.width()));
        prop_assert_eq!(out.pixels().len(), img.pixels().len());
    }

    #[test]
    fn autocontrast_is_idempotent(img in arb_image()) {
        let mut rng = rng_from(&[0]);
        let once = apply_op(&img, ImageOp::AutoContrast, 0, &mut rng).unwrap();
        let twice = apply_op(&once, ImageOp::AutoContrast, 0, &mut rng).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn invert_involution(img in arb_image()) {
        let mut rng = rng_from(&[0]);
        let twice = apply_op(&apply_op(&img, ImageOp::Invert, 0, &mut rng).unwrap(), ImageOp::Invert, 0, &mut rng).unwrap();
        prop_assert_eq!(twice, img);
    }
}
