//! Every photometric and geometric transform against a brute-force
//! per-pixel reference written independently of the library code.

mod common;

use common::oracles::{self, dense_blur, gray, max_err, mean_gray, reference_mask};
use iwm_core::augment::color::{gaussian_kernel, LUMA};
use iwm_core::augment::{
    adjust_color, adjust_hue, gaussian_blur, random_resized_crop_flip, sample_mask, solarize, to_grayscale, ColorKind,
    CropFlipParams, MaskConfig,
};
use iwm_core::ImageTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;

fn random_images(n: usize, seed: u64) -> Vec<ImageTensor> {
    oracles::random_images(&mut ChaCha8Rng::seed_from_u64(seed), n)
}

#[test]
fn luma_weights() {
    assert_eq!(LUMA, [0.299, 0.587, 0.114]);
}

#[test]
fn brightness_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for img in random_images(100, 10) {
        let f = rng.random_range(0.0..2.0);
        let out = adjust_color(&img, ColorKind::Brightness, f);
        assert!(max_err(&out, &img, |_, _, p| p.map(|v| v * f)) <= TOL);
    }
}

#[test]
fn contrast_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for img in random_images(100, 11) {
        let f = rng.random_range(0.0..2.0);
        let mean = mean_gray(&img);
        let out = adjust_color(&img, ColorKind::Contrast, f);
        assert!(max_err(&out, &img, |_, _, p| p.map(|v| mean + f * (v - mean))) <= TOL);
    }
}

#[test]
fn saturation_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for img in random_images(100, 12) {
        let f = rng.random_range(0.0..2.0);
        let out = adjust_color(&img, ColorKind::Saturation, f);
        let err = max_err(&out, &img, |_, _, p| {
            let g = gray(p);
            p.map(|v| g * (1.0 - f) + v * f)
        });
        assert!(err <= TOL);
    }
}

#[test]
fn hue_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for img in random_images(100, 13) {
        let d = rng.random_range(-0.5..0.5);
        let out = adjust_hue(&img, d);
        assert!(max_err(&out, &img, |_, _, p| oracles::hue_shift(p, d)) <= TOL, "shift {d}");
    }
}

#[test]
fn hue_full_turn_is_identity() {
    for img in random_images(20, 14) {
        let out = adjust_hue(&img, 1.0);
        assert!(out.max_abs_diff(&img) < 1e-6);
    }
}

#[test]
fn grayscale_matches_reference() {
    for img in random_images(100, 15) {
        let out = to_grayscale(&img);
        assert!(max_err(&out, &img, |_, _, p| [gray(p); 3]) <= TOL);
    }
}

#[test]
fn solarize_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for img in random_images(100, 16) {
        let t = rng.random_range(0.0..1.0);
        let out = solarize(&img, t);
        assert!(max_err(&out, &img, |_, _, p| p.map(|v| if v < t { v } else { 1.0 - v })) <= TOL);
    }
}

#[test]
fn blur_matches_dense_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for img in random_images(100, 17) {
        let sigma = rng.random_range(0.1..2.0);
        let out = gaussian_blur(&img, sigma);
        let want = dense_blur(&img, sigma);
        assert!(out.max_abs_diff(&want) as f64 <= TOL, "sigma {sigma}");
    }
}

#[test]
fn narrow_blur_is_nearly_identity() {
    for img in random_images(100, 18) {
        let out = gaussian_blur(&img, 0.1);
        assert!(out.max_abs_diff(&img) as f64 <= 1e-3);
    }
}

#[test]
fn blur_of_impulse_is_kernel_outer_product() {
    let n = 15;
    let mut img = ImageTensor::filled(n, n, [0.0; 3]);
    img.set_pixel(7, 7, [1.0; 3]);
    for sigma in [0.5, 1.0, 2.0] {
        let k = gaussian_kernel(sigma);
        let half = k.len() as i64 / 2;
        let out = gaussian_blur(&img, sigma);
        for y in 0..n {
            for x in 0..n {
                let (dy, dx) = (y as i64 - 7, x as i64 - 7);
                let want = if dy.abs() <= half && dx.abs() <= half {
                    k[(dy + half) as usize] * k[(dx + half) as usize]
                } else {
                    0.0
                };
                assert!((out.get(0, y, x) as f64 - want).abs() < 1e-7);
            }
        }
    }
}

#[test]
fn bilinear_crop_of_ramp() {
    let ramp = ImageTensor::from_fn(4, 4, |_, y, x| (4 * y + x) as f32 / 15.0);
    let crop = CropFlipParams {
        top: 1,
        left: 1,
        height: 2,
        width: 2,
        flip: false,
    };
    let out = random_resized_crop_flip(&ramp, &crop, 4, 4);
    // Half-pixel centres 0.75, 1.25, 1.75, 2.25 clamped to the crop [1, 2].
    let coords = [1.0, 1.25, 1.75, 2.0];
    for y in 0..4 {
        for x in 0..4 {
            let want = (4.0 * coords[y] + coords[x]) / 15.0;
            assert!((out.get(1, y, x) as f64 - want).abs() < 1e-6, "({y},{x})");
        }
    }
    let flipped = random_resized_crop_flip(&ramp, &CropFlipParams { flip: true, ..crop }, 4, 4);
    for y in 0..4 {
        for x in 0..4 {
            assert_eq!(flipped.get(0, y, x), out.get(0, y, 3 - x));
        }
    }
}

#[test]
fn same_size_crop_copies_pixels() {
    for img in random_images(30, 19) {
        let (h, w) = (img.height(), img.width());
        let out = random_resized_crop_flip(&img, &CropFlipParams::full(&img), h, w);
        assert_eq!(out, img);
    }
}

#[test]
fn mask_statistics_match_monte_carlo_reference() {
    let g = 8;
    let trials = 20_000;
    let cfg = MaskConfig::default();
    let mut lib_rng = ChaCha8Rng::seed_from_u64(100);
    let mut ref_rng = ChaCha8Rng::seed_from_u64(200);
    let mut lib_cell = vec![0.0; g * g];
    let mut ref_cell = vec![0.0; g * g];
    let (mut lib_frac, mut ref_frac) = (0.0, 0.0);
    for _ in 0..trials {
        let m = sample_mask(&mut lib_rng, g, g, &cfg);
        lib_frac += m.masked_fraction();
        for i in m.masked_indices() {
            lib_cell[i] += 1.0;
        }
        let r = reference_mask(&mut ref_rng, g);
        ref_frac += r.iter().filter(|&&b| b).count() as f64 / (g * g) as f64;
        for (i, &b) in r.iter().enumerate() {
            if b {
                ref_cell[i] += 1.0;
            }
        }
    }
    let t = trials as f64;
    assert!((lib_frac / t - ref_frac / t).abs() < 0.02, "{} vs {}", lib_frac / t, ref_frac / t);
    for i in 0..g * g {
        let (a, b) = (lib_cell[i] / t, ref_cell[i] / t);
        assert!((a - b).abs() < 0.02, "cell {i}: {a} vs {b}");
    }
}
