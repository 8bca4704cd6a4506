//! Brute-force references written independently of the library code.
//! Shared by the oracle tests and the acceptance run.

#![allow(dead_code)]

use iwm_core::ImageTensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_images(rng: &mut ChaCha8Rng, n: usize) -> Vec<ImageTensor> {
    (0..n)
        .map(|_| {
            let h = rng.random_range(1..12);
            let w = rng.random_range(1..12);
            ImageTensor::from_fn(h, w, |_, _, _| rng.random::<f32>())
        })
        .collect()
}

pub fn px(img: &ImageTensor, y: usize, x: usize) -> [f64; 3] {
    [0, 1, 2].map(|c| img.get(c, y, x) as f64)
}

pub fn gray(p: [f64; 3]) -> f64 {
    p[0] * 0.299 + p[1] * 0.587 + p[2] * 0.114
}

/// Largest deviation of `out` from a per-pixel reference clamped to [0, 1].
pub fn max_err(out: &ImageTensor, img: &ImageTensor, mut f: impl FnMut(usize, usize, [f64; 3]) -> [f64; 3]) -> f64 {
    assert_eq!((out.height(), out.width()), (img.height(), img.width()));
    let mut worst: f64 = 0.0;
    for y in 0..img.height() {
        for x in 0..img.width() {
            let want = f(y, x, px(img, y, x));
            for (c, w) in want.iter().enumerate() {
                worst = worst.max((out.get(c, y, x) as f64 - w.clamp(0.0, 1.0)).abs());
            }
        }
    }
    worst
}

pub fn mean_gray(img: &ImageTensor) -> f64 {
    let mut total = 0.0;
    for y in 0..img.height() {
        for x in 0..img.width() {
            total += gray(px(img, y, x));
        }
    }
    total / (img.height() * img.width()) as f64
}

/// Hexcone conversion in the formulation of Python's `colorsys`.
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let maxc = r.max(g).max(b);
    let minc = r.min(g).min(b);
    let v = maxc;
    if minc == maxc {
        return (0.0, 0.0, v);
    }
    let s = (maxc - minc) / maxc;
    let rc = (maxc - r) / (maxc - minc);
    let gc = (maxc - g) / (maxc - minc);
    let bc = (maxc - b) / (maxc - minc);
    let h = if r == maxc {
        bc - gc
    } else if g == maxc {
        2.0 + rc - bc
    } else {
        4.0 + gc - rc
    };
    ((h / 6.0).rem_euclid(1.0), s, v)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    if s == 0.0 {
        return [v, v, v];
    }
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

pub fn hue_shift(p: [f64; 3], d: f64) -> [f64; 3] {
    let (h, s, v) = rgb_to_hsv(p[0], p[1], p[2]);
    hsv_to_rgb((h + d).rem_euclid(1.0), s, v)
}

/// Mirror index without repeating the edge sample, by walking.
pub fn mirror(mut i: i64, n: i64) -> i64 {
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i;
        }
    }
}

/// Full 2-D Gaussian convolution with mirrored borders.
pub fn dense_blur(img: &ImageTensor, sigma: f64) -> ImageTensor {
    let half = (3.0 * sigma).ceil().max(1.0) as i64;
    let weight = |d: i64| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp();
    let norm: f64 = (-half..=half).map(weight).sum();
    let (h, w) = (img.height() as i64, img.width() as i64);
    ImageTensor::from_fn(img.height(), img.width(), |c, y, x| {
        let mut acc = 0.0;
        for dy in -half..=half {
            for dx in -half..=half {
                let yy = mirror(y as i64 + dy, h) as usize;
                let xx = mirror(x as i64 + dx, w) as usize;
                acc += weight(dy) * weight(dx) * img.get(c, yy, xx) as f64;
            }
        }
        (acc / (norm * norm)) as f32
    })
}

/// Masks from a from-scratch sampler: union of 4 rectangles, area 15-20%
/// of the grid each, aspect 0.75-1.5.
pub fn reference_mask(rng: &mut ChaCha8Rng, g: usize) -> Vec<bool> {
    let n = (g * g) as f64;
    let mut m = vec![false; g * g];
    for _ in 0..4 {
        let s: f64 = rng.random_range(0.15..=0.2);
        let r: f64 = rng.random_range(0.75..=1.5);
        let h = ((s * n * r).sqrt().round() as usize).clamp(1, g);
        let w = ((s * n / r).sqrt().round() as usize).clamp(1, g);
        let top = rng.random_range(0..=g - h);
        let left = rng.random_range(0..=g - w);
        for y in top..top + h {
            for x in left..left + w {
                m[y * g + x] = true;
            }
        }
    }
    m
}

/// Rank of the truth by bubble-sorting every entry, ties by index.
pub fn sort_rank(distances: &[f64], truth: usize) -> usize {
    let mut idx: Vec<usize> = (0..distances.len()).collect();
    for i in 0..idx.len() {
        for j in 0..idx.len() - 1 - i {
            let (a, b) = (idx[j], idx[j + 1]);
            if distances[a] > distances[b] || (distances[a] == distances[b] && a > b) {
                idx.swap(j, j + 1);
            }
        }
    }
    1 + idx.iter().position(|&i| i == truth).unwrap()
}

/// `sum_i ||p_i - t_i||^2` over row-major `[n, d]` buffers.
pub fn double_loop_loss(p: &[f32], t: &[f32], n: usize, d: usize) -> f64 {
    let mut total = 0.0f64;
    for i in 0..n {
        let mut row = 0.0f64;
        for j in 0..d {
            let diff = p[i * d + j] as f64 - t[i * d + j] as f64;
            row += diff * diff;
        }
        total += row;
    }
    total
}

pub fn harmonic_mean_rank(n: usize) -> f64 {
    (1..=n).map(|k| 1.0 / k as f64).sum::<f64>() / n as f64
}
