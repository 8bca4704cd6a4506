//! Photometric transforms. All arithmetic runs in f64 per pixel and the
//! result is clamped back into `[0, 1]`.

use crate::image::{ImageTensor, CHANNELS};

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorKind {
    Brightness,
    Contrast,
    Saturation,
}

#[inline]
pub fn luma(p: [f64; 3]) -> f64 {
    LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]
}

pub fn mean_luma(img: &ImageTensor) -> f64 {
    let plane = img.height() * img.width();
    let d = img.data();
    let mut acc = 0.0;
    for i in 0..plane {
        acc += luma([d[i] as f64, d[plane + i] as f64, d[2 * plane + i] as f64]);
    }
    acc / plane as f64
}

pub fn adjust_color(img: &ImageTensor, kind: ColorKind, factor: f64) -> ImageTensor {
    let f = factor.max(0.0);
    match kind {
        ColorKind::Brightness => img.map_values(|v| f * v),
        ColorKind::Contrast => {
            let mu = mean_luma(img);
            img.map_values(|v| mu + f * (v - mu))
        }
        ColorKind::Saturation => img.map_pixels(|p| {
            let g = luma(p);
            [g + f * (p[0] - g), g + f * (p[1] - g), g + f * (p[2] - g)]
        }),
    }
}

pub fn rgb_to_hsv(p: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = p;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    [h, s, max]
}

pub fn hsv_to_rgb(hsv: [f64; 3]) -> [f64; 3] {
    let [h, s, v] = hsv;
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as i64).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Rotates hue by `delta` turns.
pub fn adjust_hue(img: &ImageTensor, delta: f64) -> ImageTensor {
    if delta == 0.0 {
        return img.clone();
    }
    img.map_pixels(|p| {
        let [h, s, v] = rgb_to_hsv(p);
        hsv_to_rgb([(h + delta).rem_euclid(1.0), s, v])
    })
}

pub fn to_grayscale(img: &ImageTensor) -> ImageTensor {
    img.map_pixels(|p| {
        let g = luma(p);
        [g, g, g]
    })
}

pub fn solarize(img: &ImageTensor, threshold: f64) -> ImageTensor {
    img.map_values(|v| if v >= threshold { 1.0 - v } else { v })
}

pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let half = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Reflect-101 index (`d c b | a b c d | c b a`), repeated until in range.
pub fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as i64;
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Separable Gaussian blur with reflected edges.
pub fn gaussian_blur(img: &ImageTensor, sigma: f64) -> ImageTensor {
    let k = gaussian_kernel(sigma);
    let half = (k.len() / 2) as i64;
    let (h, w) = (img.height(), img.width());
    let mut tmp = vec![0.0f64; CHANNELS * h * w];
    for c in 0..CHANNELS {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let xx = reflect(x as i64 + j as i64 - half, w);
                    acc += kv * img.get(c, y, xx) as f64;
                }
                tmp[(c * h + y) * w + x] = acc;
            }
        }
    }
    ImageTensor::from_fn(h, w, |c, y, x| {
        let mut acc = 0.0;
        for (j, kv) in k.iter().enumerate() {
            let yy = reflect(y as i64 + j as i64 - half, h);
            acc += kv * tmp[(c * h + yy) * w + x];
        }
        acc as f32
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn px(rgb: [f32; 3]) -> ImageTensor {
        ImageTensor::filled(1, 1, rgb)
    }

    #[test]
    fn factor_one_is_identity() {
        let img = ImageTensor::from_fn(4, 5, |c, y, x| ((c * 7 + y * 3 + x) % 11) as f32 / 10.0);
        for kind in [ColorKind::Brightness, ColorKind::Contrast, ColorKind::Saturation] {
            assert!(adjust_color(&img, kind, 1.0).max_abs_diff(&img) < 1e-7);
        }
        assert_eq!(adjust_hue(&img, 0.0), img);
    }

    #[test]
    fn saturation_zero_is_grayscale() {
        let img = ImageTensor::from_fn(3, 3, |c, y, x| ((c + 2 * y + x) % 5) as f32 / 4.0);
        let a = adjust_color(&img, ColorKind::Saturation, 0.0);
        assert!(a.max_abs_diff(&to_grayscale(&img)) < 1e-7);
    }

    #[test]
    fn brightness_clamps() {
        let out = adjust_color(&px([0.9, 0.9, 0.9]), ColorKind::Brightness, 1.3);
        assert_eq!(out.pixel(0, 0), [1.0, 1.0, 1.0]);
    }

    #[test]
    fn hue_half_turn_red_to_cyan() {
        let out = adjust_hue(&px([1.0, 0.0, 0.0]), 0.5);
        let p = out.pixel(0, 0);
        assert!(p[0].abs() < 1e-6 && (p[1] - 1.0).abs() < 1e-6 && (p[2] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn grayscale_values() {
        assert_eq!(to_grayscale(&px([1.0, 1.0, 1.0])).pixel(0, 0), [1.0; 3]);
        let g = to_grayscale(&px([1.0, 0.0, 0.0])).pixel(0, 0);
        assert!(g.iter().all(|v| (v - 0.299).abs() < 1e-7));
    }

    #[test]
    fn solarize_cases() {
        assert!((solarize(&px([0.8; 3]), 0.5).pixel(0, 0)[0] - 0.2).abs() < 1e-6);
        assert_eq!(solarize(&px([0.3; 3]), 0.5).pixel(0, 0)[0], 0.3);
        assert!((solarize(&px([0.3; 3]), 0.0).pixel(0, 0)[0] - 0.7).abs() < 1e-6);
    }

    #[test]
    fn blur_keeps_constant() {
        let img = ImageTensor::filled(6, 7, [0.25, 0.5, 0.75]);
        assert!(gaussian_blur(&img, 1.3).max_abs_diff(&img) < 1e-6);
    }

    #[test]
    fn reflect_101() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }
}
