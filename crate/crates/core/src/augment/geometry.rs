use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::image::{ImageTensor, CHANNELS};

/// Crop rectangle in source pixels plus a horizontal flip flag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropFlipParams {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub flip: bool,
}

impl CropFlipParams {
    pub fn full(img: &ImageTensor) -> Self {
        CropFlipParams {
            top: 0,
            left: 0,
            height: img.height(),
            width: img.width(),
            flip: false,
        }
    }

    pub fn fits(&self, h: usize, w: usize) -> bool {
        self.height > 0 && self.width > 0 && self.top + self.height <= h && self.left + self.width <= w
    }
}

/// Samples a crop whose area fraction lies in `scale` with aspect ratio in
/// `[3/4, 4/3]` (log-uniform). Falls back to the full image after 10 misses.
pub fn sample_crop<R: Rng + ?Sized>(
    rng: &mut R,
    h: usize,
    w: usize,
    scale: (f64, f64),
    flip_prob: f64,
) -> CropFlipParams {
    let area = (h * w) as f64;
    let (lr0, lr1) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    let mut rect = None;
    for _ in 0..10 {
        let target = area * rng.random_range(scale.0..=scale.1);
        let ratio = rng.random_range(lr0..=lr1).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            rect = Some((top, left, ch, cw));
            break;
        }
    }
    let (top, left, height, width) = rect.unwrap_or((0, 0, h, w));
    let flip = rng.random_bool(flip_prob);
    CropFlipParams {
        top,
        left,
        height,
        width,
        flip,
    }
}

/// Bilinear sample of channel `c` at continuous coordinates, clamped at edges.
pub fn bilinear(img: &ImageTensor, c: usize, y: f64, x: f64) -> f64 {
    let ymax = (img.height() - 1) as f64;
    let xmax = (img.width() - 1) as f64;
    let y = y.clamp(0.0, ymax);
    let x = x.clamp(0.0, xmax);
    let y0 = y.floor();
    let x0 = x.floor();
    let (dy, dx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as usize, x0 as usize);
    let y1 = (y0 + 1).min(img.height() - 1);
    let x1 = (x0 + 1).min(img.width() - 1);
    let v00 = img.get(c, y0, x0) as f64;
    let v01 = img.get(c, y0, x1) as f64;
    let v10 = img.get(c, y1, x0) as f64;
    let v11 = img.get(c, y1, x1) as f64;
    (1.0 - dy) * ((1.0 - dx) * v00 + dx * v01) + dy * ((1.0 - dx) * v10 + dx * v11)
}

/// Crops, resizes to `out_h x out_w` with half-pixel-centred bilinear
/// sampling, then flips if requested.
pub fn random_resized_crop_flip(
    img: &ImageTensor,
    p: &CropFlipParams,
    out_h: usize,
    out_w: usize,
) -> ImageTensor {
    assert!(p.fits(img.height(), img.width()), "crop outside image");
    let sy = p.height as f64 / out_h as f64;
    let sx = p.width as f64 / out_w as f64;
    let identity = p.height == out_h && p.width == out_w;
    let mut data = Vec::with_capacity(CHANNELS * out_h * out_w);
    for c in 0..CHANNELS {
        for y in 0..out_h {
            for x in 0..out_w {
                let xo = if p.flip { out_w - 1 - x } else { x };
                let v = if identity {
                    img.get(c, p.top + y, p.left + xo) as f64
                } else {
                    let fy = p.top as f64 + (y as f64 + 0.5) * sy - 0.5;
                    let fx = p.left as f64 + (xo as f64 + 0.5) * sx - 0.5;
                    let fy = fy.clamp(p.top as f64, (p.top + p.height - 1) as f64);
                    let fx = fx.clamp(p.left as f64, (p.left + p.width - 1) as f64);
                    bilinear(img, c, fy, fx)
                };
                data.push(v as f32);
            }
        }
    }
    ImageTensor::new(out_h, out_w, data).expect("sized buffer")
}

pub fn hflip(img: &ImageTensor) -> ImageTensor {
    let w = img.width();
    ImageTensor::from_fn(img.height(), w, |c, y, x| img.get(c, y, w - 1 - x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> ImageTensor {
        ImageTensor::from_fn(h, w, |c, y, x| (c * 100 + y * w + x) as f32 / 400.0)
    }

    #[test]
    fn full_crop_is_identity() {
        let img = ramp(5, 6);
        let p = CropFlipParams::full(&img);
        assert_eq!(random_resized_crop_flip(&img, &p, 5, 6), img);
    }

    #[test]
    fn flip_twice() {
        let img = ramp(4, 7);
        assert_eq!(hflip(&hflip(&img)), img);
        let mut p = CropFlipParams::full(&img);
        p.flip = true;
        assert_eq!(random_resized_crop_flip(&img, &p, 4, 7), hflip(&img));
    }

    #[test]
    fn sampled_crops_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let p = sample_crop(&mut rng, 64, 48, (0.3, 1.0), 0.5);
            assert!(p.fits(64, 48));
            let frac = (p.height * p.width) as f64 / (64.0 * 48.0);
            assert!(frac > 0.28 && frac <= 1.0, "{frac}");
        }
    }
}
