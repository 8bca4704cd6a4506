use serde::{Deserialize, Serialize};

/// Three-channel image, row-major CHW, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

pub const CHANNELS: usize = 3;

impl ImageTensor {
    /// Builds an image from CHW data, clamping every value into `[0, 1]`.
    pub fn new(height: usize, width: usize, mut data: Vec<f32>) -> Option<Self> {
        if height == 0 || width == 0 || data.len() != CHANNELS * height * width {
            return None;
        }
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Some(ImageTensor {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in rgb {
            data.extend(std::iter::repeat_n(c.clamp(0.0, 1.0), height * width));
        }
        ImageTensor {
            height,
            width,
            data,
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x).clamp(0.0, 1.0));
                }
            }
        }
        ImageTensor {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v.clamp(0.0, 1.0);
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.set(c, y, x, v);
        }
    }

    /// Applies `f` to every RGB pixel.
    pub fn map_pixels(&self, mut f: impl FnMut([f64; 3]) -> [f64; 3]) -> ImageTensor {
        let plane = self.height * self.width;
        let mut data = vec![0.0f32; self.data.len()];
        for i in 0..plane {
            let px = [
                self.data[i] as f64,
                self.data[plane + i] as f64,
                self.data[2 * plane + i] as f64,
            ];
            let out = f(px);
            for c in 0..CHANNELS {
                data[c * plane + i] = out[c].clamp(0.0, 1.0) as f32;
            }
        }
        ImageTensor {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> ImageTensor {
        ImageTensor {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|&v| f(v as f64).clamp(0.0, 1.0) as f32)
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &ImageTensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Quantises to interleaved RGB8 for export.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..CHANNELS {
                    out.push((self.get(c, y, x) * 255.0).round() as u8);
                }
            }
        }
        out
    }
}
