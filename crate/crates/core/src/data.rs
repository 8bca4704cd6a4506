//! Labelled image datasets: procedural shapes and `root/<class>/<file>`
//! folders.

use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::geometry::{random_resized_crop_flip, CropFlipParams};
use crate::augment::color::hsv_to_rgb;
use crate::error::{io_err, Error, Result};
use crate::image::{ImageTensor, CHANNELS};
use crate::rng::{rng_from_key, sample_key};

pub const SHAPES: [&str; 5] = ["circle", "square", "triangle", "cross", "ring"];
pub const RAW_MAGIC: [u8; 4] = *b"IWMR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SynthTask {
    /// Label is the shape kind.
    Shape,
    /// Label is the image quadrant holding the shape centre.
    Quadrant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
    pub task: SynthTask,
}

impl SynthSpec {
    pub fn new(classes: usize, per_class: usize, size: usize, seed: u64) -> Self {
        SynthSpec {
            classes,
            per_class,
            size,
            seed,
            task: SynthTask::Shape,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DatasetRef {
    Folder { root: PathBuf, size: usize, seed: u64 },
    Synthetic(SynthSpec),
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<usize>,
    pub classes: Vec<String>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    /// One line per skipped file.
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Deterministic split: a sample goes to validation when its hash
    /// falls in the lowest `val_fraction`.
    pub fn split(&mut self, seed: u64, val_fraction: f64) {
        self.train.clear();
        self.val.clear();
        for i in 0..self.images.len() {
            let h = sample_key(seed, 0x5911, i as u64);
            if (h as f64 / u64::MAX as f64) < val_fraction {
                self.val.push(i);
            } else {
                self.train.push(i);
            }
        }
        if self.val.is_empty() && self.train.len() > 1 {
            let last = self.train.pop().expect("non-empty");
            self.val.push(last);
        }
    }
}

pub fn load(r: &DatasetRef) -> Result<Dataset> {
    match r {
        DatasetRef::Synthetic(spec) => synth_colorworld(spec),
        DatasetRef::Folder { root, size, seed } => ingest_folder(root, *size, *seed),
    }
}

// ---- synthetic --------------------------------------------------------------

fn inside(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => ax <= r * 0.8 && ay <= r * 0.8,
        2 => {
            // Upward triangle with apex at -r and base at +0.7r.
            let t = (dy + r) / (1.7 * r);
            (0.0..=1.0).contains(&t) && ax <= t * r
        }
        3 => (ax <= r * 0.3 && ay <= r) || (ay <= r * 0.3 && ax <= r),
        _ => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
        }
    }
}

fn random_color<R: Rng>(rng: &mut R, s: (f64, f64), v: (f64, f64)) -> [f64; 3] {
    hsv_to_rgb([rng.random::<f64>(), rng.random_range(s.0..s.1), rng.random_range(v.0..v.1)])
}

/// Renders one sample: a coloured shape on a two-tone textured background.
pub fn render_sample(shape: usize, size: usize, key: u64) -> (ImageTensor, (f64, f64)) {
    let mut rng = rng_from_key(key);
    let fg = random_color(&mut rng, (0.5, 1.0), (0.5, 1.0));
    let bg_a = random_color(&mut rng, (0.0, 0.6), (0.1, 0.9));
    let bg_b = random_color(&mut rng, (0.0, 0.6), (0.1, 0.9));
    let freq = rng.random_range(1.0..4.0) * std::f64::consts::TAU / size as f64;
    let angle = rng.random_range(0.0..std::f64::consts::PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    let sz = size as f64;
    let r = rng.random_range(0.18..0.3) * sz;
    let cx = rng.random_range(r..sz - r);
    let cy = rng.random_range(r..sz - r);
    let mut data = vec![0.0f32; CHANNELS * size * size];
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let rgb = if inside(shape, fx - cx, fy - cy, r) {
                fg
            } else {
                let t = 0.5 + 0.5 * ((fx * ca + fy * sa) * freq).sin();
                [0, 1, 2].map(|c| bg_a[c] * t + bg_b[c] * (1.0 - t))
            };
            for c in 0..CHANNELS {
                data[(c * size + y) * size + x] = rgb[c] as f32;
            }
        }
    }
    (ImageTensor::new(size, size, data).expect("sized"), (cx / sz, cy / sz))
}

pub fn synth_colorworld(spec: &SynthSpec) -> Result<Dataset> {
    let max = match spec.task {
        SynthTask::Shape => SHAPES.len(),
        SynthTask::Quadrant => 4,
    };
    if spec.classes == 0 || spec.classes > max {
        return Err(Error::Data(format!("{} classes requested, at most {max} available", spec.classes)));
    }
    if spec.per_class == 0 || spec.size < 8 {
        return Err(Error::Data("synthetic dataset needs samples and size >= 8".into()));
    }
    let n = spec.classes * spec.per_class;
    let items: Vec<(ImageTensor, usize)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let class = i % spec.classes;
            let key = sample_key(spec.seed, 0xC010, i as u64);
            match spec.task {
                SynthTask::Shape => (render_sample(class, spec.size, key).0, class),
                SynthTask::Quadrant => {
                    let shape = (key % SHAPES.len() as u64) as usize;
                    let (img, (cx, cy)) = render_sample(shape, spec.size, key);
                    let q = usize::from(cx >= 0.5) + 2 * usize::from(cy >= 0.5);
                    (img, q % spec.classes)
                }
            }
        })
        .collect();
    let (images, labels) = items.into_iter().unzip();
    let classes = match spec.task {
        SynthTask::Shape => SHAPES[..spec.classes].iter().map(|s| s.to_string()).collect(),
        SynthTask::Quadrant => (0..spec.classes).map(|q| format!("quadrant{q}")).collect(),
    };
    let mut ds = Dataset {
        images,
        labels,
        classes,
        ..Default::default()
    };
    ds.split(spec.seed, 0.1);
    Ok(ds)
}

// ---- folders ----------------------------------------------------------------

/// Raw CHW u8 file: magic, then height, width, channels as LE u32.
pub fn encode_raw(img: &ImageTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + img.data().len());
    out.extend_from_slice(&RAW_MAGIC);
    for v in [img.height() as u32, img.width() as u32, CHANNELS as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend(img.data().iter().map(|&v| (v * 255.0).round() as u8));
    out
}

pub fn decode_raw(bytes: &[u8]) -> Result<ImageTensor> {
    if bytes.len() < 16 || bytes[..4] != RAW_MAGIC {
        return Err(Error::Data("not a raw CHW file".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (h, w, c) = (word(4), word(8), word(12));
    if c != CHANNELS || h == 0 || w == 0 || bytes.len() != 16 + c * h * w {
        return Err(Error::Data(format!("raw header {h}x{w}x{c} does not match payload")));
    }
    let data = bytes[16..].iter().map(|&b| b as f32 / 255.0).collect();
    ImageTensor::new(h, w, data).ok_or_else(|| Error::Data("bad raw image".into()))
}

pub fn decode_png(bytes: &[u8]) -> Result<ImageTensor> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Data(e.to_string()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(ImageTensor::from_fn(h, w, |c, y, x| {
        img.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0
    }))
}

pub fn write_png(img: &ImageTensor, path: &Path) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, img.to_rgb8())
        .ok_or_else(|| Error::Invalid("image buffer size".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn decode_file(path: &Path) -> Result<ImageTensor> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    if bytes.starts_with(&RAW_MAGIC) {
        decode_raw(&bytes)
    } else {
        decode_png(&bytes)
    }
}

/// Square resize of the whole image.
pub fn resize(img: &ImageTensor, size: usize) -> ImageTensor {
    if img.height() == size && img.width() == size {
        return img.clone();
    }
    random_resized_crop_flip(img, &CropFlipParams::full(img), size, size)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    v.sort();
    Ok(v)
}

pub fn ingest_folder(root: &Path, size: usize, seed: u64) -> Result<Dataset> {
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::Data(format!("{}: no class directories", root.display())));
    }
    let mut files = Vec::new();
    let mut classes = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        classes.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
        for f in sorted_entries(dir)?.into_iter().filter(|p| p.is_file()) {
            files.push((f, label));
        }
    }
    let decoded: Vec<Result<ImageTensor>> = files
        .par_iter()
        .map(|(f, _)| decode_file(f).map(|img| resize(&img, size)))
        .collect();
    let mut ds = Dataset {
        classes,
        ..Default::default()
    };
    let mut per_class = vec![0usize; ds.classes.len()];
    for ((path, label), r) in files.iter().zip(decoded) {
        match r {
            Ok(img) => {
                ds.images.push(img);
                ds.labels.push(*label);
                per_class[*label] += 1;
            }
            Err(e) => {
                let w = format!("skipped {}: {e}", path.display());
                log::warn!("{w}");
                ds.warnings.push(w);
            }
        }
    }
    if let Some(c) = per_class.iter().position(|&n| n == 0) {
        return Err(Error::Data(format!("class `{}` has no readable images", ds.classes[c])));
    }
    ds.split(seed, 0.1);
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_reproducible() {
        let spec = SynthSpec::new(4, 3, 32, 9);
        let a = synth_colorworld(&spec).unwrap();
        let b = synth_colorworld(&spec).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, vec![0, 1, 2, 3, 0, 1, 2, 3, 0, 1, 2, 3]);
        assert_eq!(a.train, b.train);
        assert!(!a.val.is_empty());
    }

    #[test]
    fn raw_round_trip() {
        let (img, _) = render_sample(2, 16, 5);
        let back = decode_raw(&encode_raw(&img)).unwrap();
        assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-6);
        assert!(decode_raw(&encode_raw(&img)[..20]).is_err());
    }

    #[test]
    fn too_many_classes() {
        assert!(synth_colorworld(&SynthSpec::new(6, 1, 16, 0)).is_err());
    }
}
