//! Source/target view construction and the action vector linking them.

pub mod color;
pub mod geometry;
pub mod mask;
pub mod preset;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use color::{adjust_color, adjust_hue, gaussian_blur, solarize, to_grayscale, ColorKind};
pub use geometry::{random_resized_crop_flip, sample_crop, CropFlipParams};
pub use mask::{sample_mask, MaskConfig, MaskSpec, Rect};
pub use preset::{AugPreset, JitterStrength, PRESET_NAMES};

use crate::image::ImageTensor;

/// Number of action entries.
pub const ACTION_DIM: usize = 8;
pub const MAX_BLUR_SIGMA: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub applied: bool,
}

impl JitterParams {
    pub const IDENTITY: JitterParams = JitterParams {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue: 0.0,
        applied: false,
    };

    /// Applies jitter with probability `s.prob`; factors uniform in
    /// `[1 - s, 1 + s]`, hue shift uniform in `[-s, s]`.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, s: &JitterStrength) -> Self {
        if !rng.random_bool(s.prob) {
            return Self::IDENTITY;
        }
        JitterParams {
            brightness: rng.random_range(1.0 - s.brightness..=1.0 + s.brightness),
            contrast: rng.random_range(1.0 - s.contrast..=1.0 + s.contrast),
            saturation: rng.random_range(1.0 - s.saturation..=1.0 + s.saturation),
            hue: rng.random_range(-s.hue..=s.hue),
            applied: true,
        }
    }

    /// Brightness, contrast, saturation, hue, in that order.
    pub fn apply(&self, img: &ImageTensor) -> ImageTensor {
        if !self.applied {
            return img.clone();
        }
        let a = adjust_color(img, ColorKind::Brightness, self.brightness);
        let a = adjust_color(&a, ColorKind::Contrast, self.contrast);
        let a = adjust_color(&a, ColorKind::Saturation, self.saturation);
        adjust_hue(&a, self.hue)
    }

    /// Parameters of applying `self` after `first`, treating the factors as
    /// multiplicative and hue as additive.
    pub fn compose_after(&self, first: &JitterParams) -> JitterParams {
        JitterParams {
            brightness: self.brightness * first.brightness,
            contrast: self.contrast * first.contrast,
            saturation: self.saturation * first.saturation,
            hue: self.hue + first.hue,
            applied: self.applied || first.applied,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DestructiveParams {
    pub grayscale: bool,
    pub blur_sigma: Option<f64>,
    pub solarize: bool,
}

impl DestructiveParams {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, p: &AugPreset) -> Self {
        let grayscale = rng.random_bool(p.grayscale_prob);
        let blur_sigma = if rng.random_bool(p.blur_prob) {
            Some(rng.random_range(p.blur_sigma.0..=p.blur_sigma.1))
        } else {
            None
        };
        let solarize = rng.random_bool(p.solarize_prob);
        DestructiveParams {
            grayscale,
            blur_sigma,
            solarize,
        }
    }

    /// Grayscale, blur, solarize, in that order.
    pub fn apply(&self, img: &ImageTensor, threshold: f64) -> ImageTensor {
        let mut out = img.clone();
        if self.grayscale {
            out = to_grayscale(&out);
        }
        if let Some(s) = self.blur_sigma {
            out = gaussian_blur(&out, s);
        }
        if self.solarize {
            out = solarize(&out, threshold);
        }
        out
    }
}

/// `[dlog f_b, dlog f_c, dlog f_s, d hue, gray, blur, sigma / 2, solarize]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionVector(pub [f64; ACTION_DIM]);

impl ActionVector {
    pub const ZERO: ActionVector = ActionVector([0.0; ACTION_DIM]);

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&v| v as f32).collect()
    }
}

/// Action turning the source into the target. `source` holds the
/// effective jitter of the source relative to the shared crop.
pub fn encode_action(
    source: &JitterParams,
    destructive: &DestructiveParams,
    target: &JitterParams,
) -> ActionVector {
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    ActionVector([
        (target.brightness / source.brightness).ln(),
        (target.contrast / source.contrast).ln(),
        (target.saturation / source.saturation).ln(),
        target.hue - source.hue,
        flag(destructive.grayscale),
        flag(destructive.blur_sigma.is_some()),
        destructive.blur_sigma.map_or(0.0, |s| s / MAX_BLUR_SIGMA),
        flag(destructive.solarize),
    ])
}

/// Output resolution and patch size of the views.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewGeometry {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl ViewGeometry {
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }
}

/// One training sample. Source pixels under the mask are kept; they are
/// dropped at tokenization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewPair {
    pub source: ImageTensor,
    pub target: ImageTensor,
    pub mask: MaskSpec,
    pub action: ActionVector,
    pub crop: CropFlipParams,
    pub target_jitter: JitterParams,
    pub source_jitter: JitterParams,
    pub destructive: DestructiveParams,
    pub key: u64,
}

pub fn sample_view_pair(img: &ImageTensor, preset: &AugPreset, geom: ViewGeometry, key: u64) -> ViewPair {
    let mut rng = crate::rng::rng_from_key(key);
    let crop = sample_crop(&mut rng, img.height(), img.width(), preset.crop_scale, preset.flip_prob);
    let base = random_resized_crop_flip(img, &crop, geom.height, geom.width);
    let target_jitter = JitterParams::sample(&mut rng, &preset.target_jitter);
    let target = target_jitter.apply(&base);
    let source_jitter = JitterParams::sample(&mut rng, &preset.source_jitter);
    let destructive = DestructiveParams::sample(&mut rng, preset);
    let (jittered, effective) = if preset.source_from_target {
        (source_jitter.apply(&target), source_jitter.compose_after(&target_jitter))
    } else {
        (source_jitter.apply(&base), source_jitter)
    };
    let source = destructive.apply(&jittered, preset.solarize_threshold);
    let (gh, gw) = geom.grid();
    let mask = sample_mask(&mut rng, gh, gw, &preset.mask);
    let action = encode_action(&effective, &destructive, &target_jitter);
    ViewPair {
        source,
        target,
        mask,
        action,
        crop,
        target_jitter,
        source_jitter,
        destructive,
        key,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image() -> ImageTensor {
        ImageTensor::from_fn(32, 32, |c, y, x| ((c * 13 + y * 5 + x * 3) % 17) as f32 / 16.0)
    }

    const GEOM: ViewGeometry = ViewGeometry {
        height: 32,
        width: 32,
        patch: 8,
    };

    #[test]
    fn identical_params_give_zero_action() {
        let j = JitterParams {
            brightness: 1.2,
            contrast: 0.9,
            saturation: 1.1,
            hue: 0.05,
            applied: true,
        };
        let a = encode_action(&j, &DestructiveParams::default(), &j);
        assert!(a.is_zero());
    }

    #[test]
    fn blur_sigma_normalised() {
        let d = DestructiveParams {
            blur_sigma: Some(1.0),
            ..Default::default()
        };
        let a = encode_action(&JitterParams::IDENTITY, &d, &JitterParams::IDENTITY);
        assert_eq!(a.0[5], 1.0);
        assert_eq!(a.0[6], 0.5);
    }

    #[test]
    fn all_off_gives_equal_views() {
        let p = AugPreset::default_preset().all_off();
        for key in 0..20 {
            let v = sample_view_pair(&image(), &p, GEOM, key);
            assert_eq!(v.source, v.target);
            assert!(v.action.is_zero());
        }
    }

    #[test]
    fn forced_grayscale_sets_flag() {
        let mut p = AugPreset::default_preset();
        p.grayscale_prob = 1.0;
        let v = sample_view_pair(&image(), &p, GEOM, 7);
        assert_eq!(v.action.0[4], 1.0);
    }

    #[test]
    fn pure_function_of_key() {
        let p = AugPreset::default_preset();
        assert_eq!(sample_view_pair(&image(), &p, GEOM, 42), sample_view_pair(&image(), &p, GEOM, 42));
    }
}
