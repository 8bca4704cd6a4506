use serde::{Deserialize, Serialize};

use super::mask::MaskConfig;
use crate::config::KvConfig;
use crate::error::{Error, Result};

/// Maximum jitter strengths and the probability of applying jitter at all.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterStrength {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub prob: f64,
}

impl JitterStrength {
    pub const OFF: JitterStrength = JitterStrength {
        brightness: 0.0,
        contrast: 0.0,
        saturation: 0.0,
        hue: 0.0,
        prob: 0.0,
    };

    pub fn standard() -> Self {
        JitterStrength {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
            prob: 0.8,
        }
    }

    pub fn strong() -> Self {
        JitterStrength {
            brightness: 0.5,
            contrast: 0.5,
            saturation: 0.4,
            hue: 0.2,
            prob: 0.8,
        }
    }
}

/// Everything needed to draw a source/target pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugPreset {
    pub name: String,
    pub crop_scale: (f64, f64),
    pub flip_prob: f64,
    pub target_jitter: JitterStrength,
    pub source_jitter: JitterStrength,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    pub solarize_prob: f64,
    pub solarize_threshold: f64,
    pub mask: MaskConfig,
    /// Source jitter composes on top of the target view instead of starting
    /// again from the shared crop.
    pub source_from_target: bool,
}

pub const PRESET_NAMES: [&str; 5] = ["default", "jitter-only", "strong-jitter", "destructive-only", "none"];

impl AugPreset {
    pub fn default_preset() -> Self {
        AugPreset {
            name: "default".into(),
            crop_scale: (0.3, 1.0),
            flip_prob: 0.5,
            target_jitter: JitterStrength::standard(),
            source_jitter: JitterStrength::standard(),
            grayscale_prob: 0.2,
            blur_prob: 0.2,
            blur_sigma: (0.1, 2.0),
            solarize_prob: 0.2,
            solarize_threshold: 0.5,
            mask: MaskConfig::default(),
            source_from_target: false,
        }
    }

    pub fn named(name: &str) -> Result<Self> {
        let mut p = Self::default_preset();
        match name {
            "default" => {}
            "jitter-only" => {
                p.grayscale_prob = 0.0;
                p.blur_prob = 0.0;
                p.solarize_prob = 0.0;
            }
            "strong-jitter" => {
                p.target_jitter = JitterStrength::strong();
                p.source_jitter = JitterStrength::strong();
            }
            "destructive-only" => {
                p.target_jitter = JitterStrength::OFF;
                p.source_jitter = JitterStrength::OFF;
            }
            // Pure latent inpainting: only masking separates source from target.
            "none" => {
                p.target_jitter = JitterStrength::OFF;
                p.source_jitter = JitterStrength::OFF;
                p.grayscale_prob = 0.0;
                p.blur_prob = 0.0;
                p.solarize_prob = 0.0;
            }
            other => return Err(Error::Config(format!("unknown augmentation preset `{other}`"))),
        }
        p.name = name.to_string();
        Ok(p)
    }

    /// Every sampling probability set to zero; the pair then differs only by
    /// its mask.
    pub fn all_off(mut self) -> Self {
        self.flip_prob = 0.0;
        self.target_jitter.prob = 0.0;
        self.source_jitter.prob = 0.0;
        self.grayscale_prob = 0.0;
        self.blur_prob = 0.0;
        self.solarize_prob = 0.0;
        self
    }

    pub fn has_destructive(&self) -> bool {
        self.grayscale_prob > 0.0 || self.blur_prob > 0.0 || self.solarize_prob > 0.0
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("name", &self.name);
        kv.set("crop.scale_min", self.crop_scale.0);
        kv.set("crop.scale_max", self.crop_scale.1);
        kv.set("crop.flip_prob", self.flip_prob);
        for (pre, j) in [("target", &self.target_jitter), ("source", &self.source_jitter)] {
            kv.set(&format!("{pre}.brightness"), j.brightness);
            kv.set(&format!("{pre}.contrast"), j.contrast);
            kv.set(&format!("{pre}.saturation"), j.saturation);
            kv.set(&format!("{pre}.hue"), j.hue);
            kv.set(&format!("{pre}.jitter_prob"), j.prob);
        }
        kv.set("source.grayscale_prob", self.grayscale_prob);
        kv.set("source.blur_prob", self.blur_prob);
        kv.set("source.blur_sigma_min", self.blur_sigma.0);
        kv.set("source.blur_sigma_max", self.blur_sigma.1);
        kv.set("source.solarize_prob", self.solarize_prob);
        kv.set("source.solarize_threshold", self.solarize_threshold);
        kv.set("source.from_target", self.source_from_target);
        kv.set("mask.n_rects", self.mask.n_rects);
        kv.set("mask.area_min", self.mask.area.0);
        kv.set("mask.area_max", self.mask.area.1);
        kv.set("mask.aspect_min", self.mask.aspect.0);
        kv.set("mask.aspect_max", self.mask.aspect.1);
        kv.set("mask.attempts", self.mask.attempts);
        kv
    }

    /// Reads a preset file. Missing keys fall back to the preset named by
    /// `name` (or `default`).
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let base = kv.get("name").unwrap_or("default");
        let mut p = Self::named(base).or_else(|_| {
            let mut d = Self::default_preset();
            d.name = base.to_string();
            Ok::<_, Error>(d)
        })?;
        p.crop_scale.0 = kv.f64_or("crop.scale_min", p.crop_scale.0)?;
        p.crop_scale.1 = kv.f64_or("crop.scale_max", p.crop_scale.1)?;
        p.flip_prob = kv.f64_or("crop.flip_prob", p.flip_prob)?;
        for (pre, j) in [("target", &mut p.target_jitter), ("source", &mut p.source_jitter)] {
            j.brightness = kv.f64_or(&format!("{pre}.brightness"), j.brightness)?;
            j.contrast = kv.f64_or(&format!("{pre}.contrast"), j.contrast)?;
            j.saturation = kv.f64_or(&format!("{pre}.saturation"), j.saturation)?;
            j.hue = kv.f64_or(&format!("{pre}.hue"), j.hue)?;
            j.prob = kv.f64_or(&format!("{pre}.jitter_prob"), j.prob)?;
        }
        p.grayscale_prob = kv.f64_or("source.grayscale_prob", p.grayscale_prob)?;
        p.blur_prob = kv.f64_or("source.blur_prob", p.blur_prob)?;
        p.blur_sigma.0 = kv.f64_or("source.blur_sigma_min", p.blur_sigma.0)?;
        p.blur_sigma.1 = kv.f64_or("source.blur_sigma_max", p.blur_sigma.1)?;
        p.solarize_prob = kv.f64_or("source.solarize_prob", p.solarize_prob)?;
        p.solarize_threshold = kv.f64_or("source.solarize_threshold", p.solarize_threshold)?;
        p.source_from_target = kv.bool_or("source.from_target", p.source_from_target)?;
        p.mask.n_rects = kv.usize_or("mask.n_rects", p.mask.n_rects)?;
        p.mask.area.0 = kv.f64_or("mask.area_min", p.mask.area.0)?;
        p.mask.area.1 = kv.f64_or("mask.area_max", p.mask.area.1)?;
        p.mask.aspect.0 = kv.f64_or("mask.aspect_min", p.mask.aspect.0)?;
        p.mask.aspect.1 = kv.f64_or("mask.aspect_max", p.mask.aspect.1)?;
        p.mask.attempts = kv.usize_or("mask.attempts", p.mask.attempts)?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.flip_prob,
            self.target_jitter.prob,
            self.source_jitter.prob,
            self.grayscale_prob,
            self.blur_prob,
            self.solarize_prob,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        let (a, b) = self.crop_scale;
        if !(0.0 < a && a <= b && b <= 1.0) {
            return Err(Error::Config(format!("bad crop scale ({a}, {b})")));
        }
        if !(0.0 < self.blur_sigma.0 && self.blur_sigma.0 <= self.blur_sigma.1) {
            return Err(Error::Config("bad blur sigma range".into()));
        }
        for j in [&self.target_jitter, &self.source_jitter] {
            if j.brightness >= 1.0 || j.contrast >= 1.0 || j.saturation >= 1.0 || j.hue > 0.5 {
                return Err(Error::Config("jitter strengths must keep factors positive".into()));
            }
        }
        if self.mask.n_rects == 0 || self.mask.area.0 > self.mask.area.1 || self.mask.aspect.0 > self.mask.aspect.1 {
            return Err(Error::Config("bad mask configuration".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_kv() {
        for name in PRESET_NAMES {
            let p = AugPreset::named(name).unwrap();
            let text = p.to_kv().render();
            let back = AugPreset::from_kv(&KvConfig::parse(&text).unwrap()).unwrap();
            assert_eq!(back, p);
        }
        assert!(AugPreset::named("bogus").is_err());
    }
}
