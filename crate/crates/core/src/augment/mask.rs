use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub n_rects: usize,
    pub area: (f64, f64),
    pub aspect: (f64, f64),
    pub attempts: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            n_rects: 4,
            area: (0.15, 0.2),
            aspect: (0.75, 1.5),
            attempts: 100,
        }
    }
}

/// Axis-aligned rectangle of patch cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.top && r < self.top + self.height && c >= self.left && c < self.left + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

/// Masked patch set on a `grid_h x grid_w` grid, stored row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub grid_h: usize,
    pub grid_w: usize,
    pub rects: Vec<Rect>,
    masked: Vec<bool>,
}

impl MaskSpec {
    pub fn empty(grid_h: usize, grid_w: usize) -> Self {
        MaskSpec {
            grid_h,
            grid_w,
            rects: Vec::new(),
            masked: vec![false; grid_h * grid_w],
        }
    }

    pub fn from_rects(grid_h: usize, grid_w: usize, rects: Vec<Rect>) -> Self {
        let mut masked = vec![false; grid_h * grid_w];
        for rc in &rects {
            for r in rc.top..(rc.top + rc.height).min(grid_h) {
                for c in rc.left..(rc.left + rc.width).min(grid_w) {
                    masked[r * grid_w + c] = true;
                }
            }
        }
        MaskSpec {
            grid_h,
            grid_w,
            rects,
            masked,
        }
    }

    pub fn from_indices(grid_h: usize, grid_w: usize, indices: &[usize]) -> Self {
        let mut m = Self::empty(grid_h, grid_w);
        for &i in indices {
            m.masked[i] = true;
        }
        m
    }

    pub fn num_cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked[i]
    }

    /// Indices in `M_x`, ascending.
    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| self.masked[i]).collect()
    }

    /// Complement of `M_x`, ascending.
    pub fn kept_indices(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| !self.masked[i]).collect()
    }

    pub fn masked_fraction(&self) -> f64 {
        self.masked.iter().filter(|&&m| m).count() as f64 / self.masked.len() as f64
    }
}

/// Extent of one rectangle for area fraction `s` and aspect `r = h / w`.
pub fn rect_extent(s: f64, r: f64, grid_h: usize, grid_w: usize) -> (usize, usize) {
    let n = (grid_h * grid_w) as f64;
    let h = (s * n * r).sqrt().round().max(1.0) as usize;
    let w = (s * n / r).sqrt().round().max(1.0) as usize;
    (h, w)
}

fn sample_rect<R: Rng + ?Sized>(rng: &mut R, cfg: &MaskConfig, gh: usize, gw: usize) -> Rect {
    let mut last = (1, 1);
    for _ in 0..cfg.attempts.max(1) {
        let s = rng.random_range(cfg.area.0..=cfg.area.1);
        let r = rng.random_range(cfg.aspect.0..=cfg.aspect.1);
        let (h, w) = rect_extent(s, r, gh, gw);
        last = (h, w);
        if h <= gh && w <= gw {
            return Rect {
                top: rng.random_range(0..=gh - h),
                left: rng.random_range(0..=gw - w),
                height: h,
                width: w,
            };
        }
    }
    let (h, w) = (last.0.min(gh), last.1.min(gw));
    Rect {
        top: rng.random_range(0..=gh - h),
        left: rng.random_range(0..=gw - w),
        height: h,
        width: w,
    }
}

/// Union of `cfg.n_rects` random rectangles. A draw that would leave no
/// context is redrawn; after `cfg.attempts` such draws the first cell is
/// released.
pub fn sample_mask<R: Rng + ?Sized>(rng: &mut R, gh: usize, gw: usize, cfg: &MaskConfig) -> MaskSpec {
    let mut spec = MaskSpec::empty(gh, gw);
    for _ in 0..cfg.attempts.max(1) {
        let rects = (0..cfg.n_rects).map(|_| sample_rect(rng, cfg, gh, gw)).collect();
        spec = MaskSpec::from_rects(gh, gw, rects);
        if spec.masked.iter().any(|&m| !m) {
            return spec;
        }
    }
    spec.masked[0] = false;
    spec
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn union_covers_rects_and_nothing_else() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let m = sample_mask(&mut rng, 8, 8, &MaskConfig::default());
            assert_eq!(m.rects.len(), 4);
            let largest = m.rects.iter().map(Rect::area).max().unwrap();
            assert!(m.masked_indices().len() >= largest);
            for i in 0..64 {
                let inside = m.rects.iter().any(|rc| rc.contains(i / 8, i % 8));
                assert_eq!(inside, m.is_masked(i));
            }
            let mut all = m.masked_indices();
            all.extend(m.kept_indices());
            all.sort();
            assert_eq!(all, (0..64).collect::<Vec<_>>());
            assert!(!m.kept_indices().is_empty());
        }
    }
}
