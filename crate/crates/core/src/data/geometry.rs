use serde::{Deserialize, Serialize};

use super::raster::Raster;
use crate::error::{Error, Result};

/// Patch side and disparity search width.
///
/// A patch "centered" on pixel `x` spans columns `[x - patch/2, x + patch/2)`
/// (and likewise for rows). The widened inference patch adds `disp_max / 2`
/// columns on each side, so candidate index `k` of its feature map
/// corresponds to a standalone patch centered on `x - disp_max/2 + k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGeometry {
    pub patch: usize,
    pub disp_max: usize,
}

impl Default for PatchGeometry {
    fn default() -> Self {
        Self { patch: 36, disp_max: 64 }
    }
}

impl PatchGeometry {
    pub fn new(patch: usize, disp_max: usize) -> Result<Self> {
        if patch < 2 || patch % 2 != 0 {
            return Err(Error::Config(format!("patch size must be even and >= 2, got {patch}")));
        }
        if disp_max % 2 != 0 {
            return Err(Error::Config(format!("disp_max must be even, got {disp_max}")));
        }
        Ok(Self { patch, disp_max })
    }

    pub fn half(&self) -> i64 {
        (self.patch / 2) as i64
    }

    pub fn candidates(&self) -> usize {
        self.disp_max + 1
    }

    pub fn wide_width(&self) -> usize {
        self.patch + self.disp_max
    }

    /// Signed disparity of candidate index `k`.
    pub fn signed(&self, k: f64) -> f64 {
        k - (self.disp_max / 2) as f64
    }

    pub fn fits(&self, img: &Raster, cx: i64, cy: i64) -> bool {
        img.contains(cx - self.half(), cy - self.half(), self.patch, self.patch)
    }

    pub fn fits_wide(&self, img: &Raster, cx: i64, cy: i64) -> bool {
        img.contains(cx - self.half() - (self.disp_max / 2) as i64, cy - self.half(), self.wide_width(), self.patch)
    }

    pub fn patch_at(&self, img: &Raster, cx: i64, cy: i64) -> Option<Vec<f32>> {
        img.window(cx - self.half(), cy - self.half(), self.patch, self.patch)
    }

    /// `[3, patch, patch + disp_max]` window centered on `(cx, cy)`.
    pub fn wide_at(&self, img: &Raster, cx: i64, cy: i64) -> Option<Vec<f32>> {
        img.window(cx - self.half() - (self.disp_max / 2) as i64, cy - self.half(), self.wide_width(), self.patch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn border_rule() {
        let g = PatchGeometry::default();
        let img = Raster::from_fn(100, 60, 1, |_, _, _| 0);
        assert!(g.fits(&img, 18, 18));
        assert!(!g.fits(&img, 17, 18));
        assert!(!g.fits(&img, 5, 30));
        assert!(g.fits(&img, 82, 42));
        assert!(!g.fits(&img, 83, 42));
        assert!(g.fits_wide(&img, 50, 30));
        assert!(!g.fits_wide(&img, 49, 30));
        assert_eq!(g.signed(32.0), 0.0);
        assert!(PatchGeometry::new(35, 64).is_err());
        assert!(PatchGeometry::new(36, 63).is_err());
    }

    #[test]
    fn wide_window_columns_are_standalone_patches() {
        let g = PatchGeometry::new(4, 6).unwrap();
        let img = Raster::from_fn(30, 8, 1, |x, y, _| (x * 7 + y) as u8);
        let wide = g.wide_at(&img, 12, 4).unwrap();
        let ww = g.wide_width();
        for k in 0..g.candidates() {
            let p = g.patch_at(&img, 12 - 3 + k as i64, 4).unwrap();
            for c in 0..3 {
                for y in 0..4 {
                    for x in 0..4 {
                        assert_eq!(p[(c * 4 + y) * 4 + x], wide[(c * 4 + y) * ww + k + x]);
                    }
                }
            }
        }
    }
}
