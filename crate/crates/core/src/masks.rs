//! Stage-one supervision targets: landmark glow masks and face boundary
//! masks, plus the tight face box derived from a landmark set.

use std::path::Path;

use crate::error::{Error, Result};
use crate::landmarks::{BoundaryBox, LandmarkSet};
use crate::raster::Raster;

/// Peak value of one landmark's glow before normalization.
pub const GLOW_PEAK: f64 = 255.0;

/// Chebyshev radius beyond which glow contributions are dropped.
///
/// Every dropped contribution is below `0.5^16 * 255 ~= 0.0039`, so even if
/// all 68 landmarks are truncated at one pixel the total error stays under
/// 0.27 (raw units), inside the 0.5 tolerance against the untruncated loop.
pub const DEFAULT_GLOW_RADIUS: usize = 16;

/// Single-channel float mask in `[0,1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Mask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::MIN, f32::max)
    }

    pub fn to_raster(&self) -> Raster {
        Raster {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.clone(),
        }
    }

    /// Writes an 8-bit grayscale PNG (`round(v * 255)`).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_raster().save_png(path)
    }
}

/// Glow mask for a landmark set: every landmark adds
/// `0.5^chebyshev_distance * 255` to each pixel still below 255, then the
/// raster is clamped to 255 and scaled into `[0,1]`.
pub fn landmark_mask(l: &LandmarkSet, dim_x: usize, dim_y: usize) -> Result<Mask> {
    let raw = glow_accumulate(l, dim_x, dim_y, Some(DEFAULT_GLOW_RADIUS))?;
    Ok(normalize_glow(&raw, dim_x, dim_y))
}

/// Clamps raw glow values to `[0, 255]` and divides by 255.
pub fn normalize_glow(raw: &[f64], dim_x: usize, dim_y: usize) -> Mask {
    Mask {
        width: dim_x,
        height: dim_y,
        data: raw
            .iter()
            .map(|&v| (v.clamp(0.0, GLOW_PEAK) / GLOW_PEAK) as f32)
            .collect(),
    }
}

/// Raw accumulated glow (before clamping) indexed `[y * dim_x + x]`.
///
/// Landmark pixel coordinates keep their fractional part: landmark `(u, v)`
/// sits at `(u * dim_x, v * dim_y)` and pixel `(j, k)` is at distance
/// `max(|u*dim_x - j|, |v*dim_y - k|)`. Landmarks are applied in point
/// order, which matters only once a pixel saturates. `radius = None`
/// visits every pixel for every landmark.
pub fn glow_accumulate(
    l: &LandmarkSet,
    dim_x: usize,
    dim_y: usize,
    radius: Option<usize>,
) -> Result<Vec<f64>> {
    if dim_x == 0 || dim_y == 0 {
        return Err(Error::Config("mask dimensions must be positive".into()));
    }
    if !l.in_unit_frame() {
        return Err(Error::LandmarkOutOfFrame);
    }
    let mut mask = vec![0.0f64; dim_x * dim_y];
    for p in l.points() {
        let x = p.x * dim_x as f64;
        let y = p.y * dim_y as f64;
        let (jx, ky) = match radius {
            Some(r) => (window(x, r, dim_x), window(y, r, dim_y)),
            None => ((0, dim_x), (0, dim_y)),
        };
        for k in ky.0..ky.1 {
            let dy = (y - k as f64).abs();
            let row = &mut mask[k * dim_x..(k + 1) * dim_x];
            for (j, cell) in row.iter_mut().enumerate().take(jx.1).skip(jx.0) {
                if *cell < GLOW_PEAK {
                    let d = (x - j as f64).abs().max(dy);
                    *cell += 0.5f64.powf(d) * GLOW_PEAK;
                }
            }
        }
    }
    Ok(mask)
}

// Pixel index range [lo, hi) within Chebyshev radius `r` of `c`.
fn window(c: f64, r: usize, dim: usize) -> (usize, usize) {
    let lo = (c - r as f64).ceil().max(0.0) as usize;
    let hi = ((c + r as f64).floor() + 1.0).clamp(0.0, dim as f64) as usize;
    (lo.min(dim), hi.max(lo.min(dim)))
}

/// Integer pixel rectangle `[x0, x1) x [y0, y1)` covered by a box, with
/// edges rounded to the nearest pixel and clamped to the frame.
pub fn pixel_rect(b: &BoundaryBox, dim_x: usize, dim_y: usize) -> (usize, usize, usize, usize) {
    let edge = |v: f64, dim: usize| (v * dim as f64).round().clamp(0.0, dim as f64) as usize;
    let x0 = edge(b.x, dim_x);
    let x1 = edge(b.x + b.w, dim_x).max(x0);
    let y0 = edge(b.y, dim_y);
    let y1 = edge(b.y + b.h, dim_y).max(y0);
    (x0, x1, y0, y1)
}

/// Binary mask: 1 inside the rounded box rectangle, 0 elsewhere.
pub fn boundary_mask(b: &BoundaryBox, dim_x: usize, dim_y: usize) -> Result<Mask> {
    let (x0, x1, y0, y1) = pixel_rect(b, dim_x, dim_y);
    if x1 == x0 || y1 == y0 {
        return Err(Error::InvalidBoundary(format!("{b:?} has zero area")));
    }
    let mut mask = Mask::zeros(dim_x, dim_y);
    for y in y0..y1 {
        mask.data[y * dim_x + x0..y * dim_x + x1].fill(1.0);
    }
    Ok(mask)
}

/// Tight box around a landmark set: top-left at the minimum coordinates,
/// size spanning to the maxima.
pub fn boundary_from_landmarks(l: &LandmarkSet) -> Result<BoundaryBox> {
    let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
    let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in l.points() {
        min_x = min_x.min(p.x);
        min_y = min_y.min(p.y);
        max_x = max_x.max(p.x);
        max_y = max_y.max(p.y);
    }
    let (w, h) = (max_x - min_x, max_y - min_y);
    if w <= 0.0 || h <= 0.0 {
        return Err(Error::DegenerateLandmarks);
    }
    Ok(BoundaryBox::new(min_x, min_y, w, h))
}
