//! Landmark sets, face boundary boxes and the 68-point flip permutation.
//!
//! Coordinates are fractions of the processed image: `x` of the width and
//! `y` of the height. Point indices are 0-based in storage; documentation
//! refers to the usual 1-based numbering (point 37 is the right-eye outer
//! corner, stored at index 36).

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const NUM_POINTS: usize = 68;
/// Length of a flattened landmark set: `[x1, y1, x2, y2, ..., x68, y68]`.
pub const FLAT_LEN: usize = 2 * NUM_POINTS;

/// Tolerance on `x + w <= 1` and `y + h <= 1` for ground-truth boxes.
pub const BOX_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Exactly 68 points in Multi-PIE order.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    points: Vec<Point>,
}

impl LandmarkSet {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.len() != NUM_POINTS {
            return Err(Error::InvalidLandmarks(format!(
                "expected {NUM_POINTS} points, got {}",
                points.len()
            )));
        }
        if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::InvalidLandmarks("non-finite coordinate".into()));
        }
        Ok(Self { points })
    }

    pub fn from_fn(mut f: impl FnMut(usize) -> Point) -> Self {
        Self {
            points: (0..NUM_POINTS).map(&mut f).collect(),
        }
    }

    /// Inverse of [`LandmarkSet::flatten`].
    pub fn unflatten(values: &[f64]) -> Result<Self> {
        if values.len() != FLAT_LEN {
            return Err(Error::CorruptData(format!(
                "flattened landmark array has {} values, expected {FLAT_LEN}",
                values.len()
            )));
        }
        Self::new(
            values
                .chunks_exact(2)
                .map(|xy| Point::new(xy[0], xy[1]))
                .collect(),
        )
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y]).collect()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    /// Point by 0-based index.
    pub fn get(&self, index: usize) -> Point {
        self.points[index]
    }

    /// Point by the conventional 1-based number.
    pub fn point(&self, number: usize) -> Point {
        self.points[number - 1]
    }

    pub fn set(&mut self, index: usize, p: Point) {
        self.points[index] = p;
    }

    pub fn map(&self, f: impl Fn(Point) -> Point) -> Self {
        Self {
            points: self.points.iter().copied().map(f).collect(),
        }
    }

    /// Reorders points so that output index `i` holds input point `perm[i]`.
    pub fn permute(&self, perm: &[usize; NUM_POINTS]) -> Self {
        Self::from_fn(|i| self.points[perm[i]])
    }

    /// Horizontal mirror: `x -> 1 - x` with left/right point identities
    /// swapped.
    pub fn mirrored(&self) -> Self {
        self.map(|p| Point::new(1.0 - p.x, p.y))
            .permute(&flip_permutation())
    }

    pub fn in_unit_frame(&self) -> bool {
        self.points
            .iter()
            .all(|p| (0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y))
    }

    /// Ground-truth validation: every coordinate inside the frame.
    pub fn validate_ground_truth(&self) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if !(0.0..=1.0).contains(&p.x) || !(0.0..=1.0).contains(&p.y) {
                return Err(Error::InvalidLandmarks(format!(
                    "point {} at ({}, {}) is outside [0,1]",
                    i + 1,
                    p.x,
                    p.y
                )));
            }
        }
        Ok(())
    }

    /// Clamps every coordinate into `[0,1]`, returning the 0-based indices
    /// that were moved.
    pub fn clamp_to_frame(&mut self) -> Vec<usize> {
        let mut moved = Vec::new();
        for (i, p) in self.points.iter_mut().enumerate() {
            let c = Point::new(p.x.clamp(0.0, 1.0), p.y.clamp(0.0, 1.0));
            if c != *p {
                moved.push(i);
                *p = c;
            }
        }
        moved
    }
}

impl Serialize for LandmarkSet {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.flatten().serialize(s)
    }
}

impl<'de> Deserialize<'de> for LandmarkSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let values = Vec::<f64>::deserialize(d)?;
        LandmarkSet::unflatten(&values).map_err(serde::de::Error::custom)
    }
}

/// Face boundary `[x, y, w, h]`: top-left corner plus size, as fractions
/// of the image width (x, w) and height (y, h).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundaryBox {
    pub const FULL: BoundaryBox = BoundaryBox {
        x: 0.0,
        y: 0.0,
        w: 1.0,
        h: 1.0,
    };

    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        match v {
            [x, y, w, h] => Ok(Self::new(*x, *y, *w, *h)),
            _ => Err(Error::CorruptData(format!(
                "boundary array has {} values, expected 4",
                v.len()
            ))),
        }
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn center(&self) -> Point {
        Point::new(self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.x && p.x <= self.right() && p.y >= self.y && p.y <= self.bottom()
    }

    pub fn validate_ground_truth(&self) -> Result<()> {
        let a = self.to_array();
        if a.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidBoundary(format!("{self:?} has a field outside [0,1]")));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidBoundary(format!("{self:?} has zero area")));
        }
        if self.right() > 1.0 + BOX_EPS || self.bottom() > 1.0 + BOX_EPS {
            return Err(Error::InvalidBoundary(format!("{self:?} extends past the frame")));
        }
        Ok(())
    }

    /// Forces a predicted box into the frame: corner into `[0,1]`, size
    /// non-negative and no larger than the space left of the corner.
    pub fn clamped(&self) -> Self {
        let x = self.x.clamp(0.0, 1.0);
        let y = self.y.clamp(0.0, 1.0);
        Self {
            x,
            y,
            w: self.w.clamp(0.0, 1.0 - x),
            h: self.h.clamp(0.0, 1.0 - y),
        }
    }

    /// Horizontal mirror of the box.
    pub fn mirrored(&self) -> Self {
        Self {
            x: 1.0 - self.right(),
            ..*self
        }
    }
}

// 1-based mirror pairs of the Multi-PIE 68-point layout. Points on the
// symmetry axis (9, 28-31, 34, 52, 58, 63, 67) map to themselves.
const MIRROR_PAIRS: [(usize, usize); 29] = [
    // jaw
    (1, 17),
    (2, 16),
    (3, 15),
    (4, 14),
    (5, 13),
    (6, 12),
    (7, 11),
    (8, 10),
    // brows
    (18, 27),
    (19, 26),
    (20, 25),
    (21, 24),
    (22, 23),
    // nostrils
    (32, 36),
    (33, 35),
    // eyes
    (37, 46),
    (38, 45),
    (39, 44),
    (40, 43),
    (41, 48),
    (42, 47),
    // outer lip
    (49, 55),
    (50, 54),
    (51, 53),
    (60, 56),
    (59, 57),
    // inner lip
    (61, 65),
    (62, 64),
    (68, 66),
];

/// 0-based horizontal-flip permutation: after mirroring the image, output
/// point `i` is input point `perm[i]`. The permutation is an involution.
pub fn flip_permutation() -> [usize; NUM_POINTS] {
    let mut perm: [usize; NUM_POINTS] = std::array::from_fn(|i| i);
    for (a, b) in MIRROR_PAIRS {
        perm[a - 1] = b - 1;
        perm[b - 1] = a - 1;
    }
    perm
}
