use crate::error::{Error, Result};
use crate::face::FaceImage;
use crate::landmarks::{BoundaryBox, LandmarkSet, Point};
use crate::manifest::SampleRecord;
use crate::masks::boundary_from_landmarks;
use crate::INPUT_SIZE;

/// Square crop window in source pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub left: usize,
    pub top: usize,
    pub side: usize,
    pub src_width: usize,
    pub src_height: usize,
}

impl CropWindow {
    fn axis(v: f64, offset: usize, side: usize, extent: usize) -> f64 {
        if offset == 0 && side == extent {
            v
        } else {
            (v * extent as f64 - offset as f64) / side as f64
        }
    }

    /// Re-normalizes a source-frame point to the crop frame.
    pub fn map_point(&self, p: Point) -> Point {
        Point::new(
            Self::axis(p.x, self.left, self.side, self.src_width),
            Self::axis(p.y, self.top, self.side, self.src_height),
        )
    }

    pub fn map_landmarks(&self, l: &LandmarkSet) -> LandmarkSet {
        l.map(|p| self.map_point(p))
    }

    pub fn is_identity(&self) -> bool {
        self.left == 0 && self.top == 0 && self.side == self.src_width && self.side == self.src_height
    }

    pub fn map_box(&self, b: &BoundaryBox) -> BoundaryBox {
        if self.is_identity() {
            return *b;
        }
        let tl = self.map_point(Point::new(b.x, b.y));
        let br = self.map_point(Point::new(b.right(), b.bottom()));
        BoundaryBox::new(tl.x, tl.y, br.x - tl.x, br.y - tl.y)
    }
}

/// Crops the largest square that keeps the whole face: centered on the face
/// box, shifted as needed to stay inside the image. Without a face box the
/// crop is centered on the image.
pub fn crop_square(img: &FaceImage, face: Option<&BoundaryBox>) -> Result<(FaceImage, CropWindow)> {
    let (w, h) = (img.width(), img.height());
    let side = w.min(h);
    let place = |extent: usize, lo: f64, hi: f64| -> Result<usize> {
        let room = extent - side;
        let (lo_px, hi_px) = (lo * extent as f64, hi * extent as f64);
        let (first, last) = ((lo_px + 1e-9).floor(), (hi_px - 1e-9).ceil());
        if last - first > side as f64 {
            return Err(Error::FaceExceedsCrop);
        }
        let centered = (0.5 * (lo_px + hi_px) - 0.5 * side as f64).round();
        let mut start = centered.clamp(0.0, room as f64);
        if start > first {
            start = first.max(0.0);
        }
        if start + (side as f64) < last {
            start = (last - side as f64).min(room as f64);
        }
        Ok(start as usize)
    };
    let (left, top) = match face {
        Some(b) => (place(w, b.x, b.right())?, place(h, b.y, b.bottom())?),
        None => ((w - side) / 2, (h - side) / 2),
    };
    let window = CropWindow {
        left,
        top,
        side,
        src_width: w,
        src_height: h,
    };
    let raster = if side == w && side == h {
        img.raster.clone()
    } else {
        img.raster.crop(left, top, side, side)?
    };
    Ok((img.with_raster(raster), window))
}

/// Bilinear resize of a square image to the network input size.
/// Normalized coordinates are unaffected.
pub fn resize_input(img: &FaceImage) -> Result<FaceImage> {
    if !img.raster.is_square() {
        return Err(Error::InvalidImage(format!(
            "resize expects a square image, got {}x{}",
            img.width(),
            img.height()
        )));
    }
    Ok(img.with_raster(img.raster.resize_bilinear(INPUT_SIZE, INPUT_SIZE)))
}

const MIRROR_SUFFIX: &str = "_m";

/// Mirrors a record's annotation: `x -> 1 - x`, left/right point indices
/// swapped, boundary recomputed, mirror flag and id suffix toggled. Image
/// paths are left for the caller to update.
pub fn mirror_record(rec: &SampleRecord) -> Result<SampleRecord> {
    let (landmarks, _) = rec.annotation()?;
    let landmarks = landmarks.mirrored();
    let boundary = boundary_from_landmarks(&landmarks)?;
    let record_id = match rec.record_id.strip_suffix(MIRROR_SUFFIX) {
        Some(base) if rec.mirrored => base.to_string(),
        _ => format!("{}{MIRROR_SUFFIX}", rec.record_id),
    };
    Ok(SampleRecord {
        record_id,
        mirrored: !rec.mirrored,
        landmarks: Some(landmarks),
        boundary: Some(boundary),
        ..rec.clone()
    })
}

/// A record together with its registered image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub record: SampleRecord,
    pub vis: FaceImage,
    pub th: FaceImage,
}

/// Flips both images and mirrors the record.
pub fn mirror_sample(s: &PairedSample) -> Result<PairedSample> {
    Ok(PairedSample {
        record: mirror_record(&s.record)?,
        vis: s.vis.flip_horizontal(),
        th: s.th.flip_horizontal(),
    })
}

/// Square-crops both images with one window (they are pixel registered),
/// resizes them to the input size and re-normalizes the annotation.
pub fn prepare_pair(s: &PairedSample) -> Result<PairedSample> {
    let (landmarks, boundary) = s.record.annotation()?;
    if (s.vis.width(), s.vis.height()) != (s.th.width(), s.th.height()) {
        return Err(Error::InvalidImage(format!(
            "record {}: VIS {}x{} and TH {}x{} are not registered",
            s.record.record_id,
            s.vis.width(),
            s.vis.height(),
            s.th.width(),
            s.th.height()
        )));
    }
    let (th, window) = crop_square(&s.th, Some(&boundary))?;
    let (vis, _) = crop_square(&s.vis, Some(&boundary))?;
    let landmarks = window.map_landmarks(landmarks);
    let boundary = boundary_from_landmarks(&landmarks)?;
    Ok(PairedSample {
        record: SampleRecord {
            landmarks: Some(landmarks),
            boundary: Some(boundary),
            ..s.record.clone()
        },
        vis: resize_input(&vis)?,
        th: resize_input(&th)?,
    })
}
