use std::path::Path;

use candle_core::DType;

use super::{train_stage1, train_stage2, Hyperparams, LogSink, Stage2Summary, StageSummary, TensorSet};
use crate::dataset::{crop_square, filter_usable, resize_input, FoldPlan, ImageEntry, ImageSource, Role};
use crate::error::{Error, Result};
use crate::face::{FaceImage, Spectrum, Variation};
use crate::landmarks::{BoundaryBox, LandmarkSet};
use crate::manifest::SampleRecord;
use crate::masks::{boundary_from_landmarks, boundary_mask, landmark_mask, pixel_rect};
use crate::model::{
    images_to_tensor, load_checkpoint, save_checkpoint, CheckpointMeta, HeadKind, StackedModel,
};
use crate::INPUT_SIZE;

/// Zeroes every pixel outside the box's rounded pixel rectangle. A box with
/// zero pixel area blacks out the whole image.
pub fn blackout(img: &FaceImage, b: &BoundaryBox) -> FaceImage {
    let r = &img.raster;
    let (x0, x1, y0, y1) = pixel_rect(&b.clamped(), r.width, r.height);
    if x0 == x1 || y0 == y1 {
        log::warn!("degenerate face box {b:?}; input blacked out entirely");
    }
    let mut out = r.clone();
    for y in 0..r.height {
        for x in 0..r.width {
            if !(x0..x1).contains(&x) || !(y0..y1).contains(&y) {
                for c in 0..r.channels {
                    out.set(x, y, c, 0.0);
                }
            }
        }
    }
    img.with_raster(out)
}

/// One annotated network input.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub record_id: String,
    pub subject_id: u32,
    pub variation: Variation,
    pub spectrum: Spectrum,
    pub image: FaceImage,
    pub landmarks: LandmarkSet,
    pub boundary: BoundaryBox,
}

/// Brings an image and its annotation to the network frame. Images that
/// are already `INPUT_SIZE` square pass through unchanged.
pub fn to_network_frame(
    img: &FaceImage,
    landmarks: &LandmarkSet,
    boundary: &BoundaryBox,
) -> Result<(FaceImage, LandmarkSet, BoundaryBox)> {
    let img = img.to_gray();
    if img.width() == INPUT_SIZE && img.height() == INPUT_SIZE {
        return Ok((img, landmarks.clone(), *boundary));
    }
    let (cropped, window) = crop_square(&img, Some(boundary))?;
    let l = window.map_landmarks(landmarks);
    let b = boundary_from_landmarks(&l)?;
    Ok((resize_input(&cropped)?, l, b))
}

/// Loads the listed images of annotated records.
pub fn load_examples(
    records: &[SampleRecord],
    entries: &[ImageEntry],
    source: &dyn ImageSource,
) -> Result<Vec<Example>> {
    entries
        .iter()
        .map(|e| {
            let rec = &records[e.record];
            let (l, b) = rec.annotation()?;
            let raw = source.load(rec, e.spectrum)?;
            let (image, landmarks, boundary) = to_network_frame(&raw, l, &b)?;
            Ok(Example {
                record_id: rec.record_id.clone(),
                subject_id: rec.subject_id,
                variation: rec.variation,
                spectrum: e.spectrum,
                image,
                landmarks,
                boundary,
            })
        })
        .collect()
}

/// Usable, annotated images whose subject has `role` in `fold`.
pub fn fold_entries(records: &[SampleRecord], plan: &FoldPlan, fold: usize, role: Role) -> Vec<ImageEntry> {
    filter_usable(records)
        .into_iter()
        .filter(|e| {
            let r = &records[e.record];
            r.is_annotated() && plan.role(fold, r.subject_id) == Some(role)
        })
        .collect()
}

/// Stage-1 tensors: inputs and their mask targets.
pub fn mask_set(kind: HeadKind, inputs: &[FaceImage], examples: &[Example], dtype: DType) -> Result<TensorSet> {
    let s = INPUT_SIZE;
    let mut data = Vec::with_capacity(examples.len() * s * s);
    for ex in examples {
        let m = match kind {
            HeadKind::Boundary => boundary_mask(&ex.boundary, s, s)?,
            HeadKind::Landmarks => landmark_mask(&ex.landmarks, s, s)?,
        };
        data.extend_from_slice(&m.data);
    }
    let refs: Vec<&FaceImage> = inputs.iter().collect();
    Ok(TensorSet {
        inputs: images_to_tensor(&refs, dtype)?,
        targets: candle_core::Tensor::from_vec(data, (examples.len(), 1, s, s), &candle_core::Device::Cpu)?
            .to_dtype(dtype)?,
    })
}

/// Stage-2 tensors: inputs and their coordinate targets.
pub fn coord_set(kind: HeadKind, inputs: &[FaceImage], examples: &[Example], dtype: DType) -> Result<TensorSet> {
    let mut data = Vec::with_capacity(examples.len() * kind.outputs());
    for ex in examples {
        match kind {
            HeadKind::Boundary => data.extend(ex.boundary.to_array()),
            HeadKind::Landmarks => data.extend(ex.landmarks.flatten()),
        }
    }
    let refs: Vec<&FaceImage> = inputs.iter().collect();
    Ok(TensorSet {
        inputs: images_to_tensor(&refs, dtype)?,
        targets: candle_core::Tensor::from_vec(data, (examples.len(), kind.outputs()), &candle_core::Device::Cpu)?
            .to_dtype(dtype)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelReport {
    pub stage1: StageSummary,
    pub stage2: Stage2Summary,
}

/// Builds a fresh model and runs both training stages on it.
pub fn train_model(
    kind: HeadKind,
    seed: u64,
    train: (&[FaceImage], &[Example]),
    val: (&[FaceImage], &[Example]),
    hp: &Hyperparams,
    fold: Option<usize>,
    log: LogSink,
) -> Result<(StackedModel, ModelReport)> {
    let dtype = DType::F32;
    let model = StackedModel::new(kind, hp.unet, hp.hidden, seed, dtype)?;
    let has_val = !val.1.is_empty();
    let label = kind.as_str();

    let t1 = mask_set(kind, train.0, train.1, dtype)?;
    let v1 = if has_val { Some(mask_set(kind, val.0, val.1, dtype)?) } else { None };
    let stage1 = train_stage1(&model.unet, &t1, v1.as_ref(), hp, &format!("{label}/1"), fold, log)?;
    drop((t1, v1));

    let t2 = coord_set(kind, train.0, train.1, dtype)?;
    let v2 = if has_val { Some(coord_set(kind, val.0, val.1, dtype)?) } else { None };
    let stage2 = train_stage2(&model, &t2, v2.as_ref(), hp, &format!("{label}/2"), fold, log)?;
    Ok((model, ModelReport { stage1, stage2 }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub boundary: BoundaryBox,
    pub landmarks: LandmarkSet,
    /// The clamped predicted box covered no pixels.
    pub degenerate_box: bool,
}

/// The stacked auxiliary (boundary) and main (landmark) models.
pub struct DmslPipeline {
    pub boundary: StackedModel,
    pub landmark: StackedModel,
}

const PREDICT_CHUNK: usize = 32;

impl DmslPipeline {
    /// Untrained pipeline with seeded initialization.
    pub fn untrained(hp: &Hyperparams) -> Result<Self> {
        Ok(Self {
            boundary: StackedModel::new(HeadKind::Boundary, hp.unet, hp.hidden, boundary_seed(hp), DType::F32)?,
            landmark: StackedModel::new(HeadKind::Landmarks, hp.unet, hp.hidden, landmark_seed(hp), DType::F32)?,
        })
    }

    /// Image -> face box -> blackout -> landmarks, for network-frame images.
    pub fn predict(&self, images: &[&FaceImage]) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(PREDICT_CHUNK) {
            let boxes = self
                .boundary
                .predict_raw(chunk)?
                .iter()
                .map(|v| BoundaryBox::from_slice(v).map(|b| b.clamped()))
                .collect::<Result<Vec<_>>>()?;
            let masked: Vec<FaceImage> = chunk.iter().zip(&boxes).map(|(img, b)| blackout(img, b)).collect();
            let refs: Vec<&FaceImage> = masked.iter().collect();
            let points = self.landmark.predict_raw(&refs)?;
            for (b, p) in boxes.into_iter().zip(points) {
                let (x0, x1, y0, y1) = pixel_rect(&b, INPUT_SIZE, INPUT_SIZE);
                out.push(Prediction {
                    boundary: b,
                    landmarks: LandmarkSet::unflatten(&p)?,
                    degenerate_box: x0 == x1 || y0 == y1,
                });
            }
        }
        Ok(out)
    }

    /// Predicts for an arbitrary image: grayscale, center square crop,
    /// resize, then maps the result back to the source frame.
    pub fn predict_image(&self, img: &FaceImage) -> Result<Prediction> {
        let gray = img.to_gray();
        let (cropped, window) = crop_square(&gray, None)?;
        let input = resize_input(&cropped)?;
        let p = self.predict(&[&input])?.remove(0);
        let back = |x: f64, offset: usize, extent: usize| {
            if offset == 0 && window.side == extent {
                x
            } else {
                (x * window.side as f64 + offset as f64) / extent as f64
            }
        };
        let landmarks = p.landmarks.map(|q| {
            crate::Point::new(
                back(q.x, window.left, window.src_width),
                back(q.y, window.top, window.src_height),
            )
        });
        let b = p.boundary;
        let x = back(b.x, window.left, window.src_width);
        let y = back(b.y, window.top, window.src_height);
        Ok(Prediction {
            boundary: BoundaryBox::new(
                x,
                y,
                back(b.right(), window.left, window.src_width) - x,
                back(b.bottom(), window.top, window.src_height) - y,
            ),
            landmarks,
            degenerate_box: p.degenerate_box,
        })
    }

    /// Writes `boundary/` and `landmark/` checkpoints under `dir`.
    pub fn save(&self, dir: &Path, fold: Option<usize>, seed: u64, git_rev: Option<String>) -> Result<()> {
        for model in [&self.boundary, &self.landmark] {
            let meta = checkpoint_meta(model, 2, fold, 0, seed, git_rev.clone())?;
            save_checkpoint(&dir.join(model.kind.as_str()), model, &meta)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (boundary, mb) = load_checkpoint(&dir.join(HeadKind::Boundary.as_str()))?;
        let (landmark, ml) = load_checkpoint(&dir.join(HeadKind::Landmarks.as_str()))?;
        if mb.kind != HeadKind::Boundary || ml.kind != HeadKind::Landmarks {
            return Err(Error::Config(format!("{}: checkpoint kinds are swapped", dir.display())));
        }
        Ok(Self { boundary, landmark })
    }
}

pub fn checkpoint_meta(
    model: &StackedModel,
    stage: u8,
    fold: Option<usize>,
    epoch: usize,
    seed: u64,
    git_rev: Option<String>,
) -> Result<CheckpointMeta> {
    Ok(CheckpointMeta {
        kind: model.kind,
        unet: model.unet.config,
        head: model.head.config,
        parameter_count: model.parameter_count(),
        stage,
        fold,
        epoch,
        seed,
        git_rev,
        unet_digest: model.unet.digest()?,
    })
}

pub fn boundary_seed(hp: &Hyperparams) -> u64 {
    hp.seed
}

pub fn landmark_seed(hp: &Hyperparams) -> u64 {
    hp.seed.wrapping_add(10)
}

pub struct TrainedDmsl {
    pub pipeline: DmslPipeline,
    pub boundary_report: ModelReport,
    pub landmark_report: ModelReport,
    pub train_images: usize,
    pub val_images: usize,
}

/// Trains both sub-models on one fold. Only training and validation
/// subjects are loaded. The landmark model sees blacked-out inputs, cut
/// with ground-truth boxes unless `train_with_predicted_boxes` is set.
pub fn train_dmsl(
    records: &[SampleRecord],
    plan: &FoldPlan,
    fold: usize,
    source: &dyn ImageSource,
    hp: &Hyperparams,
    log: LogSink,
) -> Result<TrainedDmsl> {
    hp.validate()?;
    let train = load_examples(records, &fold_entries(records, plan, fold, Role::Train), source)?;
    let val = load_examples(records, &fold_entries(records, plan, fold, Role::Validation), source)?;
    if train.is_empty() {
        return Err(Error::Validation(format!("fold {fold}: no annotated training images")));
    }
    let images = |xs: &[Example]| xs.iter().map(|e| e.image.clone()).collect::<Vec<_>>();
    let (train_img, val_img) = (images(&train), images(&val));

    let (m_b, boundary_report) = train_model(
        HeadKind::Boundary,
        boundary_seed(hp),
        (&train_img, &train),
        (&val_img, &val),
        hp,
        Some(fold),
        log,
    )?;

    let cut = |xs: &[Example]| -> Result<Vec<FaceImage>> {
        let boxes: Vec<BoundaryBox> = if hp.train_with_predicted_boxes {
            let refs: Vec<&FaceImage> = xs.iter().map(|e| &e.image).collect();
            let mut out = Vec::with_capacity(xs.len());
            for chunk in refs.chunks(PREDICT_CHUNK) {
                for v in m_b.predict_raw(chunk)? {
                    out.push(BoundaryBox::from_slice(&v)?.clamped());
                }
            }
            out
        } else {
            xs.iter().map(|e| e.boundary).collect()
        };
        Ok(xs.iter().zip(&boxes).map(|(e, b)| blackout(&e.image, b)).collect())
    };
    let (train_cut, val_cut) = (cut(&train)?, cut(&val)?);
    let (m_l, landmark_report) = train_model(
        HeadKind::Landmarks,
        landmark_seed(hp),
        (&train_cut, &train),
        (&val_cut, &val),
        hp,
        Some(fold),
        log,
    )?;
    Ok(TrainedDmsl {
        pipeline: DmslPipeline {
            boundary: m_b,
            landmark: m_l,
        },
        boundary_report,
        landmark_report,
        train_images: train.len(),
        val_images: val.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Raster;

    fn img() -> FaceImage {
        let mut r = Raster::filled(128, 128, 1, 0.0);
        for (i, v) in r.data.iter_mut().enumerate() {
            *v = 0.1 + ((i * 37) % 90) as f32 / 100.0;
        }
        FaceImage::new(r, Spectrum::Th, 1, Variation::Nn)
    }

    #[test]
    fn full_box_is_identity() {
        let a = img();
        assert_eq!(blackout(&a, &BoundaryBox::FULL), a);
    }

    #[test]
    fn zero_width_blacks_everything() {
        let out = blackout(&img(), &BoundaryBox::new(0.5, 0.2, 0.0, 0.5));
        assert_eq!(out.raster.sum(), 0.0);
        let past_edge = blackout(&img(), &BoundaryBox::new(1.2, 0.2, 0.3, 0.5));
        assert_eq!(past_edge.raster.sum(), 0.0);
    }

    #[test]
    fn keeps_interior_sum_and_is_idempotent() {
        let a = img();
        let b = BoundaryBox::new(0.21, 0.3, 0.5, 0.33);
        let once = blackout(&a, &b);
        let (x0, x1, y0, y1) = pixel_rect(&b, 128, 128);
        let mut inside = 0.0f64;
        for y in y0..y1 {
            for x in x0..x1 {
                inside += a.raster.get(x, y, 0) as f64;
                assert_eq!(once.raster.get(x, y, 0), a.raster.get(x, y, 0));
            }
        }
        assert!((once.raster.sum() - inside).abs() < 1e-6);
        assert_eq!(blackout(&once, &b), once);
    }
}
