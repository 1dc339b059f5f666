use std::path::Path;
use std::sync::Mutex;

use dmsl_core::manifest::resolve;
use dmsl_core::masks::boundary_from_landmarks;
use dmsl_core::{FaceImage, LandmarkSet, Point, SampleRecord, Spectrum};
use serde::{Deserialize, Serialize};

use crate::detector::Detector;
use crate::error::{AnnotateError, Result};
use crate::store::{Edit, ListFilter, Store, StoredRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct AutoAnnotation {
    /// Normalized landmarks, `None` when the detector found no face.
    pub landmarks: Option<LandmarkSet>,
    pub warnings: Vec<String>,
}

/// Runs the detector on a VIS image and normalizes its pixel output to the
/// unit frame. Out-of-frame points are clamped with a warning.
pub fn auto_annotate(vis: &FaceImage, detector: &dyn Detector, path: Option<&Path>) -> Result<AutoAnnotation> {
    let Some(pixels) = detector.detect(vis, path)? else {
        return Ok(AutoAnnotation {
            landmarks: None,
            warnings: Vec::new(),
        });
    };
    let (w, h) = (vis.width() as f64, vis.height() as f64);
    let mut l = LandmarkSet::new(pixels.iter().map(|[x, y]| Point::new(x / w, y / h)).collect())?;
    let moved = l.clamp_to_frame();
    let warnings = if moved.is_empty() {
        Vec::new()
    } else {
        let names: Vec<String> = moved.iter().map(|i| (i + 1).to_string()).collect();
        vec![format!("{}: clamped points {} into the frame", detector.name(), names.join(", "))]
    };
    Ok(AutoAnnotation {
        landmarks: Some(l),
        warnings,
    })
}

/// The TH image is pixel-registered with the VIS one, so it takes the same
/// normalized coordinates.
pub fn superimpose(vis_landmarks: &LandmarkSet, vis: &FaceImage, th: Option<&FaceImage>) -> Result<LandmarkSet> {
    let th = th.ok_or_else(|| AnnotateError::Validation("missing TH counterpart".into()))?;
    if (th.width(), th.height()) != (vis.width(), vis.height()) {
        return Err(AnnotateError::Validation(format!(
            "TH {}x{} is not registered with VIS {}x{}",
            th.width(),
            th.height(),
            vis.width(),
            vis.height()
        )));
    }
    Ok(vis_landmarks.clone())
}

/// 1-based numbers of the points outside the unit frame.
pub fn points_out_of_frame(l: &LandmarkSet) -> Vec<usize> {
    l.points()
        .iter()
        .enumerate()
        .filter(|(_, p)| !(0.0..=1.0).contains(&p.x) || !(0.0..=1.0).contains(&p.y))
        .map(|(i, _)| i + 1)
        .collect()
}

/// Parses and checks a submitted 136-value array.
pub fn parse_submission(values: &[f64]) -> Result<LandmarkSet> {
    let l = LandmarkSet::unflatten(values).map_err(|e| AnnotateError::Validation(e.to_string()))?;
    let bad = points_out_of_frame(&l);
    if !bad.is_empty() {
        return Err(AnnotateError::InvalidPoints(bad));
    }
    Ok(l)
}

/// Replaces a record's landmarks with a manual correction.
pub fn calibrate(
    store: &mut Store,
    record_id: &str,
    updated: &LandmarkSet,
    editor_id: &str,
    expected_version: Option<i64>,
) -> Result<StoredRecord> {
    let bad = points_out_of_frame(updated);
    if !bad.is_empty() {
        return Err(AnnotateError::InvalidPoints(bad));
    }
    if editor_id.trim().is_empty() {
        return Err(AnnotateError::Validation("editor_id is required".into()));
    }
    boundary_from_landmarks(updated).map_err(|e| AnnotateError::Validation(e.to_string()))?;
    store.apply(
        record_id,
        Edit {
            landmarks: Some(updated.clone()),
            calibrated: true,
            editor_id,
            action: "calibrate",
            expected_version,
        },
    )
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JobProgress {
    pub total: usize,
    pub processed: usize,
    pub annotated: usize,
    pub skipped_calibrated: usize,
    pub no_face: Vec<String>,
    pub failures: Vec<(String, String)>,
    pub warnings: Vec<String>,
}

fn detect_pair(
    rec: &SampleRecord,
    base: &Path,
    detector: &dyn Detector,
) -> Result<(Option<LandmarkSet>, Vec<String>)> {
    let vis_path = resolve(base, &rec.vis_path);
    let vis = FaceImage::load(&vis_path, Spectrum::Vis, rec.subject_id, rec.variation)?;
    let auto = auto_annotate(&vis, detector, Some(&vis_path))?;
    let Some(l) = auto.landmarks else {
        return Ok((None, auto.warnings));
    };
    let th_path = resolve(base, &rec.th_path);
    let th = th_path
        .exists()
        .then(|| FaceImage::load(&th_path, Spectrum::Th, rec.subject_id, rec.variation))
        .transpose()?;
    let th_landmarks = superimpose(&l, &vis, th.as_ref())?;
    Ok((Some(th_landmarks), auto.warnings))
}

/// Auto-annotates manifest records in place. Calibrated records are left
/// alone unless `force`. Failures are recorded and the run continues.
pub fn annotate_records(
    records: &mut [SampleRecord],
    base: &Path,
    detector: &dyn Detector,
    force: bool,
) -> JobProgress {
    let mut p = JobProgress {
        total: records.len(),
        ..Default::default()
    };
    for rec in records.iter_mut() {
        p.processed += 1;
        if rec.calibrated && !force {
            p.skipped_calibrated += 1;
            continue;
        }
        match detect_pair(rec, base, detector) {
            Ok((Some(l), warnings)) => match boundary_from_landmarks(&l) {
                Ok(b) => {
                    rec.boundary = Some(b);
                    rec.landmarks = Some(l);
                    rec.calibrated = false;
                    p.annotated += 1;
                    p.warnings.extend(warnings.into_iter().map(|w| format!("{}: {w}", rec.record_id)));
                }
                Err(e) => p.failures.push((rec.record_id.clone(), e.to_string())),
            },
            Ok((None, _)) => p.no_face.push(rec.record_id.clone()),
            Err(e) => p.failures.push((rec.record_id.clone(), e.to_string())),
        }
    }
    p
}

/// Store-backed batch annotation. The store lock is held only for reads
/// and writes, not while the detector runs; a record edited meanwhile is
/// reported as a failure instead of being overwritten.
pub fn annotate_store(
    store: &Mutex<Store>,
    base: &Path,
    detector: &dyn Detector,
    force: bool,
    progress: &mut dyn FnMut(&JobProgress),
) -> Result<JobProgress> {
    let all = store.lock().expect("store lock").list(&ListFilter::default())?.items;
    let mut p = JobProgress {
        total: all.len(),
        ..Default::default()
    };
    progress(&p);
    for item in all {
        let rec = &item.record;
        p.processed += 1;
        if rec.calibrated && !force {
            p.skipped_calibrated += 1;
            progress(&p);
            continue;
        }
        match detect_pair(rec, base, detector) {
            Ok((Some(l), warnings)) => {
                let action = format!("auto:{}", detector.name());
                let res = store.lock().expect("store lock").apply(
                    &rec.record_id,
                    Edit {
                        landmarks: Some(l),
                        calibrated: false,
                        editor_id: "auto",
                        action: &action,
                        expected_version: Some(item.version),
                    },
                );
                match res {
                    Ok(_) => {
                        p.annotated += 1;
                        p.warnings.extend(warnings.into_iter().map(|w| format!("{}: {w}", rec.record_id)));
                    }
                    Err(e) => p.failures.push((rec.record_id.clone(), e.to_string())),
                }
            }
            Ok((None, _)) => p.no_face.push(rec.record_id.clone()),
            Err(e) => p.failures.push((rec.record_id.clone(), e.to_string())),
        }
        progress(&p);
    }
    Ok(p)
}
