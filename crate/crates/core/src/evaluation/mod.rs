//! Normalized mean error, per-variation breakdowns and report output.

mod chart;
mod cv;

pub use chart::{draw_bar_chart, save_bar_chart};
pub use cv::{aggregate, cross_validate, evaluate_pipeline, run_fold, test_entries, CvReport, FoldOutcome};

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::face::{Spectrum, Variation};
use crate::landmarks::{LandmarkSet, BOX_EPS, NUM_POINTS};
use crate::manifest::SampleRecord;

/// Distance between the outer eye corners, points 37 and 46.
pub fn interocular(l: &LandmarkSet) -> Result<f64> {
    let d = l.point(37).distance(&l.point(46));
    if d < BOX_EPS {
        return Err(Error::DegenerateInterocular);
    }
    Ok(d)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NmeMode {
    /// Mean per-point Euclidean error over the inter-ocular distance.
    #[default]
    PointMean,
    /// Norm of the whole 136-value difference vector over `68 * D`.
    VectorNorm,
}

/// Normalized error of a single image.
pub fn image_nme(truth: &LandmarkSet, pred: &LandmarkSet, mode: NmeMode) -> Result<f64> {
    let d = interocular(truth)?;
    let pairs = truth.points().iter().zip(pred.points());
    let err = match mode {
        NmeMode::PointMean => pairs.map(|(a, b)| a.distance(b)).sum::<f64>(),
        NmeMode::VectorNorm => pairs
            .map(|(a, b)| (a.x - b.x).powi(2) + (a.y - b.y).powi(2))
            .sum::<f64>()
            .sqrt(),
    };
    Ok(err / (NUM_POINTS as f64 * d))
}

pub fn nme(truths: &[LandmarkSet], preds: &[LandmarkSet]) -> Result<f64> {
    nme_with(truths, preds, NmeMode::PointMean)
}

/// Mean over images of the per-image normalized error.
pub fn nme_with(truths: &[LandmarkSet], preds: &[LandmarkSet], mode: NmeMode) -> Result<f64> {
    if truths.len() != preds.len() {
        return Err(Error::Validation(format!(
            "{} ground-truth sets but {} predictions",
            truths.len(),
            preds.len()
        )));
    }
    if truths.is_empty() {
        return Err(Error::Validation("no images to score".into()));
    }
    let errors = truths
        .iter()
        .zip(preds)
        .map(|(t, p)| image_nme(t, p, mode))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&errors).expect("non-empty"))
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Scored prediction for one test image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub record_id: String,
    pub subject_id: u32,
    pub variation: Variation,
    pub spectrum: Spectrum,
    pub fold: Option<usize>,
    pub nme: f64,
}

/// One line of a report. `n` and `nme` are empty for groups without
/// samples and `n` is empty for external reference values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub scope: String,
    pub spectrum: String,
    pub variation: String,
    pub n: Option<usize>,
    pub nme: Option<f64>,
}

impl ReportRow {
    fn group(scope: &str, spectrum: &str, variation: &str, results: &[&ImageResult]) -> Self {
        let errors: Vec<f64> = results.iter().map(|r| r.nme).collect();
        Self {
            scope: scope.into(),
            spectrum: spectrum.into(),
            variation: variation.into(),
            n: Some(errors.len()),
            nme: mean(&errors),
        }
    }
}

const ALL: &str = "ALL";

/// Published comparison values (TH, VIS) for other detectors and for the
/// original model on its own evaluation subset.
pub const TABLE2: [(&str, f64, f64); 4] = [
    ("AAM", 0.1311, 0.1434),
    ("Dlib", 0.0293, 0.0581),
    ("Chu et al.", 0.0222, 0.0556),
    ("DMSL (reported)", 0.0210, 0.0544),
];

pub fn reference_rows() -> Vec<ReportRow> {
    TABLE2
        .iter()
        .flat_map(|(name, th, vis)| {
            [(Spectrum::Th, *th), (Spectrum::Vis, *vis)].map(|(s, v)| ReportRow {
                scope: format!("reference:{name}"),
                spectrum: s.to_string(),
                variation: ALL.into(),
                n: None,
                nme: Some(v),
            })
        })
        .collect()
}

/// One row per variation present in `manifest` (empty when no result has
/// it), then the overall row.
pub fn per_variation_report(results: &[ImageResult], manifest: &[SampleRecord]) -> Vec<ReportRow> {
    let present: BTreeSet<Variation> = manifest.iter().map(|r| r.variation).collect();
    let mut rows: Vec<ReportRow> = present
        .into_iter()
        .map(|v| {
            let group: Vec<&ImageResult> = results.iter().filter(|r| r.variation == v).collect();
            ReportRow::group("variation", ALL, v.acronym(), &group)
        })
        .collect();
    rows.push(ReportRow::group("overall", ALL, ALL, &results.iter().collect::<Vec<_>>()));
    rows
}

pub fn per_spectrum_rows(scope: &str, results: &[ImageResult]) -> Vec<ReportRow> {
    Spectrum::ALL
        .iter()
        .map(|s| {
            let group: Vec<&ImageResult> = results.iter().filter(|r| r.spectrum == *s).collect();
            ReportRow::group(scope, s.as_str(), ALL, &group)
        })
        .collect()
}

/// Full evaluation report: overall, per spectrum, per variation, per fold
/// when folds are known, the untrained baseline when given, and the
/// published reference rows.
pub fn build_report(
    results: &[ImageResult],
    manifest: &[SampleRecord],
    baseline: Option<&[ImageResult]>,
) -> Vec<ReportRow> {
    let mut rows = per_variation_report(results, manifest);
    let overall = rows.pop().expect("overall row");
    rows.insert(0, overall);
    let spectra = per_spectrum_rows("spectrum", results);
    rows.splice(1..1, spectra);
    let folds: BTreeSet<usize> = results.iter().filter_map(|r| r.fold).collect();
    for k in folds {
        let group: Vec<&ImageResult> = results.iter().filter(|r| r.fold == Some(k)).collect();
        rows.push(ReportRow::group(&format!("fold:{k}"), ALL, ALL, &group));
    }
    if let Some(base) = baseline {
        rows.push(ReportRow::group("baseline", ALL, ALL, &base.iter().collect::<Vec<_>>()));
        rows.extend(per_spectrum_rows("baseline", base));
    }
    rows.extend(reference_rows());
    rows
}

pub fn write_report_csv<W: Write>(w: W, rows: &[ReportRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush().map_err(|e| Error::io("report", e))
}

pub fn save_report_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_report_csv(f, rows)
}

pub fn save_results_csv(path: &Path, results: &[ImageResult]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = csv::Writer::from_writer(f);
    for r in results {
        out.serialize(r)?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Scores predictions against calibrated ground truth, joined on
/// `(record_id, spectrum)`.
pub fn score_predictions(
    manifest: &[SampleRecord],
    predictions: &[(String, Spectrum, LandmarkSet)],
    mode: NmeMode,
) -> Result<Vec<ImageResult>> {
    predictions
        .iter()
        .map(|(id, spectrum, pred)| {
            let rec = manifest
                .iter()
                .find(|r| &r.record_id == id)
                .ok_or_else(|| Error::Validation(format!("prediction for unknown record {id}")))?;
            if !rec.calibrated {
                return Err(Error::Validation(format!("record {id} is not calibrated")));
            }
            let (truth, _) = rec.annotation()?;
            Ok(ImageResult {
                record_id: id.clone(),
                subject_id: rec.subject_id,
                variation: rec.variation,
                spectrum: *spectrum,
                fold: None,
                nme: image_nme(truth, pred, mode)?,
            })
        })
        .collect()
}
