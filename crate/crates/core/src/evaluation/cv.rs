use super::{image_nme, ImageResult, NmeMode};
use crate::dataset::{build_folds, filter_usable, subject_ids, FoldPlan, ImageEntry, ImageSource, Role, NUM_FOLDS};
use crate::error::Result;
use crate::face::FaceImage;
use crate::manifest::SampleRecord;
use crate::training::{load_examples, train_dmsl, DmslPipeline, Hyperparams, LogSink};

/// Usable images of calibrated test subjects in `fold`.
pub fn test_entries(records: &[SampleRecord], plan: &FoldPlan, fold: usize) -> Vec<ImageEntry> {
    filter_usable(records)
        .into_iter()
        .filter(|e| {
            let r = &records[e.record];
            r.calibrated && r.is_annotated() && plan.role(fold, r.subject_id) == Some(Role::Test)
        })
        .collect()
}

/// Runs the pipeline on the listed images and scores each one.
pub fn evaluate_pipeline(
    pipeline: &DmslPipeline,
    records: &[SampleRecord],
    entries: &[ImageEntry],
    source: &dyn ImageSource,
    mode: NmeMode,
    fold: Option<usize>,
) -> Result<Vec<ImageResult>> {
    let examples = load_examples(records, entries, source)?;
    let images: Vec<&FaceImage> = examples.iter().map(|e| &e.image).collect();
    let preds = pipeline.predict(&images)?;
    examples
        .iter()
        .zip(preds)
        .map(|(e, p)| {
            Ok(ImageResult {
                record_id: e.record_id.clone(),
                subject_id: e.subject_id,
                variation: e.variation,
                spectrum: e.spectrum,
                fold,
                nme: image_nme(&e.landmarks, &p.landmarks, mode)?,
            })
        })
        .collect()
}

pub struct FoldOutcome {
    pub fold: usize,
    pub results: Vec<ImageResult>,
    /// The same images scored by the untrained, seeded pipeline.
    pub baseline: Vec<ImageResult>,
    pub train_images: usize,
    pub val_images: usize,
    pub pipeline: DmslPipeline,
}

/// Trains one fold and evaluates it on its test group.
pub fn run_fold(
    records: &[SampleRecord],
    plan: &FoldPlan,
    fold: usize,
    source: &dyn ImageSource,
    hp: &Hyperparams,
    mode: NmeMode,
    log: LogSink,
) -> Result<FoldOutcome> {
    let trained = train_dmsl(records, plan, fold, source, hp, log)?;
    let entries = test_entries(records, plan, fold);
    let results = evaluate_pipeline(&trained.pipeline, records, &entries, source, mode, Some(fold))?;
    let untrained = DmslPipeline::untrained(hp)?;
    let baseline = evaluate_pipeline(&untrained, records, &entries, source, mode, Some(fold))?;
    Ok(FoldOutcome {
        fold,
        results,
        baseline,
        train_images: trained.train_images,
        val_images: trained.val_images,
        pipeline: trained.pipeline,
    })
}

#[derive(Debug, Clone, Default)]
pub struct CvReport {
    pub results: Vec<ImageResult>,
    pub baseline: Vec<ImageResult>,
    pub folds_completed: Vec<usize>,
}

impl CvReport {
    pub fn nme(&self) -> Option<f64> {
        mean_nme(&self.results)
    }

    pub fn baseline_nme(&self) -> Option<f64> {
        mean_nme(&self.baseline)
    }
}

fn mean_nme(rs: &[ImageResult]) -> Option<f64> {
    (!rs.is_empty()).then(|| rs.iter().map(|r| r.nme).sum::<f64>() / rs.len() as f64)
}

/// Concatenates per-fold results, ordered by fold.
pub fn aggregate(mut outcomes: Vec<(usize, Vec<ImageResult>, Vec<ImageResult>)>) -> CvReport {
    outcomes.sort_by_key(|o| o.0);
    let mut report = CvReport::default();
    for (fold, results, baseline) in outcomes {
        report.folds_completed.push(fold);
        report.results.extend(results);
        report.baseline.extend(baseline);
    }
    report
}

/// Ten-fold cross-validation. `on_fold` sees each fold as it finishes (to
/// persist partial results); an error in any fold stops the run.
pub fn cross_validate(
    records: &[SampleRecord],
    source: &dyn ImageSource,
    hp: &Hyperparams,
    mode: NmeMode,
    log: LogSink,
    on_fold: &mut dyn FnMut(&FoldOutcome) -> Result<()>,
) -> Result<CvReport> {
    let plan = build_folds(&subject_ids(records))?;
    let mut outcomes = Vec::with_capacity(NUM_FOLDS);
    for fold in 0..NUM_FOLDS {
        log::info!("fold {fold}: training");
        let outcome = run_fold(records, &plan, fold, source, hp, mode, log)?;
        on_fold(&outcome)?;
        outcomes.push((fold, outcome.results, outcome.baseline));
    }
    Ok(aggregate(outcomes))
}
