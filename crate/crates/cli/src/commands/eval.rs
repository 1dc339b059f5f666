use std::cell::RefCell;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};

use dmsl_core::dataset::{build_folds, filter_usable, subject_ids, DiskSource, FoldPlan, NUM_FOLDS};
use dmsl_core::evaluation::{
    aggregate, build_report, evaluate_pipeline, run_fold, save_bar_chart, save_report_csv, save_results_csv,
    score_predictions, test_entries, CvReport, ImageResult, NmeMode, ReportRow,
};
use dmsl_core::training::{DmslPipeline, EpochLog, Hyperparams};
use dmsl_core::{FaceImage, LandmarkSet, SampleRecord, Spectrum, Variation};
use serde::Deserialize;
use serde_json::{json, Value};

use super::train::EpochCsv;
use super::{load_hp, load_manifest, mode, print_json};
use crate::error::{CliError, CliResult};
use crate::out::{git_rev, OutDir};
use crate::MetricArgs;

const RESULTS: &str = "results.csv";
const BASELINE: &str = "baseline.csv";

fn mean_by(results: &[ImageResult], spectrum: Spectrum) -> Option<f64> {
    let xs: Vec<f64> = results.iter().filter(|r| r.spectrum == spectrum).map(|r| r.nme).collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn mean_all(results: &[ImageResult]) -> Option<f64> {
    (!results.is_empty()).then(|| results.iter().map(|r| r.nme).sum::<f64>() / results.len() as f64)
}

/// report.csv, results.csv and chart.png for a set of scored images.
fn write_report(out: &OutDir, rows: &[ReportRow], results: &[ImageResult]) -> CliResult<()> {
    save_report_csv(&out.file("report.csv")?, rows)?;
    save_results_csv(&out.file(RESULTS)?, results)?;
    save_bar_chart(&out.file("chart.png")?, rows)?;
    Ok(())
}

#[derive(Deserialize)]
struct PredictionLine {
    record_id: String,
    spectrum: Spectrum,
    landmarks: LandmarkSet,
}

fn read_predictions(path: &Path) -> CliResult<Vec<(String, Spectrum, LandmarkSet)>> {
    let f = std::fs::File::open(path).map_err(|e| dmsl_core::Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| dmsl_core::Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PredictionLine = serde_json::from_str(&line)
            .map_err(|e| CliError::Invalid(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push((p.record_id, p.spectrum, p.landmarks));
    }
    Ok(out)
}

pub fn eval(
    out: &OutDir,
    checkpoints: Option<&Path>,
    manifest: &Path,
    fold: Option<usize>,
    predictions: Option<&Path>,
    mode: NmeMode,
) -> CliResult<&'static str> {
    let (records, base) = load_manifest(manifest)?;
    if fold.is_some_and(|k| k >= NUM_FOLDS) {
        return Err(CliError::Invalid(format!("--fold must be below {NUM_FOLDS}")));
    }
    let results = match (predictions, checkpoints) {
        (Some(p), _) => {
            let mut results = score_predictions(&records, &read_predictions(p)?, mode)?;
            if let Some(k) = fold {
                let plan = build_folds(&subject_ids(&records))?;
                results.retain(|r| plan.role(k, r.subject_id) == Some(dmsl_core::dataset::Role::Test));
                results.iter_mut().for_each(|r| r.fold = Some(k));
            }
            results
        }
        (None, Some(dir)) => {
            let pipeline = DmslPipeline::load(dir)?;
            let entries = match fold {
                Some(k) => test_entries(&records, &build_folds(&subject_ids(&records))?, k),
                None => filter_usable(&records)
                    .into_iter()
                    .filter(|e| records[e.record].calibrated && records[e.record].is_annotated())
                    .collect(),
            };
            evaluate_pipeline(&pipeline, &records, &entries, &DiskSource::new(&base), mode, fold)?
        }
        (None, None) => return Err(CliError::Invalid("give --checkpoints or --predictions".into())),
    };
    if results.is_empty() {
        return Err(CliError::Invalid("no calibrated, annotated images to evaluate".into()));
    }
    let rows = build_report(&results, &records, None);
    write_report(out, &rows, &results)?;
    let summary = json!({
        "images": results.len(),
        "nme": mean_all(&results),
        "nme_th": mean_by(&results, Spectrum::Th),
        "nme_vis": mean_by(&results, Spectrum::Vis),
        "metric": format!("{mode:?}"),
        "report": out.dir.join("report.csv"),
    });
    out.write_json("eval_summary.json", &summary)?;
    print_json(&summary);
    Ok("eval")
}

/// Trains and scores one fold, writing everything under `out`.
fn fold_job(
    out: &OutDir,
    records: &[SampleRecord],
    base: &Path,
    plan: &FoldPlan,
    hp: &Hyperparams,
    fold: usize,
    mode: NmeMode,
) -> CliResult<(Vec<ImageResult>, Vec<ImageResult>)> {
    let log_file = RefCell::new(EpochCsv::create(&out.file("train_log.csv")?)?);
    let mut log = |row: &EpochLog| log_file.borrow_mut().write(row);
    let source = DiskSource::new(base);
    let outcome = run_fold(records, plan, fold, &source, hp, mode, &mut log)?;
    outcome
        .pipeline
        .save(&out.subdir("checkpoints")?.dir, Some(fold), hp.seed, git_rev())?;
    save_results_csv(&out.file(RESULTS)?, &outcome.results)?;
    save_results_csv(&out.file(BASELINE)?, &outcome.baseline)?;
    out.write_json(
        "fold_summary.json",
        &json!({
            "fold": fold,
            "seed": hp.seed,
            "train_images": outcome.train_images,
            "val_images": outcome.val_images,
            "test_images": outcome.results.len(),
            "nme": mean_all(&outcome.results),
            "baseline_nme": mean_all(&outcome.baseline),
        }),
    )?;
    Ok((outcome.results, outcome.baseline))
}

pub fn cv_fold(
    out: &OutDir,
    manifest: &Path,
    hp: Option<&Path>,
    seed: Option<u64>,
    fold: usize,
    mode: NmeMode,
) -> CliResult<&'static str> {
    if fold >= NUM_FOLDS {
        return Err(CliError::Invalid(format!("--fold must be below {NUM_FOLDS}")));
    }
    let hp = load_hp(hp, seed)?;
    hp.validate()?;
    let (records, base) = load_manifest(manifest)?;
    let plan = build_folds(&subject_ids(&records))?;
    let (results, _) = fold_job(out, &records, &base, &plan, &hp, fold, mode)?;
    print_json(&json!({ "fold": fold, "images": results.len(), "nme": mean_all(&results) }));
    Ok("cv_fold")
}

fn read_results(path: &Path) -> CliResult<Vec<ImageResult>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<ImageResult>, _>>()?)
}

fn fold_rel(fold: usize) -> PathBuf {
    Path::new("folds").join(format!("fold_{fold}"))
}

fn fold_dir(out: &OutDir, fold: usize) -> PathBuf {
    out.dir.join(fold_rel(fold))
}

struct Worker {
    fold: usize,
    child: Child,
}

fn spawn_worker(
    out: &OutDir,
    manifest: &Path,
    hp: Option<&Path>,
    seed: u64,
    fold: usize,
    metric: &MetricArgs,
    verbose: u8,
) -> CliResult<Worker> {
    let exe = std::env::current_exe().map_err(|e| CliError::Runtime(format!("locating own binary: {e}")))?;
    let abs = |p: &Path| std::fs::canonicalize(p).map_err(|e| dmsl_core::Error::io(p, e));
    let mut cmd = Command::new(exe);
    cmd.arg("--out").arg(fold_dir(out, fold)).arg("--seed").arg(seed.to_string());
    if out.force {
        cmd.arg("--force");
    }
    for _ in 0..verbose {
        cmd.arg("-v");
    }
    cmd.arg("cv-fold").arg("--manifest").arg(abs(manifest)?).arg("--fold").arg(fold.to_string());
    if let Some(h) = hp {
        cmd.arg("--hp").arg(abs(h)?);
    }
    if metric.nme_vector_norm {
        cmd.arg("--nme-vector-norm");
    }
    let child = cmd
        .stdout(std::process::Stdio::null())
        .spawn()
        .map_err(|e| CliError::Runtime(format!("starting fold {fold}: {e}")))?;
    Ok(Worker { fold, child })
}

fn run_workers(
    out: &OutDir,
    manifest: &Path,
    hp_path: Option<&Path>,
    seed: u64,
    jobs: usize,
    metric: &MetricArgs,
    verbose: u8,
    on_fold: &mut dyn FnMut(usize, Vec<ImageResult>, Vec<ImageResult>),
) -> CliResult<()> {
    let mut pending: Vec<usize> = (0..NUM_FOLDS).rev().collect();
    let mut running: Vec<Worker> = Vec::new();
    let mut failure = None;
    while !running.is_empty() || (!pending.is_empty() && failure.is_none()) {
        while running.len() < jobs && failure.is_none() {
            let Some(k) = pending.pop() else { break };
            running.push(spawn_worker(out, manifest, hp_path, seed, k, metric, verbose)?);
        }
        // Wait on the oldest worker; folds take similar time.
        let mut w = running.remove(0);
        let status = w
            .child
            .wait()
            .map_err(|e| CliError::Runtime(format!("fold {}: {e}", w.fold)))?;
        if status.success() {
            let dir = fold_dir(out, w.fold);
            on_fold(w.fold, read_results(&dir.join(RESULTS))?, read_results(&dir.join(BASELINE))?);
        } else if failure.is_none() {
            failure = Some(CliError::Runtime(format!(
                "fold {} failed ({status}); see its error output above",
                w.fold
            )));
        }
    }
    failure.map_or(Ok(()), Err)
}

fn cv_summary(report: &CvReport, hp: &Hyperparams, error: Option<String>) -> Value {
    json!({
        "seed": hp.seed,
        "folds_completed": report.folds_completed,
        "images": report.results.len(),
        "nme": report.nme(),
        "nme_th": mean_by(&report.results, Spectrum::Th),
        "nme_vis": mean_by(&report.results, Spectrum::Vis),
        "baseline_nme": report.baseline_nme(),
        "complete": error.is_none() && report.folds_completed.len() == NUM_FOLDS,
        "error": error,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn cv(
    out: &OutDir,
    manifest: &Path,
    hp_path: Option<&Path>,
    seed: Option<u64>,
    jobs: usize,
    metric: &MetricArgs,
    verbose: u8,
) -> CliResult<&'static str> {
    if jobs == 0 {
        return Err(CliError::Invalid("--jobs must be positive".into()));
    }
    let hp = load_hp(hp_path, seed)?;
    hp.validate()?;
    let mode = mode(metric);
    let (records, base) = load_manifest(manifest)?;
    let plan = build_folds(&subject_ids(&records))?;
    for k in 0..NUM_FOLDS {
        out.subdir(fold_rel(k))?;
    }

    let mut done: Vec<(usize, Vec<ImageResult>, Vec<ImageResult>)> = Vec::new();
    let outcome = if jobs == 1 {
        (0..NUM_FOLDS).try_for_each(|k| {
            log::info!("fold {k}: training");
            let dir = OutDir::new(fold_dir(out, k), out.force)?;
            let (r, b) = fold_job(&dir, &records, &base, &plan, &hp, k, mode)?;
            done.push((k, r, b));
            Ok(())
        })
    } else {
        run_workers(out, manifest, hp_path, hp.seed, jobs, metric, verbose, &mut |k, r, b| {
            done.push((k, r, b))
        })
    };

    let report = aggregate(done);
    let rows = build_report(&report.results, &records, Some(&report.baseline));
    if !report.results.is_empty() {
        write_report(out, &rows, &report.results)?;
        save_results_csv(&out.file(BASELINE)?, &report.baseline)?;
    }
    let summary = cv_summary(&report, &hp, outcome.as_ref().err().map(|e| e.to_string()));
    out.write_json("cv_summary.json", &summary)?;
    outcome?;
    print_json(&summary);
    Ok("cv")
}

/// Draws each landmark as a small cross.
fn overlay(img: &FaceImage, l: &LandmarkSet) -> image::RgbImage {
    let mut rgb = img.raster.to_rgb8();
    let (w, h) = (rgb.width() as i64, rgb.height() as i64);
    for p in l.points() {
        let (cx, cy) = ((p.x * w as f64).round() as i64, (p.y * h as f64).round() as i64);
        for d in -2..=2i64 {
            for (x, y) in [(cx + d, cy), (cx, cy + d)] {
                if (0..w).contains(&x) && (0..h).contains(&y) {
                    rgb.put_pixel(x as u32, y as u32, image::Rgb([255, 40, 40]));
                }
            }
        }
    }
    rgb
}

pub fn infer(out: &OutDir, checkpoints: &Path, image: &Path, spectrum: Spectrum) -> CliResult<&'static str> {
    let pipeline = DmslPipeline::load(checkpoints)?;
    let img = FaceImage::load(image, spectrum, 0, Variation::Nn)?;
    let p = pipeline.predict_image(&img)?;
    if p.degenerate_box {
        log::warn!("predicted face box is empty; landmarks come from a blank input");
    }
    let flat = p.landmarks.flatten();
    let value = json!({
        "image": image,
        "spectrum": spectrum,
        "landmarks": flat,
        "boundary": p.boundary,
        "degenerate_box": p.degenerate_box,
    });
    out.write_json("prediction.json", &value)?;
    let overlay_path = out.file("overlay.png")?;
    overlay(&img, &p.landmarks)
        .save(&overlay_path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", overlay_path.display())))?;
    println!("{}", serde_json::to_string(&flat)?);
    Ok("infer")
}
