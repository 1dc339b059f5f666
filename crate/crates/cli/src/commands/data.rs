use std::path::{Path, PathBuf};

use dmsl_core::dataset::synth::write_samples;
use dmsl_core::dataset::{
    expand_images, filter_usable, load_vis_th_layout, mirror_sample, prepare_pair, synth_faces,
    NamePattern, PairedSample, SynthConfig,
};
use dmsl_core::manifest::{resolve, write_manifest};
use dmsl_core::masks::{boundary_mask, landmark_mask};
use dmsl_core::{FaceImage, SampleRecord, Spectrum, Variation, INPUT_SIZE};
use serde_json::json;

use super::{load_manifest, print_json};
use crate::error::{CliError, CliResult};
use crate::out::OutDir;
use crate::MaskKind;

const MANIFEST: &str = "manifest.jsonl";

pub fn ingest(out: &OutDir, root: &Path, pattern: &str) -> CliResult<&'static str> {
    let pattern = NamePattern::new(pattern)?;
    let scan = load_vis_th_layout(root, &pattern)?;
    for w in &scan.warnings {
        log::warn!("{w}");
    }
    if scan.records.is_empty() {
        return Err(CliError::Invalid(format!("no VIS/TH pairs found under {}", root.display())));
    }
    let root = std::fs::canonicalize(root).map_err(|e| dmsl_core::Error::io(root, e))?;
    let records: Vec<SampleRecord> = scan
        .records
        .into_iter()
        .map(|r| SampleRecord {
            vis_path: root.join(&r.vis_path),
            th_path: root.join(&r.th_path),
            ..r
        })
        .collect();
    let path = out.file(MANIFEST)?;
    write_manifest(&path, &records)?;
    print_json(&json!({
        "manifest": path,
        "records": records.len(),
        "images": expand_images(&records).len(),
        "warnings": scan.warnings,
    }));
    Ok("ingest")
}

pub fn synth(
    out: &OutDir,
    subjects: u32,
    seed: u64,
    width: usize,
    height: usize,
    variations: &[Variation],
) -> CliResult<&'static str> {
    if subjects == 0 {
        return Err(CliError::Invalid("--subjects must be positive".into()));
    }
    if width < INPUT_SIZE || height < INPUT_SIZE {
        return Err(CliError::Invalid(format!("frame must be at least {INPUT_SIZE}x{INPUT_SIZE}")));
    }
    out.file(MANIFEST)?;
    let mut cfg = SynthConfig {
        width,
        height,
        ..SynthConfig::new(subjects, seed)
    };
    if !variations.is_empty() {
        cfg.variations = variations.to_vec();
    }
    let records = write_samples(&out.dir, &synth_faces(&cfg))?;
    print_json(&json!({
        "manifest": out.dir.join(MANIFEST),
        "records": records.len(),
        "seed": seed,
    }));
    Ok("synth")
}

fn load_pair(rec: &SampleRecord, base: &Path) -> CliResult<PairedSample> {
    let load = |s: Spectrum| FaceImage::load(&resolve(base, rec.path(s)), s, rec.subject_id, rec.variation);
    Ok(PairedSample {
        record: rec.clone(),
        vis: load(Spectrum::Vis)?,
        th: load(Spectrum::Th)?,
    })
}

fn save_pair(out: &OutDir, s: &PairedSample) -> CliResult<SampleRecord> {
    let mut rec = s.record.clone();
    let vis_rel = PathBuf::from(format!("images/VIS_{}.png", rec.record_id));
    let th_rel = PathBuf::from(format!("images/TH_{}.png", rec.record_id));
    s.vis.raster.save_png(&out.file(&vis_rel)?)?;
    s.th.raster.save_png(&out.file(&th_rel)?)?;
    rec.vis_path = vis_rel;
    rec.th_path = th_rel;
    Ok(rec)
}

pub fn preprocess(out: &OutDir, manifest: &Path, mirror: bool) -> CliResult<&'static str> {
    let (records, base) = load_manifest(manifest)?;
    out.file(MANIFEST)?;
    let mut written = Vec::new();
    let mut skipped = Vec::new();
    for rec in &records {
        if !rec.is_annotated() {
            log::warn!("{}: not annotated, skipped", rec.record_id);
            skipped.push(rec.record_id.clone());
            continue;
        }
        let pair = prepare_pair(&load_pair(rec, &base)?)?;
        written.push(save_pair(out, &pair)?);
        if mirror && !rec.mirrored {
            written.push(save_pair(out, &mirror_sample(&pair)?)?);
        }
    }
    let path = out.dir.join(MANIFEST);
    write_manifest(&path, &written)?;
    print_json(&json!({
        "manifest": path,
        "input_records": records.len(),
        "records": written.len(),
        "images": expand_images(&written).len(),
        "usable_images": filter_usable(&written).len(),
        "skipped": skipped,
    }));
    Ok("preprocess")
}

pub fn masks(out: &OutDir, manifest: &Path, kind: MaskKind, limit: Option<usize>) -> CliResult<&'static str> {
    let (records, _) = load_manifest(manifest)?;
    let mut n = 0;
    for rec in records.iter().filter(|r| r.is_annotated()).take(limit.unwrap_or(usize::MAX)) {
        let (l, b) = rec.annotation()?;
        let (mask, suffix) = match kind {
            MaskKind::Landmark => (landmark_mask(l, INPUT_SIZE, INPUT_SIZE)?, "landmark"),
            MaskKind::Boundary => (boundary_mask(&b, INPUT_SIZE, INPUT_SIZE)?, "boundary"),
        };
        mask.save_png(&out.file(format!("masks/{}_{suffix}.png", rec.record_id))?)?;
        n += 1;
    }
    print_json(&json!({ "masks": n, "dir": out.dir.join("masks") }));
    Ok("masks")
}
