use std::net::SocketAddr;
use std::path::Path;

use dmsl_annotate::{annotate_records, detector_by_name, serve as serve_api, AppState, Store};
use dmsl_core::dataset::{load_vis_th_layout, NamePattern};
use dmsl_core::manifest::{read_manifest, write_manifest};
use serde_json::json;

use super::print_json;
use crate::error::{CliError, CliResult};
use crate::out::OutDir;

pub fn annotate(
    out: &OutDir,
    root: &Path,
    detector: &str,
    manifest: Option<&Path>,
    db: Option<&Path>,
    force: bool,
) -> CliResult<&'static str> {
    let detector = detector_by_name(detector)?;
    let default_manifest = root.join("manifest.jsonl");
    let mut records = match manifest {
        Some(m) => read_manifest(m)?,
        None if default_manifest.exists() => read_manifest(&default_manifest)?,
        None => {
            let scan = load_vis_th_layout(root, &NamePattern::default())?;
            for w in &scan.warnings {
                log::warn!("{w}");
            }
            scan.records
        }
    };
    let base = match manifest {
        Some(m) => m.parent().unwrap_or(root).to_path_buf(),
        None => root.to_path_buf(),
    };
    let target = out.file("manifest.jsonl")?;
    let progress = annotate_records(&mut records, &base, detector.as_ref(), force);
    for w in &progress.warnings {
        log::warn!("{w}");
    }
    for (id, e) in &progress.failures {
        log::error!("{id}: {e}");
    }
    // Output paths must resolve from the output directory.
    let base = std::fs::canonicalize(&base).map_err(|e| dmsl_core::Error::io(&base, e))?;
    for r in &mut records {
        r.vis_path = dmsl_core::manifest::resolve(&base, &r.vis_path);
        r.th_path = dmsl_core::manifest::resolve(&base, &r.th_path);
    }
    write_manifest(&target, &records)?;
    if let Some(db) = db {
        let mut store = Store::open(db)?;
        store.import(&records, force)?;
    }
    out.write_json("annotate_report.json", &progress)?;
    print_json(&json!({
        "manifest": target,
        "detector": detector.name(),
        "total": progress.total,
        "annotated": progress.annotated,
        "no_face": progress.no_face.len(),
        "failures": progress.failures.len(),
        "skipped_calibrated": progress.skipped_calibrated,
    }));
    Ok("annotate")
}

pub fn serve(
    host: &str,
    port: u16,
    db: &Path,
    manifest: Option<&Path>,
    images: Option<&Path>,
    detector: &str,
) -> CliResult<&'static str> {
    let detector = detector_by_name(detector)?;
    let mut store = Store::open(db)?;
    if let Some(m) = manifest {
        let n = store.import(&read_manifest(m)?, false)?;
        log::info!("imported {n} records");
    }
    let root = images
        .map(Path::to_path_buf)
        .or_else(|| manifest.and_then(Path::parent).map(Path::to_path_buf))
        .unwrap_or_default();
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|e| CliError::Invalid(format!("bad address {host}:{port}: {e}")))?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    runtime
        .block_on(serve_api(AppState::new(store, root, detector), addr))
        .map_err(|e| CliError::Runtime(format!("server: {e}")))?;
    Ok("serve")
}
