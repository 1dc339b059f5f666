//! Sample records and the JSON Lines manifest format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::face::{Spectrum, Variation};
use crate::landmarks::{BoundaryBox, LandmarkSet};

/// One registered visible/thermal pair and its annotation.
///
/// Image paths are relative to the manifest's directory unless absolute.
/// `landmarks` is serialized as a flat 136-element array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub record_id: String,
    pub subject_id: u32,
    pub variation: Variation,
    #[serde(default)]
    pub mirrored: bool,
    pub vis_path: PathBuf,
    pub th_path: PathBuf,
    pub landmarks: Option<LandmarkSet>,
    pub boundary: Option<BoundaryBox>,
    pub fold_group: u8,
    pub calibrated: bool,
    pub usable_vis: bool,
}

impl SampleRecord {
    /// Record id for an original (non-mirrored) pair.
    pub fn make_id(subject_id: u32, variation: Variation) -> String {
        format!("{subject_id:03}_{}", variation.acronym())
    }

    pub fn new(subject_id: u32, variation: Variation, vis_path: PathBuf, th_path: PathBuf) -> Self {
        Self {
            record_id: Self::make_id(subject_id, variation),
            subject_id,
            variation,
            mirrored: false,
            vis_path,
            th_path,
            landmarks: None,
            boundary: None,
            fold_group: 0,
            calibrated: false,
            usable_vis: variation != Variation::Ld,
        }
    }

    pub fn path(&self, spectrum: Spectrum) -> &Path {
        match spectrum {
            Spectrum::Vis => &self.vis_path,
            Spectrum::Th => &self.th_path,
        }
    }

    pub fn is_annotated(&self) -> bool {
        self.landmarks.is_some() && self.boundary.is_some()
    }

    /// Landmarks and boundary, or an error naming the record.
    pub fn annotation(&self) -> Result<(&LandmarkSet, BoundaryBox)> {
        match (&self.landmarks, self.boundary) {
            (Some(l), Some(b)) => Ok((l, b)),
            _ => Err(Error::Validation(format!(
                "record {} has no landmark annotation",
                self.record_id
            ))),
        }
    }
}

/// Resolves a record path against the directory holding the manifest.
pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| {
            Error::CorruptData(format!("{}:{}: {e}", path.display(), n + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_records(&mut w, records).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_records<W: Write>(w: &mut W, records: &[SampleRecord]) -> std::io::Result<()> {
    for rec in records {
        serde_json::to_writer(&mut *w, rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
