use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use regex::Regex;

use crate::error::{Error, Result};
use crate::face::{Spectrum, Variation};
use crate::manifest::SampleRecord;

/// Matches names such as `TH_001_1_01_NN.jpg` or `VIS_012_2_07_ESp.png`.
pub const DEFAULT_NAME_PATTERN: &str =
    r"^(?P<spectrum>VIS|TH)_(?P<subject>\d+)_\d+_\d+_(?P<variation>[A-Za-z]+)\.(?i:png|jpe?g)$";

/// Filename regex with `spectrum`, `subject` and `variation` named captures.
#[derive(Debug, Clone)]
pub struct NamePattern(Regex);

impl NamePattern {
    pub fn new(pattern: &str) -> Result<Self> {
        let re = Regex::new(pattern)
            .map_err(|e| Error::Config(format!("bad name pattern: {e}")))?;
        let names: Vec<_> = re.capture_names().flatten().collect();
        for required in ["spectrum", "subject", "variation"] {
            if !names.contains(&required) {
                return Err(Error::Config(format!(
                    "name pattern lacks the `{required}` capture"
                )));
            }
        }
        Ok(Self(re))
    }

    pub fn parse(&self, file_name: &str) -> Result<(Spectrum, u32, Variation)> {
        let caps = self
            .0
            .captures(file_name)
            .ok_or_else(|| Error::Validation(format!("`{file_name}` does not match")))?;
        let spectrum = caps["spectrum"].parse()?;
        let subject = caps["subject"]
            .parse()
            .map_err(|_| Error::Validation(format!("bad subject in `{file_name}`")))?;
        let variation = caps["variation"].parse()?;
        Ok((spectrum, subject, variation))
    }
}

impl Default for NamePattern {
    fn default() -> Self {
        Self::new(DEFAULT_NAME_PATTERN).expect("default pattern is valid")
    }
}

#[derive(Debug, Clone, Default)]
pub struct LayoutScan {
    pub records: Vec<SampleRecord>,
    pub warnings: Vec<String>,
}

/// Pairs VIS and TH files under `root` by (subject, variation). Paths in
/// the returned records are relative to `root`. Unparsable names and
/// unpaired images produce warnings.
pub fn load_vis_th_layout(root: &Path, pattern: &NamePattern) -> Result<LayoutScan> {
    let mut files = Vec::new();
    collect_files(root, root, &mut files)?;
    if files.is_empty() {
        return Err(Error::Validation(format!("no files under {}", root.display())));
    }
    files.sort();

    let mut warnings = Vec::new();
    let mut pairs: BTreeMap<(u32, Variation), [Option<PathBuf>; 2]> = BTreeMap::new();
    for rel in files {
        let name = rel.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        match pattern.parse(name) {
            Ok((spectrum, subject, variation)) => {
                let slot = &mut pairs.entry((subject, variation)).or_default()
                    [(spectrum == Spectrum::Th) as usize];
                if slot.is_some() {
                    warnings.push(format!("duplicate {spectrum} image {}; kept the first", rel.display()));
                } else {
                    *slot = Some(rel);
                }
            }
            Err(e) => warnings.push(format!("skipping {}: {e}", rel.display())),
        }
    }

    let mut records = Vec::new();
    for ((subject, variation), [vis, th]) in pairs {
        match (vis, th) {
            (Some(vis), Some(th)) => records.push(SampleRecord::new(subject, variation, vis, th)),
            (vis, _) => warnings.push(format!(
                "subject {subject} {variation}: {} image has no counterpart",
                if vis.is_some() { "VIS" } else { "TH" }
            )),
        }
    }
    super::assign_fold_groups(&mut records);
    Ok(LayoutScan { records, warnings })
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).unwrap_or(&path).to_path_buf());
        }
    }
    Ok(())
}
