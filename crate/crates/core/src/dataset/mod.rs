//! Dataset ingestion, preprocessing and the subject-disjoint fold plan.

mod folds;
mod layout;
mod preprocess;
pub mod synth;

pub use folds::{build_folds, Fold, FoldPlan, Role, NUM_FOLDS};
pub use layout::{load_vis_th_layout, LayoutScan, NamePattern, DEFAULT_NAME_PATTERN};
pub use preprocess::{
    crop_square, mirror_record, mirror_sample, prepare_pair, resize_input, CropWindow,
    PairedSample,
};
pub use synth::{synth_faces, SynthConfig};

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::face::{FaceImage, Spectrum, Variation};
use crate::manifest::{resolve, SampleRecord};

/// One single-spectrum image of a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ImageEntry {
    /// Index into the manifest slice the entry was built from.
    pub record: usize,
    pub spectrum: Spectrum,
}

/// Every image of every record, TH before VIS per record.
pub fn expand_images(records: &[SampleRecord]) -> Vec<ImageEntry> {
    records
        .iter()
        .enumerate()
        .flat_map(|(i, _)| Spectrum::ALL.map(|spectrum| ImageEntry { record: i, spectrum }))
        .collect()
}

/// Images usable for experiments: all TH images, and VIS images except the
/// lights-off captures (which are black frames).
pub fn filter_usable(records: &[SampleRecord]) -> Vec<ImageEntry> {
    expand_images(records)
        .into_iter()
        .filter(|e| {
            let r = &records[e.record];
            e.spectrum == Spectrum::Th || (r.usable_vis && r.variation != Variation::Ld)
        })
        .collect()
}

pub fn subject_ids(records: &[SampleRecord]) -> Vec<u32> {
    records
        .iter()
        .map(|r| r.subject_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Fold group for the subject at `position` among `n` ascending subject IDs.
pub fn fold_group_for(position: usize, n: usize) -> u8 {
    (position * NUM_FOLDS / n.max(1)) as u8
}

/// Sets every record's `fold_group` from its subject's rank.
pub fn assign_fold_groups(records: &mut [SampleRecord]) {
    let ids = subject_ids(records);
    for r in records.iter_mut() {
        let pos = ids.binary_search(&r.subject_id).expect("id collected above");
        r.fold_group = fold_group_for(pos, ids.len());
    }
}

/// Loads one image of a record as a grayscale network input. Mirrored
/// records point at files that are already flipped.
pub trait ImageSource: Sync {
    fn load(&self, record: &SampleRecord, spectrum: Spectrum) -> Result<FaceImage>;
}

/// Reads images from disk, relative to the manifest directory.
#[derive(Debug, Clone)]
pub struct DiskSource {
    pub base: std::path::PathBuf,
}

impl DiskSource {
    pub fn new(base: impl AsRef<Path>) -> Self {
        Self {
            base: base.as_ref().to_path_buf(),
        }
    }
}

impl ImageSource for DiskSource {
    fn load(&self, record: &SampleRecord, spectrum: Spectrum) -> Result<FaceImage> {
        let path = resolve(&self.base, record.path(spectrum));
        let mut img = FaceImage::load(&path, spectrum, record.subject_id, record.variation)?;
        img.mirrored = record.mirrored;
        Ok(img.to_gray())
    }
}

/// Serves images held in memory, keyed by record ID.
#[derive(Debug, Clone, Default)]
pub struct MemorySource {
    images: HashMap<(String, Spectrum), FaceImage>,
}

impl MemorySource {
    pub fn from_samples(samples: &[PairedSample]) -> Self {
        let mut images = HashMap::new();
        for s in samples {
            images.insert((s.record.record_id.clone(), Spectrum::Vis), s.vis.clone());
            images.insert((s.record.record_id.clone(), Spectrum::Th), s.th.clone());
        }
        Self { images }
    }
}

impl ImageSource for MemorySource {
    fn load(&self, record: &SampleRecord, spectrum: Spectrum) -> Result<FaceImage> {
        self.images
            .get(&(record.record_id.clone(), spectrum))
            .map(FaceImage::to_gray)
            .ok_or_else(|| Error::Validation(format!("no {spectrum} image for {}", record.record_id)))
    }
}

/// Wraps a source and records which subjects were read.
pub struct RecordingSource<'a> {
    inner: &'a dyn ImageSource,
    reads: Mutex<Vec<(u32, String, Spectrum)>>,
}

impl<'a> RecordingSource<'a> {
    pub fn new(inner: &'a dyn ImageSource) -> Self {
        Self {
            inner,
            reads: Mutex::new(Vec::new()),
        }
    }

    /// `(subject, record_id, spectrum)` per load, in call order.
    pub fn reads(&self) -> Vec<(u32, String, Spectrum)> {
        self.reads.lock().expect("reads lock").clone()
    }

    pub fn subjects_read(&self) -> BTreeSet<u32> {
        self.reads().into_iter().map(|r| r.0).collect()
    }
}

impl ImageSource for RecordingSource<'_> {
    fn load(&self, record: &SampleRecord, spectrum: Spectrum) -> Result<FaceImage> {
        self.reads
            .lock()
            .expect("reads lock")
            .push((record.subject_id, record.record_id.clone(), spectrum));
        self.inner.load(record, spectrum)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vis_th_shaped() -> Vec<SampleRecord> {
        (1..=50)
            .flat_map(|s| {
                Variation::ALL
                    .map(|v| SampleRecord::new(s, v, "v.png".into(), "t.png".into()))
            })
            .collect()
    }

    #[test]
    fn usable_image_arithmetic() {
        let originals = vis_th_shaped();
        assert_eq!(expand_images(&originals).len(), 2100);
        let mut all = originals.clone();
        all.extend(originals.iter().map(|r| SampleRecord {
            mirrored: true,
            record_id: format!("{}_m", r.record_id),
            ..r.clone()
        }));
        assert_eq!(expand_images(&all).len(), 4200);
        let usable = filter_usable(&all);
        assert_eq!(usable.len(), 4100);
        let th = usable.iter().filter(|e| e.spectrum == Spectrum::Th).count();
        assert_eq!(th, 2100);
        assert!(usable
            .iter()
            .all(|e| !(e.spectrum == Spectrum::Vis && all[e.record].variation == Variation::Ld)));
    }

    #[test]
    fn one_subject_mirrored_gives_82() {
        let one: Vec<_> = Variation::ALL
            .iter()
            .flat_map(|&v| {
                let r = SampleRecord::new(1, v, "v".into(), "t".into());
                [r.clone(), SampleRecord { mirrored: true, ..r }]
            })
            .collect();
        assert_eq!(filter_usable(&one).len(), 82);
    }

    #[test]
    fn no_ld_means_nothing_filtered() {
        let recs: Vec<_> = vis_th_shaped()
            .into_iter()
            .filter(|r| r.variation != Variation::Ld)
            .collect();
        assert_eq!(filter_usable(&recs), expand_images(&recs));
    }

    #[test]
    fn fold_groups_follow_subject_rank() {
        let mut recs = vis_th_shaped();
        assign_fold_groups(&mut recs);
        for r in &recs {
            assert_eq!(r.fold_group as u32, (r.subject_id - 1) / 5);
        }
    }
}
