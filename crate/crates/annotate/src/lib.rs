//! Ground-truth production for paired VIS/TH faces: detector-based
//! auto-annotation of the VIS image, transfer to the registered TH image,
//! manual calibration with versioned history, and the HTTP API used by the
//! calibration UI.

pub mod detector;
pub mod error;
pub mod ops;
pub mod service;
pub mod store;

pub use detector::{detector_by_name, Detector, SubprocessDetector, TemplateDetector};
pub use error::{AnnotateError, Result};
pub use ops::{annotate_records, annotate_store, auto_annotate, calibrate, superimpose, JobProgress};
pub use service::{router, serve, AppState};
pub use store::{ListFilter, Store, StoredRecord};
