//! Pluggable 68-point face detectors.

use std::path::Path;
use std::process::Command;
use std::sync::Arc;

use dmsl_core::dataset::synth::template;
use dmsl_core::{FaceImage, NUM_POINTS};

use crate::error::{AnnotateError, Result};

/// Pixel-coordinate points from a detector.
pub type PixelPoints = Vec<[f64; 2]>;

pub trait Detector: Send + Sync {
    fn name(&self) -> &str;

    /// 68 points in pixel coordinates, or `None` when no face is found.
    /// `path` is the file the image was read from, when there is one.
    fn detect(&self, img: &FaceImage, path: Option<&Path>) -> Result<Option<PixelPoints>>;
}

/// Places a fixed mean-face template at the image center. Reports no face
/// on near-black frames.
#[derive(Debug, Clone)]
pub struct TemplateDetector {
    pub min_mean_intensity: f64,
}

impl Default for TemplateDetector {
    fn default() -> Self {
        Self {
            min_mean_intensity: 0.02,
        }
    }
}

impl TemplateDetector {
    pub fn points(width: usize, height: usize) -> PixelPoints {
        template()
            .iter()
            .map(|p| [width as f64 * (0.5 + 0.3 * p.x), height as f64 * (0.45 + 0.3 * p.y)])
            .collect()
    }
}

impl Detector for TemplateDetector {
    fn name(&self) -> &str {
        "template"
    }

    fn detect(&self, img: &FaceImage, _path: Option<&Path>) -> Result<Option<PixelPoints>> {
        let r = &img.raster;
        if r.data.is_empty() || r.sum() / (r.data.len() as f64) < self.min_mean_intensity {
            return Ok(None);
        }
        Ok(Some(Self::points(r.width, r.height)))
    }
}

/// Runs an external program with the image path as its last argument. The
/// program prints JSON: `null` for no face, or 68 `[x, y]` pixel pairs (a
/// flat 136-number array is also accepted).
#[derive(Debug, Clone)]
pub struct SubprocessDetector {
    pub program: String,
    pub args: Vec<String>,
}

impl SubprocessDetector {
    pub fn parse_output(stdout: &str) -> Result<Option<PixelPoints>> {
        let value: serde_json::Value = serde_json::from_str(stdout.trim())
            .map_err(|e| AnnotateError::Detector(format!("unparsable output: {e}")))?;
        if value.is_null() {
            return Ok(None);
        }
        let bad = || AnnotateError::Detector("expected null or 68 points".into());
        let arr = value.as_array().ok_or_else(bad)?;
        let points: PixelPoints = if arr.len() == 2 * NUM_POINTS {
            let flat: Vec<f64> = arr.iter().map(|v| v.as_f64().ok_or_else(bad)).collect::<Result<_>>()?;
            flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect()
        } else {
            arr.iter()
                .map(|p| {
                    let xy = p.as_array().filter(|a| a.len() == 2).ok_or_else(bad)?;
                    Ok([xy[0].as_f64().ok_or_else(bad)?, xy[1].as_f64().ok_or_else(bad)?])
                })
                .collect::<Result<_>>()?
        };
        if points.len() != NUM_POINTS {
            return Err(AnnotateError::Detector(format!("got {} points", points.len())));
        }
        Ok(Some(points))
    }
}

impl Detector for SubprocessDetector {
    fn name(&self) -> &str {
        &self.program
    }

    fn detect(&self, _img: &FaceImage, path: Option<&Path>) -> Result<Option<PixelPoints>> {
        let path = path.ok_or_else(|| AnnotateError::Detector("subprocess detector needs an image path".into()))?;
        let out = Command::new(&self.program)
            .args(&self.args)
            .arg(path)
            .output()
            .map_err(|e| AnnotateError::Detector(format!("{}: {e}", self.program)))?;
        if !out.status.success() {
            return Err(AnnotateError::Detector(format!(
                "{} exited with {}: {}",
                self.program,
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        Self::parse_output(&String::from_utf8_lossy(&out.stdout))
    }
}

/// `template`, or `cmd:PROGRAM [ARGS...]` for a subprocess detector.
pub fn detector_by_name(name: &str) -> Result<Arc<dyn Detector>> {
    if name == "template" {
        return Ok(Arc::new(TemplateDetector::default()));
    }
    if let Some(cmd) = name.strip_prefix("cmd:") {
        let mut parts = cmd.split_whitespace().map(str::to_string);
        let program = parts
            .next()
            .ok_or_else(|| AnnotateError::Validation("empty detector command".into()))?;
        return Ok(Arc::new(SubprocessDetector {
            program,
            args: parts.collect(),
        }));
    }
    Err(AnnotateError::Validation(format!(
        "unknown detector `{name}` (use `template` or `cmd:PROGRAM`)"
    )))
}
