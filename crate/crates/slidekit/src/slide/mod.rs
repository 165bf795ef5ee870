//! Slide pyramid reading, physical-resolution rescaling, and synthetic
//! slide generation with planted ground truth.
//!
//! The on-disk pyramid is a directory: `meta.json` describing dimensions,
//! microns-per-pixel and per-level downsample factors, plus binary P6 PPM
//! tiles named `L{level}_X{col}_Y{row}.ppm`. A bare `.ppm` file opens as a
//! one-level pyramid with a declared mpp.

mod ppm;
mod pyramid;
mod synth;

pub use ppm::{read_pgm, read_ppm, write_pgm, write_ppm};
pub use pyramid::{
    open_pyramid, open_single_raster, rescale_to_mpp, LevelInfo, PyramidMeta, RegionSource,
    RescaledView, SlidePyramid,
};
pub use pyramid::{box_downsample, write_pyramid};
#[cfg(test)]
pub(crate) use synth::render_level0;
pub use synth::{
    generate_synthetic_slide, load_truth, make_arrangement_dataset, make_local_presence_dataset,
    rasterize_polygons, GeneratedDataset, LabelRule, MotifKind, MotifPlacement, Polygon,
    SlideTruth, SyntheticSlideSpec, TruthBox, GENERATOR_STAIN_EOSIN, GENERATOR_STAIN_HEMATOXYLIN,
};

use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum SlideError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("missing or invalid pyramid metadata: {0}")]
    MissingMetadata(String),
    #[error("corrupt tile {0}")]
    CorruptTile(String),
    #[error("not a pyramid directory or raster file: {0}")]
    UnknownFormat(String),
    #[error("target mpp {target} finer than native {native}; upsampling unsupported")]
    UpsamplingRequired { native: f64, target: f64 },
    #[error("invalid synthetic slide spec: {0}")]
    SpecInvalid(String),
    #[error("slide has no pixels")]
    EmptySlide,
    #[error("invalid manifest: {0}")]
    BadManifest(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Simple interleaved 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn white(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![255; width * height * 3] }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// One dataset row: a slide path, its label, and optional survival data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideManifestEntry {
    pub slide_id: String,
    pub path: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub survival_time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_observed: Option<bool>,
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<SlideManifestEntry>, SlideError> {
    let text = std::fs::read_to_string(path)?;
    let entries: Vec<SlideManifestEntry> = serde_json::from_str(&text)?;
    validate_manifest(&entries)?;
    Ok(entries)
}

pub fn save_manifest(
    path: impl AsRef<Path>,
    entries: &[SlideManifestEntry],
) -> Result<(), SlideError> {
    validate_manifest(entries)?;
    std::fs::write(path, serde_json::to_string_pretty(entries)?)?;
    Ok(())
}

pub fn validate_manifest(entries: &[SlideManifestEntry]) -> Result<(), SlideError> {
    let mut seen = HashSet::new();
    for e in entries {
        if !seen.insert(&e.slide_id) {
            return Err(SlideError::BadManifest(format!("duplicate slide_id {}", e.slide_id)));
        }
        if e.survival_time.is_some() != e.event_observed.is_some() {
            return Err(SlideError::BadManifest(format!(
                "{}: survival_time and event_observed must be present together",
                e.slide_id
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_rejects_duplicates_and_partial_survival() {
        let e = |id: &str| SlideManifestEntry {
            slide_id: id.into(),
            path: format!("{id}.pyr"),
            label: "a".into(),
            survival_time: None,
            event_observed: None,
        };
        assert!(validate_manifest(&[e("s1"), e("s2")]).is_ok());
        assert!(validate_manifest(&[e("s1"), e("s1")]).is_err());
        let mut partial = e("s3");
        partial.survival_time = Some(120.0);
        assert!(validate_manifest(&[partial]).is_err());
    }
}
