//! The 2D detector boundary.
//!
//! Everything learned in the pipeline sits behind [`Detector`]: an oracle
//! that reads synthetic instance masks, or an external process speaking the
//! line protocol in [`protocol`].

use std::collections::BTreeMap;

use image::RgbImage;
use thiserror::Error;

use crate::geometry::Detection2D;

pub mod external;
pub mod oracle;
pub mod protocol;

pub use external::{ExternalConfig, ExternalDetector};
pub use oracle::{oracle_detect, tight_rects, DetectorNoise, OracleDetector};

/// Instance id → class label. Id 0 is background and never listed.
pub type ClassTable = BTreeMap<u32, String>;

/// Per-pixel instance ids (0 = background), row-major, aligned with a raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstancePixelMap {
    pub width: u32,
    pub height: u32,
    pub ids: Vec<u32>,
}

impl InstancePixelMap {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            ids: vec![0; width as usize * height as usize],
        }
    }

    pub fn get(&self, u: u32, v: u32) -> u32 {
        self.ids[v as usize * self.width as usize + u as usize]
    }

    pub fn set(&mut self, u: u32, v: u32, id: u32) {
        self.ids[v as usize * self.width as usize + u as usize] = id;
    }
}

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("detector unavailable: {0}")]
    Unavailable(String),
    #[error("protocol error: {0}")]
    Protocol(#[from] protocol::ProtocolError),
    #[error("oracle detector needs an instance map for this raster")]
    MissingGroundTruth,
    #[error("cannot detect on an empty raster")]
    EmptyRaster,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One raster handed to a detector, plus optional synthetic ground truth.
#[derive(Debug, Clone, Copy)]
pub struct DetectorInput<'a> {
    pub image: &'a RgbImage,
    pub instances: Option<&'a InstancePixelMap>,
}

pub trait Detector: Send + Sync {
    /// Detections on `input`; with `class_filter` set, only that class.
    fn detect(&self, input: &DetectorInput<'_>, class_filter: Option<&str>) -> Result<Vec<Detection2D>, DetectError>;
}

impl<D: Detector + ?Sized> Detector for std::sync::Arc<D> {
    fn detect(&self, input: &DetectorInput<'_>, class_filter: Option<&str>) -> Result<Vec<Detection2D>, DetectError> {
        (**self).detect(input, class_filter)
    }
}

impl<D: Detector + ?Sized> Detector for Box<D> {
    fn detect(&self, input: &DetectorInput<'_>, class_filter: Option<&str>) -> Result<Vec<Detection2D>, DetectError> {
        (**self).detect(input, class_filter)
    }
}
