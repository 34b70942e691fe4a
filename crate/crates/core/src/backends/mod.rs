//! Inference interfaces for grounded detection and promptable segmentation.
//!
//! Every engine in [`crate::promptseg`] and [`crate::oneshot`] talks to a model
//! only through [`Backend`]. Two implementations ship here: [`MockBackend`],
//! a deterministic backend rendered from a declarative [`SceneSpec`], and
//! [`HttpBackend`], which forwards calls to an external inference server that
//! hosts the real checkpoints.

mod mock;
mod remote;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodata::{BinaryMask, GeoRaster, PixelBox, PixelPoint};

pub use mock::{MockBackend, SceneObject, SceneShape, SceneSpec, MOCK_LOGIT};
pub use remote::{HttpBackend, RealBackendConfig};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("invalid backend input: {0}")]
    InvalidInput(String),
    #[error("backend protocol error: {0}")]
    Protocol(String),
    #[error("backend configuration error: {0}")]
    Config(String),
}

pub type Result<T, E = BackendError> = std::result::Result<T, E>;

/// One grounded detection. `logit` and `phrase_score` are normalised to [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionCandidate {
    pub bbox: PixelBox,
    pub logit: f64,
    pub phrase_score: f64,
    pub phrase: String,
}

impl DetectionCandidate {
    pub fn validate(&self) -> Result<()> {
        PixelBox::new(self.bbox.x1, self.bbox.y1, self.bbox.x2, self.bbox.y2)
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.logit) || !(0.0..=1.0).contains(&self.phrase_score) {
            return Err(BackendError::Protocol(format!(
                "scores out of [0,1]: logit {} phrase {}",
                self.logit, self.phrase_score
            )));
        }
        Ok(())
    }
}

/// The three mask-logit grids a promptable segmenter returns for one prompt,
/// ordered fine-to-coarse as the backend defines them, plus per-scale confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleMasks {
    width: usize,
    height: usize,
    scales: [Vec<f64>; 3],
    confidences: [f64; 3],
}

impl MultiScaleMasks {
    pub fn new(width: usize, height: usize, scales: [Vec<f64>; 3], confidences: [f64; 3]) -> Result<Self> {
        if scales.iter().any(|s| s.len() != width * height) {
            return Err(BackendError::Protocol(format!(
                "mask scale sizes {:?} do not match {width}x{height}",
                scales.iter().map(Vec::len).collect::<Vec<_>>()
            )));
        }
        if scales.iter().flatten().any(|v| !v.is_finite()) || confidences.iter().any(|c| !c.is_finite()) {
            return Err(BackendError::Protocol("non-finite mask logits".into()));
        }
        Ok(Self {
            width,
            height,
            scales,
            confidences,
        })
    }

    /// Hard ±`magnitude` logits from binary masks.
    pub fn from_binary(masks: [&BinaryMask; 3], confidences: [f64; 3], magnitude: f64) -> Result<Self> {
        let (w, h) = (masks[0].width(), masks[0].height());
        if masks.iter().any(|m| m.width() != w || m.height() != h) {
            return Err(BackendError::Protocol("mask scales differ in size".into()));
        }
        let to_logits = |m: &BinaryMask| -> Vec<f64> {
            m.data().iter().map(|&v| if v { magnitude } else { -magnitude }).collect()
        };
        Self::new(w, h, masks.map(to_logits), confidences)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn scale(&self, k: usize) -> &[f64] {
        &self.scales[k]
    }

    pub fn scales(&self) -> &[Vec<f64>; 3] {
        &self.scales
    }

    pub fn confidences(&self) -> [f64; 3] {
        self.confidences
    }

    /// Binary prediction of one scale (logit >= 0).
    pub fn binary(&self, k: usize) -> BinaryMask {
        BinaryMask::new(
            self.width,
            self.height,
            self.scales[k].iter().map(|&v| v >= 0.0).collect(),
        )
        .expect("sizes checked at construction")
    }

    /// Copy with scales reordered so that `out[k] = self[perm[k]]`.
    pub fn permuted(&self, perm: [usize; 3]) -> Self {
        Self {
            width: self.width,
            height: self.height,
            scales: perm.map(|k| self.scales[k].clone()),
            confidences: perm.map(|k| self.confidences[k]),
        }
    }
}

/// Dense per-cell embeddings over the raster at a fixed stride.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    cols: usize,
    rows: usize,
    stride: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(cols: usize, rows: usize, stride: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if stride == 0 || dim == 0 || cols == 0 || rows == 0 {
            return Err(BackendError::Protocol("feature map has a zero dimension".into()));
        }
        if data.len() != cols * rows * dim {
            return Err(BackendError::Protocol(format!(
                "feature data has {} values, expected {}",
                data.len(),
                cols * rows * dim
            )));
        }
        for (i, v) in data.chunks_exact(dim).enumerate() {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(BackendError::Protocol(format!("feature cell {i} has norm {norm}")));
            }
        }
        Ok(Self {
            cols,
            rows,
            stride,
            dim,
            data,
        })
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, col: usize, row: usize) -> &[f64] {
        let i = (row * self.cols + col) * self.dim;
        &self.data[i..i + self.dim]
    }

    /// Pixel-space centre of a feature cell.
    pub fn cell_center(&self, col: usize, row: usize) -> PixelPoint {
        let s = self.stride as f64;
        PixelPoint::new(col as f64 * s + s / 2.0, row as f64 * s + s / 2.0)
    }

    /// Pixel (integer) under a cell centre, clamped to the raster.
    pub fn cell_pixel(&self, col: usize, row: usize, width: usize, height: usize) -> (usize, usize) {
        let (x, y) = (col * self.stride + self.stride / 2, row * self.stride + self.stride / 2);
        (x.min(width - 1), y.min(height - 1))
    }
}

/// A point prompt: foreground points plus optional background hints.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointPrompt {
    pub foreground: Vec<PixelPoint>,
    #[serde(default)]
    pub background: Vec<PixelPoint>,
}

/// Mask plus score from whole-image segmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredMask {
    pub mask: BinaryMask,
    pub score: f64,
}

/// Model interface used by every pipeline. One instance is used by one thread
/// at a time; distinct instances may run in parallel.
pub trait Backend: Send {
    fn name(&self) -> &str;

    /// Grounded detection of `phrase`. Order of results is unspecified.
    fn detect(&self, image: &GeoRaster, phrase: &str) -> Result<Vec<DetectionCandidate>>;

    fn segment_box(&self, image: &GeoRaster, bbox: &PixelBox) -> Result<MultiScaleMasks>;

    /// Background points are advisory; see [`Backend::supports_background_points`].
    fn segment_points(&self, image: &GeoRaster, prompt: &PointPrompt) -> Result<MultiScaleMasks>;

    fn segment_everything(&self, image: &GeoRaster) -> Result<Vec<ScoredMask>>;

    fn embed(&self, image: &GeoRaster) -> Result<FeatureMap>;

    fn supports_background_points(&self) -> bool {
        false
    }
}

/// Parse a backend spec string: `mock:<scene.json>` or `real:<config.json>`.
/// Relative paths resolve against `base_dir`.
pub fn backend_from_spec(spec: &str, base_dir: &Path) -> Result<Box<dyn Backend>> {
    let (kind, path) = spec
        .split_once(':')
        .ok_or_else(|| BackendError::Config(format!("backend spec '{spec}' must be mock:<path> or real:<path>")))?;
    let path = base_dir.join(path);
    match kind {
        "mock" => {
            let scene = SceneSpec::from_file(&path)?;
            Ok(Box::new(MockBackend::new(scene)?))
        }
        "real" => {
            let cfg = RealBackendConfig::from_file(&path)?;
            Ok(Box::new(HttpBackend::connect(cfg)?))
        }
        other => Err(BackendError::Config(format!(
            "unknown backend kind '{other}' (expected mock or real)"
        ))),
    }
}
