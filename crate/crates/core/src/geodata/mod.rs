//! Georeferenced data model: rasters, masks, label mosaics and prompts.
//!
//! Pixel coordinates are always `(column, row)` with the origin at the top-left
//! corner of the top-left pixel and rows increasing downward. Integer corner
//! coordinates address pixel edges; the centre of pixel `(c, r)` is
//! `(c + 0.5, r + 0.5)`.

mod mosaic;
mod raster_io;
mod vector;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use mosaic::mosaic;
pub use raster_io::{load_label_raster, load_mask, load_raster, save_mask, save_raster, save_rgb};
pub use vector::{
    connected_components, features_to_geojson, prompts_from_vector, prompts_from_vector_for_class, rasterize, vectorize,
    VectorFeature, VectorMode,
};

#[derive(Debug, Error)]
pub enum GeoError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("decode error: {0}")]
    Decode(String),
    #[error("encode error: {0}")]
    Encode(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("no prompts: {0}")]
    EmptyPrompts(String),
}

pub type Result<T, E = GeoError> = std::result::Result<T, E>;

/// Affine map from pixel `(col, row)` to map coordinates.
///
/// `x = origin_x + col * pixel_w + row * row_rot`,
/// `y = origin_y + col * col_rot + row * pixel_h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_w: f64,
    pub pixel_h: f64,
    pub row_rot: f64,
    pub col_rot: f64,
}

impl GeoTransform {
    pub fn new(
        origin_x: f64,
        origin_y: f64,
        pixel_w: f64,
        pixel_h: f64,
        row_rot: f64,
        col_rot: f64,
    ) -> Result<Self> {
        let t = Self {
            origin_x,
            origin_y,
            pixel_w,
            pixel_h,
            row_rot,
            col_rot,
        };
        t.validate()?;
        Ok(t)
    }

    /// North-up transform with square pixels of `pixel_size` map units.
    pub fn north_up(origin_x: f64, origin_y: f64, pixel_size: f64) -> Result<Self> {
        Self::new(origin_x, origin_y, pixel_size, -pixel_size, 0.0, 0.0)
    }

    pub fn identity() -> Self {
        Self {
            origin_x: 0.0,
            origin_y: 0.0,
            pixel_w: 1.0,
            pixel_h: 1.0,
            row_rot: 0.0,
            col_rot: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.origin_x,
            self.origin_y,
            self.pixel_w,
            self.pixel_h,
            self.row_rot,
            self.col_rot,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(GeoError::Invalid("geotransform has non-finite terms".into()));
        }
        if self.pixel_w == 0.0 || self.pixel_h == 0.0 {
            return Err(GeoError::Invalid("pixel_w and pixel_h must be non-zero".into()));
        }
        if self.determinant() == 0.0 {
            return Err(GeoError::Invalid("geotransform is singular".into()));
        }
        Ok(())
    }

    pub fn determinant(&self) -> f64 {
        self.pixel_w * self.pixel_h - self.row_rot * self.col_rot
    }

    /// Map-unit area covered by one pixel.
    pub fn pixel_area(&self) -> f64 {
        self.determinant().abs()
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn pixel_to_map(&self, col: f64, row: f64) -> (f64, f64) {
        (
            self.origin_x + col * self.pixel_w + row * self.row_rot,
            self.origin_y + col * self.col_rot + row * self.pixel_h,
        )
    }

    pub fn map_to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        let dx = x - self.origin_x;
        let dy = y - self.origin_y;
        let det = self.determinant();
        (
            (dx * self.pixel_h - dy * self.row_rot) / det,
            (dy * self.pixel_w - dx * self.col_rot) / det,
        )
    }
}

impl Default for GeoTransform {
    fn default() -> Self {
        Self::identity()
    }
}

/// Pixel grid shape plus georeferencing, shared by every raster-like type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub transform: GeoTransform,
    pub crs: String,
}

impl Grid {
    pub fn new(width: usize, height: usize, transform: GeoTransform, crs: impl Into<String>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(GeoError::Invalid(format!(
                "raster must be at least 1x1, got {width}x{height}"
            )));
        }
        transform.validate()?;
        Ok(Self {
            width,
            height,
            transform,
            crs: crs.into(),
        })
    }

    /// Identity-referenced grid, as used for plain images.
    pub fn plain(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, GeoTransform::identity(), "")
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_shape(&self, width: usize, height: usize) -> bool {
        self.width == width && self.height == height
    }
}

/// Multi-band 8-bit raster. Bands are stored row-major, one `Vec` per band.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoRaster {
    grid: Grid,
    bands: Vec<Vec<u8>>,
}

impl GeoRaster {
    pub fn new(grid: Grid, bands: Vec<Vec<u8>>) -> Result<Self> {
        if bands.is_empty() {
            return Err(GeoError::Invalid("raster needs at least one band".into()));
        }
        if bands.len() > 4 {
            return Err(GeoError::UnsupportedFormat(format!(
                "{} bands (at most 4 supported)",
                bands.len()
            )));
        }
        if let Some(b) = bands.iter().position(|b| b.len() != grid.len()) {
            return Err(GeoError::Shape(format!(
                "band {b} has {} samples, expected {}",
                bands[b].len(),
                grid.len()
            )));
        }
        Ok(Self { grid, bands })
    }

    pub fn filled(grid: Grid, band_count: usize, value: u8) -> Result<Self> {
        let bands = vec![vec![value; grid.len()]; band_count];
        Self::new(grid, bands)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn width(&self) -> usize {
        self.grid.width
    }

    pub fn height(&self) -> usize {
        self.grid.height
    }

    pub fn band_count(&self) -> usize {
        self.bands.len()
    }

    pub fn band(&self, index: usize) -> &[u8] {
        &self.bands[index]
    }

    pub fn bands(&self) -> &[Vec<u8>] {
        &self.bands
    }

    pub fn transform(&self) -> &GeoTransform {
        &self.grid.transform
    }

    pub fn crs(&self) -> &str {
        &self.grid.crs
    }

    pub fn pixel(&self, col: usize, row: usize) -> Vec<u8> {
        let i = row * self.grid.width + col;
        self.bands.iter().map(|b| b[i]).collect()
    }

    /// Per-band arithmetic mean, rounded to the nearest sample value.
    pub fn band_means(&self) -> Vec<u8> {
        self.bands
            .iter()
            .map(|b| {
                let sum: u64 = b.iter().map(|&v| v as u64).sum();
                ((sum as f64 / b.len() as f64).round()).clamp(0.0, 255.0) as u8
            })
            .collect()
    }

    /// Overwrite every pixel selected by `mask` with `fill` (one value per band).
    pub fn fill_masked(&mut self, mask: &BinaryMask, fill: &[u8]) -> Result<()> {
        if !self.grid.same_shape(mask.width(), mask.height()) {
            return Err(GeoError::Shape(format!(
                "mask {}x{} vs raster {}x{}",
                mask.width(),
                mask.height(),
                self.width(),
                self.height()
            )));
        }
        if fill.len() != self.bands.len() {
            return Err(GeoError::Shape(format!(
                "fill has {} values for {} bands",
                fill.len(),
                self.bands.len()
            )));
        }
        for (i, _) in mask.data().iter().enumerate().filter(|(_, &m)| m) {
            for (band, &v) in self.bands.iter_mut().zip(fill) {
                band[i] = v;
            }
        }
        Ok(())
    }
}

/// Binary pixel mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(GeoError::Shape(format!(
                "mask data has {} cells, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(c, r));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, col: usize, row: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, col: usize, row: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    fn check_shape(&self, other: &BinaryMask) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(GeoError::Shape(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect();
        Ok(BinaryMask { data, ..*self })
    }

    pub fn intersection(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect();
        Ok(BinaryMask { data, ..*self })
    }

    /// Pixels set in `self` but not in `other`.
    pub fn difference(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| *a && !*b).collect();
        Ok(BinaryMask { data, ..*self })
    }

    pub fn complement(&self) -> BinaryMask {
        BinaryMask {
            data: self.data.iter().map(|v| !v).collect(),
            ..*self
        }
    }

    /// 3x3 square dilation; the grid edge is not extended.
    pub fn dilate(&self) -> BinaryMask {
        self.morph(true)
    }

    /// 3x3 square erosion; pixels outside the grid count as background.
    pub fn erode(&self) -> BinaryMask {
        self.morph(false)
    }

    fn morph(&self, dilate: bool) -> BinaryMask {
        let (w, h) = (self.width as isize, self.height as isize);
        BinaryMask::from_fn(self.width, self.height, |c, r| {
            let mut acc = !dilate;
            for dr in -1..=1isize {
                for dc in -1..=1isize {
                    let (cc, rr) = (c as isize + dc, r as isize + dr);
                    let v = cc >= 0 && rr >= 0 && cc < w && rr < h && self.get(cc as usize, rr as usize);
                    if dilate {
                        acc |= v;
                    } else {
                        acc &= v;
                    }
                }
            }
            acc
        })
    }

    /// Half-open pixel bounding box of the positive pixels.
    pub fn bounding_box(&self) -> Option<PixelBox> {
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(c, r) {
                    bounds = Some(match bounds {
                        None => (c, r, c, r),
                        Some((x0, y0, x1, y1)) => (x0.min(c), y0.min(r), x1.max(c), y1.max(r)),
                    });
                }
            }
        }
        bounds.map(|(x0, y0, x1, y1)| PixelBox {
            x1: x0 as f64,
            y1: y0 as f64,
            x2: (x1 + 1) as f64,
            y2: (y1 + 1) as f64,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    General,
    Box,
    Point,
    Text,
    Oneshot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub kind: PromptKind,
    pub iteration: u32,
}

/// A single segmented object. Construction guarantees at least one positive pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMask {
    mask: BinaryMask,
    pub instance_id: u32,
    pub score: f64,
    pub provenance: Provenance,
}

impl InstanceMask {
    pub fn new(mask: BinaryMask, instance_id: u32, score: f64, provenance: Provenance) -> Result<Self> {
        if instance_id == 0 {
            return Err(GeoError::Invalid("instance ids start at 1".into()));
        }
        if mask.is_empty() {
            return Err(GeoError::Invalid(format!("instance {instance_id} has no positive pixels")));
        }
        if !score.is_finite() {
            return Err(GeoError::Invalid(format!("instance {instance_id} has non-finite score")));
        }
        Ok(Self {
            mask,
            instance_id,
            score,
            provenance,
        })
    }

    pub fn mask(&self) -> &BinaryMask {
        &self.mask
    }
}

/// Integer label grid: 0 is background, anything else an instance or class id.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRaster {
    grid: Grid,
    data: Vec<u32>,
}

impl LabelRaster {
    pub fn new(grid: Grid, data: Vec<u32>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(GeoError::Shape(format!(
                "label data has {} cells, expected {}",
                data.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        let data = vec![0; grid.len()];
        Self { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn width(&self) -> usize {
        self.grid.width
    }

    pub fn height(&self) -> usize {
        self.grid.height
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn get(&self, col: usize, row: usize) -> u32 {
        self.data[row * self.grid.width + col]
    }

    pub fn max_label(&self) -> u32 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Distinct non-zero labels in ascending order.
    pub fn labels(&self) -> Vec<u32> {
        let mut seen: Vec<u32> = self.data.iter().copied().filter(|&v| v != 0).collect();
        seen.sort_unstable();
        seen.dedup();
        seen
    }

    pub fn mask_of(&self, label: u32) -> BinaryMask {
        BinaryMask {
            width: self.grid.width,
            height: self.grid.height,
            data: self.data.iter().map(|&v| v == label).collect(),
        }
    }

    pub fn nonzero(&self) -> BinaryMask {
        BinaryMask {
            width: self.grid.width,
            height: self.grid.height,
            data: self.data.iter().map(|&v| v != 0).collect(),
        }
    }
}

/// Axis-aligned box in pixel corner coordinates, `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl PixelBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) || x1 >= x2 || y1 >= y2 {
            return Err(GeoError::Invalid(format!("degenerate box ({x1},{y1},{x2},{y2})")));
        }
        Ok(b)
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width as f64 && self.y2 <= height as f64
    }

    /// Whether the centre of pixel `(col, row)` lies inside the box.
    pub fn contains_pixel(&self, col: usize, row: usize) -> bool {
        let (x, y) = (col as f64 + 0.5, row as f64 + 0.5);
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }

    pub fn to_mask(&self, width: usize, height: usize) -> BinaryMask {
        BinaryMask::from_fn(width, height, |c, r| self.contains_pixel(c, r))
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub x: f64,
    pub y: f64,
    /// Points sharing a group id form one multi-point prompt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<u32>,
}

impl PixelPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y, group: None }
    }

    pub fn grouped(x: f64, y: f64, group: u32) -> Self {
        Self { x, y, group: Some(group) }
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.x < width as f64 && self.y < height as f64
    }

    /// The pixel containing this point.
    pub fn pixel(&self) -> (usize, usize) {
        (self.x.floor().max(0.0) as usize, self.y.floor().max(0.0) as usize)
    }
}

/// Prompts for one class on one raster.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    #[serde(default)]
    pub boxes: Vec<PixelBox>,
    #[serde(default)]
    pub points: Vec<PixelPoint>,
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub class_name: String,
}

impl PromptSet {
    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
            && self.points.is_empty()
            && self.text.as_deref().map_or(true, |t| t.trim().is_empty())
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.is_empty() {
            return Err(GeoError::EmptyPrompts(format!(
                "prompt set for '{}' has no boxes, points or text",
                self.class_name
            )));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            PixelBox::new(b.x1, b.y1, b.x2, b.y2)?;
            if !b.within(width, height) {
                return Err(GeoError::Invalid(format!("box {i} lies outside the {width}x{height} raster")));
            }
        }
        for (i, p) in self.points.iter().enumerate() {
            if !p.within(width, height) {
                return Err(GeoError::Invalid(format!(
                    "point {i} ({}, {}) lies outside the {width}x{height} raster",
                    p.x, p.y
                )));
            }
        }
        Ok(())
    }
}
