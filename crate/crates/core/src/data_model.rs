//! Domain types shared by every stage: volumes, landmark annotations,
//! instance masks and backbone predictions.

use std::collections::BTreeSet;

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{is_simple_polygon, signed_area};

/// Binary 2D mask indexed `[row, col]`.
pub type Mask2 = Array2<bool>;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing file {0}")]
    MissingFile(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed json in {path}: {message}")]
    MalformedJson { path: String, message: String },
    #[error("raw payload has {actual} bytes, header requires {expected}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),
    #[error("invalid spacing {0:?}: components must be finite and > 0")]
    InvalidSpacing([f64; 3]),
    #[error("invalid dimensions {0:?}: every dimension must be >= 1")]
    InvalidDims([usize; 3]),
    #[error("vertebra {id}: corner ({x}, {y}) outside slice of {width}x{height}")]
    OutOfBounds {
        id: String,
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("vertebra {0}: corners form a self-intersecting quadrilateral")]
    SelfIntersecting(String),
    #[error("vertebra {0}: quadrilateral has zero area")]
    ZeroArea(String),
    #[error("annotation has no vertebrae")]
    NoVertebrae,
    #[error("duplicate vertebra id {0}")]
    DuplicateVertebra(String),
    #[error("slice index {index} outside volume with {slices} slices")]
    SliceOutOfRange { index: usize, slices: usize },
    #[error("volume id mismatch: annotation {annotation}, volume {volume}")]
    VolumeMismatch { annotation: String, volume: String },
    #[error("invalid label data: {0}")]
    InvalidLabels(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Voxel spacing in millimeters, `(slice, row, col)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub slice: f64,
    pub row: f64,
    pub col: f64,
}

impl Spacing {
    pub fn new(slice: f64, row: f64, col: f64) -> Result<Self, DataError> {
        let s = Self { slice, row, col };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let arr = self.to_array();
        if arr.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(DataError::InvalidSpacing(arr))
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.slice, self.row, self.col]
    }

    pub fn scaled(self, c: f64) -> Self {
        Self {
            slice: self.slice * c,
            row: self.row * c,
            col: self.col * c,
        }
    }
}

/// A CT volume indexed `[slice, row, col]`; slices are sagittal.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    id: String,
    voxels: Array3<i16>,
    spacing: Spacing,
}

impl Volume {
    pub fn new(
        id: impl Into<String>,
        voxels: Array3<i16>,
        spacing: Spacing,
    ) -> Result<Self, DataError> {
        let (s, h, w) = voxels.dim();
        if s == 0 || h == 0 || w == 0 {
            return Err(DataError::InvalidDims([s, h, w]));
        }
        spacing.validate()?;
        Ok(Self {
            id: id.into(),
            voxels,
            spacing,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn voxels(&self) -> &Array3<i16> {
        &self.voxels
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.voxels.dim()
    }

    pub fn num_slices(&self) -> usize {
        self.voxels.dim().0
    }

    pub fn slice_shape(&self) -> (usize, usize) {
        let (_, h, w) = self.voxels.dim();
        (h, w)
    }

    pub fn mid_slice(&self) -> usize {
        self.num_slices() / 2
    }

    pub fn slice(&self, s: usize) -> ArrayView2<'_, i16> {
        self.voxels.index_axis(ndarray::Axis(0), s)
    }

    /// Slice `s` as floating point intensities.
    pub fn slice_f64(&self, s: usize) -> Array2<f64> {
        self.slice(s).mapv(f64::from)
    }
}

/// Four corner landmarks of one vertebral body, stored anterior-superior,
/// posterior-superior, posterior-inferior, anterior-inferior (clockwise on
/// screen, anterior on the left).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VertebraLandmarks {
    pub id: String,
    pub corners: [Point; 4],
}

impl VertebraLandmarks {
    /// Validates the quadrilateral in the given order and canonicalizes it.
    pub fn new(id: impl Into<String>, corners: [Point; 4]) -> Result<Self, DataError> {
        let id = id.into();
        if !is_simple_polygon(&corners) {
            return Err(DataError::SelfIntersecting(id));
        }
        if signed_area(&corners).abs() <= 0.0 {
            return Err(DataError::ZeroArea(id));
        }
        Ok(Self {
            id,
            corners: canonical_corner_order(corners),
        })
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.corners).abs()
    }

    pub fn centroid(&self) -> Point {
        let sx: f64 = self.corners.iter().map(|p| p.x).sum();
        let sy: f64 = self.corners.iter().map(|p| p.y).sum();
        Point::new(sx / 4.0, sy / 4.0)
    }
}

/// Angular sort around the centroid (clockwise on screen), starting from the
/// top-left-most corner.
pub fn canonical_corner_order(corners: [Point; 4]) -> [Point; 4] {
    let cx = corners.iter().map(|p| p.x).sum::<f64>() / 4.0;
    let cy = corners.iter().map(|p| p.y).sum::<f64>() / 4.0;
    let mut sorted = corners;
    sorted.sort_by(|a, b| {
        let ta = (a.y - cy).atan2(a.x - cx);
        let tb = (b.y - cy).atan2(b.x - cx);
        ta.total_cmp(&tb)
    });
    let start = (0..4)
        .min_by(|&i, &j| {
            let a = sorted[i].x + sorted[i].y;
            let b = sorted[j].x + sorted[j].y;
            a.total_cmp(&b).then(i.cmp(&j))
        })
        .unwrap_or(0);
    [0, 1, 2, 3].map(|k| sorted[(start + k) % 4])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkAnnotation {
    pub volume_id: String,
    pub slice_index: usize,
    pub vertebrae: Vec<VertebraLandmarks>,
}

impl LandmarkAnnotation {
    pub fn new(
        volume_id: impl Into<String>,
        slice_index: usize,
        vertebrae: Vec<VertebraLandmarks>,
    ) -> Result<Self, DataError> {
        let a = Self {
            volume_id: volume_id.into(),
            slice_index,
            vertebrae,
        };
        a.validate_intrinsic()?;
        Ok(a)
    }

    /// Checks that do not need the volume: non-empty, unique ids, simple quads.
    pub fn validate_intrinsic(&self) -> Result<(), DataError> {
        if self.vertebrae.is_empty() {
            return Err(DataError::NoVertebrae);
        }
        let mut seen = BTreeSet::new();
        for v in &self.vertebrae {
            if !seen.insert(v.id.as_str()) {
                return Err(DataError::DuplicateVertebra(v.id.clone()));
            }
            if !is_simple_polygon(&v.corners) {
                return Err(DataError::SelfIntersecting(v.id.clone()));
            }
            if v.area() <= 0.0 {
                return Err(DataError::ZeroArea(v.id.clone()));
            }
        }
        Ok(())
    }

    /// Full validation against the annotated volume.
    pub fn validate_against(&self, volume: &Volume) -> Result<(), DataError> {
        self.validate_intrinsic()?;
        if self.volume_id != volume.id() {
            return Err(DataError::VolumeMismatch {
                annotation: self.volume_id.clone(),
                volume: volume.id().to_string(),
            });
        }
        if self.slice_index >= volume.num_slices() {
            return Err(DataError::SliceOutOfRange {
                index: self.slice_index,
                slices: volume.num_slices(),
            });
        }
        let (h, w) = volume.slice_shape();
        self.check_bounds(h, w)
    }

    pub fn check_bounds(&self, height: usize, width: usize) -> Result<(), DataError> {
        for v in &self.vertebrae {
            for p in &v.corners {
                let inside = p.x.is_finite()
                    && p.y.is_finite()
                    && p.x >= 0.0
                    && p.y >= 0.0
                    && p.x <= (width - 1) as f64
                    && p.y <= (height - 1) as f64;
                if !inside {
                    return Err(DataError::OutOfBounds {
                        id: v.id.clone(),
                        x: p.x,
                        y: p.y,
                        width,
                        height,
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Coarse,
    Model,
    Selected,
    CrfRefined,
    GroundTruth,
}

impl Provenance {
    /// Position along the coarse → model → selected → crf_refined chain.
    /// Ground truth sits outside the chain.
    pub fn stage(self) -> Option<u8> {
        match self {
            Provenance::Coarse => Some(0),
            Provenance::Model => Some(1),
            Provenance::Selected => Some(2),
            Provenance::CrfRefined => Some(3),
            Provenance::GroundTruth => None,
        }
    }

    pub fn can_become(self, next: Provenance) -> bool {
        match (self.stage(), next.stage()) {
            (Some(a), Some(b)) => b >= a,
            _ => self == next,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Coarse => "coarse",
            Provenance::Model => "model",
            Provenance::Selected => "selected",
            Provenance::CrfRefined => "crf_refined",
            Provenance::GroundTruth => "ground_truth",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMask {
    pub vertebra_id: String,
    pub mask: Mask2,
    pub provenance: Provenance,
    pub iteration: u32,
}

impl InstanceMask {
    pub fn new(
        vertebra_id: impl Into<String>,
        mask: Mask2,
        provenance: Provenance,
        iteration: u32,
    ) -> Result<Self, DataError> {
        let m = Self {
            vertebra_id: vertebra_id.into(),
            mask,
            provenance,
            iteration,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.provenance != Provenance::Model && self.area() == 0 {
            return Err(DataError::InvalidLabels(format!(
                "instance {} ({}) has no foreground",
                self.vertebra_id,
                self.provenance.as_str()
            )));
        }
        Ok(())
    }

    /// Moves the mask forward along the provenance chain.
    pub fn advance(
        &self,
        mask: Mask2,
        provenance: Provenance,
        iteration: u32,
    ) -> Result<Self, DataError> {
        if !self.provenance.can_become(provenance) {
            return Err(DataError::InvalidLabels(format!(
                "provenance cannot go from {} to {}",
                self.provenance.as_str(),
                provenance.as_str()
            )));
        }
        Self::new(self.vertebra_id.clone(), mask, provenance, iteration)
    }

    pub fn area(&self) -> usize {
        mask_area(&self.mask)
    }

    pub fn centroid(&self) -> Option<Point> {
        mask_centroid(&self.mask)
    }

    pub fn bbox(&self) -> Option<BBox> {
        mask_bbox(&self.mask)
    }
}

pub fn mask_area(mask: &Mask2) -> usize {
    mask.iter().filter(|&&v| v).count()
}

pub fn mask_centroid(mask: &Mask2) -> Option<Point> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for ((y, x), &v) in mask.indexed_iter() {
        if v {
            sx += x as f64;
            sy += y as f64;
            n += 1;
        }
    }
    (n > 0).then(|| Point::new(sx / n as f64, sy / n as f64))
}

/// Tight box around the foreground, end-exclusive.
pub fn mask_bbox(mask: &Mask2) -> Option<BBox> {
    let mut b: Option<BBox> = None;
    for ((y, x), &v) in mask.indexed_iter() {
        if v {
            b = Some(match b {
                None => BBox::new_unchecked(x, y, x + 1, y + 1),
                Some(b) => BBox::new_unchecked(
                    b.x0.min(x),
                    b.y0.min(y),
                    b.x1.max(x + 1),
                    b.y1.max(y + 1),
                ),
            });
        }
    }
    b
}

/// Pixel box `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self, DataError> {
        if x0 >= x1 || y0 >= y1 {
            return Err(DataError::InvalidLabels(format!(
                "empty box ({x0},{y0})-({x1},{y1})"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    const fn new_unchecked(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn center(&self) -> Point {
        Point::new(
            (self.x0 + self.x1) as f64 / 2.0 - 0.5,
            (self.y0 + self.y1) as f64 / 2.0 - 0.5,
        )
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.x1 <= width && self.y1 <= height
    }

    /// Grows the box by `margin` on every side, clipped to the slice.
    pub fn dilate(&self, margin: usize, height: usize, width: usize) -> Self {
        Self {
            x0: self.x0.saturating_sub(margin),
            y0: self.y0.saturating_sub(margin),
            x1: (self.x1 + margin).min(width),
            y1: (self.y1 + margin).min(height),
        }
    }

    pub fn intersection(&self, other: &BBox) -> usize {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w * h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other) as f64;
        let union = (self.area() + other.area()) as f64 - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }
}

/// One region of interest produced by the backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct InstancePrediction {
    pub objectness: f64,
    pub bbox: BBox,
    /// Foreground probability over the box, `[row - y0, col - x0]`.
    pub prob_map: Array2<f64>,
}

impl InstancePrediction {
    pub fn validate(&self, height: usize, width: usize) -> Result<(), DataError> {
        let ok_prob = |p: f64| (0.0..=1.0).contains(&p);
        if !ok_prob(self.objectness) || !self.prob_map.iter().all(|&p| ok_prob(p)) {
            return Err(DataError::InvalidLabels(
                "probability outside [0, 1]".into(),
            ));
        }
        if self.bbox.x0 >= self.bbox.x1 || self.bbox.y0 >= self.bbox.y1 {
            return Err(DataError::InvalidLabels("empty box".into()));
        }
        if !self.bbox.fits(height, width) {
            return Err(DataError::InvalidLabels("box outside slice".into()));
        }
        if self.prob_map.dim() != (self.bbox.height(), self.bbox.width()) {
            return Err(DataError::InvalidLabels(
                "probability map does not match box".into(),
            ));
        }
        Ok(())
    }

    /// Probability map pasted into a full slice (zero outside the box).
    pub fn full_prob(&self, height: usize, width: usize) -> Array2<f64> {
        let mut out = Array2::zeros((height, width));
        for ((y, x), &p) in self.prob_map.indexed_iter() {
            out[[self.bbox.y0 + y, self.bbox.x0 + x]] = p;
        }
        out
    }
}
