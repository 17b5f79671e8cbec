//! Synthetic sagittal spine phantoms with exact ground truth.
//!
//! Each vertebral body is a rounded quadrilateral whose superior and inferior
//! endplates bow inward, placed along a polynomial centerline `x = f(y)` and
//! tilted with the local slope. Cross-sections narrow (and lose contrast)
//! toward the marginal sagittal slices according to an extrusion profile.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::{
    DataError, InstanceMask, LandmarkAnnotation, Point, Provenance, Spacing, VertebraLandmarks,
    Volume,
};
use crate::backbone::features::gaussian_blur;
use crate::geometry::is_simple_polygon;
use crate::labels::{LabelEntry, LabelStore};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("geometry overflow: {0}")]
    GeometryOverflow(String),
    #[error("landmark jitter failed for {id} after {tries} draws")]
    RetriesExhausted { id: String, tries: usize },
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Contrast {
    pub bone_mean: f64,
    pub background_mean: f64,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Collapse {
    pub vertebra_index: usize,
    pub height_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub seed: u64,
    /// `[slices, rows, cols]`.
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub n_vertebrae: usize,
    /// Centerline `x = c0 + c1·y + c2·y² + …` in pixels.
    pub spine_curve_coeffs: Vec<f64>,
    pub vb_height_px: f64,
    pub vb_width_px: f64,
    pub gap_px: f64,
    pub contrast: Contrast,
    pub collapse: Option<Collapse>,
    /// Per-slice width scale in `[0, 1]`; `None` gives an elliptical profile
    /// peaking at the middle slice.
    pub extrusion_profile: Option<Vec<f64>>,
    /// Endplate inward bow as a fraction of half-height.
    pub endplate_concavity: f64,
    pub corner_radius_px: f64,
    /// Relative per-vertebra size variation drawn from the seed.
    pub size_jitter: f64,
    /// In-plane Gaussian blur of the noiseless image (scanner point spread).
    pub partial_volume_sigma_px: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            dims: [9, 128, 128],
            spacing_mm: [2.0, 0.8, 0.8],
            n_vertebrae: 4,
            spine_curve_coeffs: vec![70.0, -0.25, 0.0018],
            vb_height_px: 20.0,
            vb_width_px: 34.0,
            gap_px: 7.0,
            contrast: Contrast {
                bone_mean: 300.0,
                background_mean: 60.0,
                noise_sigma: 10.0,
            },
            collapse: None,
            extrusion_profile: None,
            endplate_concavity: 0.25,
            corner_radius_px: 3.0,
            size_jitter: 0.08,
            partial_volume_sigma_px: 1.0,
        }
    }
}

const BORDER_PX: f64 = 2.0;

/// Resolved geometry of one vertebral body.
#[derive(Debug, Clone, PartialEq)]
pub struct VertebraShape {
    pub id: String,
    pub center: Point,
    /// Tilt of the local vertical axis (radians, positive leans right going down).
    pub tilt: f64,
    pub half_width: f64,
    pub half_height: f64,
}

impl VertebraShape {
    fn axes(&self) -> (Point, Point) {
        let (s, c) = self.tilt.sin_cos();
        // n: anterior→posterior axis, t: superior→inferior axis
        (Point::new(c, -s), Point::new(s, c))
    }

    pub fn corners(&self) -> [Point; 4] {
        let (n, t) = self.axes();
        let at = |p: f64, q: f64| {
            Point::new(
                self.center.x + p * n.x + q * t.x,
                self.center.y + p * n.y + q * t.y,
            )
        };
        let (a, b) = (self.half_width, self.half_height);
        [at(-a, -b), at(a, -b), at(a, b), at(-a, b)]
    }

    /// Cross-section membership with width scale `w` (`0 < w ≤ 1`).
    pub fn contains(&self, x: f64, y: f64, w: f64, concavity: f64, radius: f64) -> bool {
        if w <= 0.0 {
            return false;
        }
        let (n, t) = self.axes();
        let (dx, dy) = (x - self.center.x, y - self.center.y);
        let p = dx * n.x + dy * n.y;
        let q = dx * t.x + dy * t.y;
        let a = self.half_width * w;
        if p.abs() > a {
            return false;
        }
        let u = p / a;
        let bq = self.half_height * (1.0 - concavity * (1.0 - u * u));
        if q.abs() > bq {
            return false;
        }
        let r = radius.min(a * 0.5).min(self.half_height * 0.5);
        let ex = (p.abs() - (a - r)).max(0.0);
        let ey = (q.abs() - (bq - r)).max(0.0);
        ex * ex + ey * ey <= r * r
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub volume: Volume,
    pub annotation: LandmarkAnnotation,
    /// Ground-truth instances per slice (provenance `ground_truth`, iteration 0).
    pub truth: LabelStore,
    pub shapes: Vec<VertebraShape>,
    pub profile: Vec<f64>,
}

impl Phantom {
    /// Ground truth as an instance labelmap, ids 1..=n in column order.
    pub fn truth_labelmap(&self) -> Array3<i16> {
        labelmap_from_store(&self.truth, self.volume.id(), self.volume.dims())
    }
}

/// Stacks the latest masks of every slice into an instance labelmap; ids are
/// assigned by position of `vertebra_id` in the sorted id list.
pub fn labelmap_from_store(
    store: &LabelStore,
    volume_id: &str,
    dims: (usize, usize, usize),
) -> Array3<i16> {
    let mut ids: Vec<String> = Vec::new();
    for s in store.slices(volume_id) {
        if let Some((_, e)) = store.latest(volume_id, s) {
            ids.extend(e.masks.iter().map(|m| m.vertebra_id.clone()));
        }
    }
    ids.sort_by_key(|a| natural_key(a));
    ids.dedup();
    let mut out = Array3::zeros(dims);
    for s in store.slices(volume_id) {
        if s >= dims.0 {
            continue;
        }
        if let Some((_, e)) = store.latest(volume_id, s) {
            for m in &e.masks {
                let label = ids.iter().position(|i| *i == m.vertebra_id).unwrap() as i16 + 1;
                for ((y, x), &v) in m.mask.indexed_iter() {
                    if v {
                        out[[s, y, x]] = label;
                    }
                }
            }
        }
    }
    out
}

fn natural_key(id: &str) -> (String, u64, String) {
    let digits_at = id.find(|c: char| c.is_ascii_digit()).unwrap_or(id.len());
    let (prefix, rest) = id.split_at(digits_at);
    let end = rest.find(|c: char| !c.is_ascii_digit()).unwrap_or(rest.len());
    let num = rest[..end].parse().unwrap_or(0);
    (prefix.to_string(), num, rest[end..].to_string())
}

pub fn default_profile(slices: usize) -> Vec<f64> {
    let mid = (slices / 2) as f64;
    let radius = (mid - 0.5).max(1.5);
    (0..slices)
        .map(|s| {
            let d = (s as f64 - mid) / radius;
            (1.0 - d * d).max(0.0).sqrt()
        })
        .collect()
}

impl PhantomSpec {
    pub fn profile(&self) -> Vec<f64> {
        self.extrusion_profile
            .clone()
            .unwrap_or_else(|| default_profile(self.dims[0]))
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::InvalidSpec(m));
        if self.dims.contains(&0) {
            return bad(format!("dims {:?} must be >= 1", self.dims));
        }
        if !self.spacing_mm.iter().all(|v| v.is_finite() && *v > 0.0) {
            return bad(format!("spacing {:?} must be positive", self.spacing_mm));
        }
        if self.n_vertebrae < 2 {
            return bad("n_vertebrae must be >= 2".into());
        }
        if self.gap_px < 1.0 {
            return bad("gap_px must be >= 1".into());
        }
        if self.contrast.bone_mean <= self.contrast.background_mean {
            return bad("bone_mean must exceed background_mean".into());
        }
        if self.contrast.noise_sigma < 0.0 {
            return bad("noise_sigma must be >= 0".into());
        }
        if self.vb_height_px <= 0.0 || self.vb_width_px <= 0.0 {
            return bad("vertebra sizes must be positive".into());
        }
        if self.spine_curve_coeffs.is_empty() {
            return bad("spine_curve_coeffs must not be empty".into());
        }
        if !(0.0..0.9).contains(&self.endplate_concavity) {
            return bad("endplate_concavity must be in [0, 0.9)".into());
        }
        if !(0.0..0.5).contains(&self.size_jitter) {
            return bad("size_jitter must be in [0, 0.5)".into());
        }
        if !(self.partial_volume_sigma_px >= 0.0 && self.partial_volume_sigma_px.is_finite()) {
            return bad("partial_volume_sigma_px must be >= 0".into());
        }
        if let Some(c) = &self.collapse {
            if c.vertebra_index >= self.n_vertebrae || !(c.height_scale > 0.0 && c.height_scale < 1.0)
            {
                return bad("collapse needs a valid vertebra_index and height_scale in (0,1)".into());
            }
        }
        let profile = self.profile();
        if profile.len() != self.dims[0] {
            return bad(format!(
                "extrusion_profile has {} entries for {} slices",
                profile.len(),
                self.dims[0]
            ));
        }
        if !profile.iter().all(|v| (0.0..=1.0).contains(v)) {
            return bad("extrusion_profile entries must be in [0, 1]".into());
        }
        if profile[self.dims[0] / 2] <= 0.0 {
            return bad("extrusion_profile must be positive at the middle slice".into());
        }
        Ok(())
    }

    fn curve(&self, y: f64) -> f64 {
        self.spine_curve_coeffs
            .iter()
            .rev()
            .fold(0.0, |acc, c| acc * y + c)
    }

    fn curve_slope(&self, y: f64) -> f64 {
        self.spine_curve_coeffs
            .iter()
            .enumerate()
            .skip(1)
            .rev()
            .fold(0.0, |acc, (k, c)| acc * y + k as f64 * c)
    }

    /// Lays out the vertebral bodies top to bottom along the centerline.
    pub fn shapes(&self, rng: &mut ChaCha8Rng) -> Result<Vec<VertebraShape>, PhantomError> {
        let n = self.n_vertebrae;
        let mut heights = Vec::with_capacity(n);
        let mut widths = Vec::with_capacity(n);
        for i in 0..n {
            let jh = 1.0 + self.size_jitter * (2.0 * rng.random::<f64>() - 1.0);
            let jw = 1.0 + self.size_jitter * (2.0 * rng.random::<f64>() - 1.0);
            let mut h = self.vb_height_px * jh;
            if let Some(c) = &self.collapse {
                if c.vertebra_index == i {
                    h *= c.height_scale;
                }
            }
            heights.push(h);
            widths.push(self.vb_width_px * jw);
        }
        let total: f64 = heights.iter().sum::<f64>() + self.gap_px * (n - 1) as f64;
        let [_, rows, cols] = self.dims;
        let mut y = (rows as f64 - total) / 2.0 + rng.random_range(-2.0..2.0);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let cy = y + heights[i] / 2.0;
            let shape = VertebraShape {
                id: format!("V{}", i + 1),
                center: Point::new(self.curve(cy), cy),
                tilt: self.curve_slope(cy).atan(),
                half_width: widths[i] / 2.0,
                half_height: heights[i] / 2.0,
            };
            for c in shape.corners() {
                let fits = c.x >= BORDER_PX
                    && c.y >= BORDER_PX
                    && c.x <= cols as f64 - 1.0 - BORDER_PX
                    && c.y <= rows as f64 - 1.0 - BORDER_PX;
                if !fits {
                    return Err(PhantomError::GeometryOverflow(format!(
                        "{} corner ({:.1}, {:.1}) outside {}x{} with {} px border",
                        shape.id, c.x, c.y, cols, rows, BORDER_PX
                    )));
                }
            }
            out.push(shape);
            y += heights[i] + self.gap_px;
        }
        Ok(out)
    }
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom, PhantomError> {
    generate_named(spec, &format!("phantom-{:04}", spec.seed))
}

pub fn generate_named(spec: &PhantomSpec, volume_id: &str) -> Result<Phantom, PhantomError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shapes = spec.shapes(&mut rng)?;
    let profile = spec.profile();
    let [slices, rows, cols] = spec.dims;
    let c = spec.contrast;
    let noise = Normal::new(0.0, c.noise_sigma.max(0.0))
        .map_err(|e| PhantomError::InvalidSpec(e.to_string()))?;

    let mut voxels = Array3::<i16>::zeros((slices, rows, cols));
    let mut truth = LabelStore::new();
    for (s, &w) in profile.iter().enumerate() {
        // marginal cross-sections also lose contrast
        let bone = c.background_mean + (c.bone_mean - c.background_mean) * w * w;
        let mut masks = Vec::new();
        let mut inside = Array2::from_elem((rows, cols), false);
        for shape in &shapes {
            let m = Array2::from_shape_fn((rows, cols), |(y, x)| {
                shape.contains(
                    x as f64,
                    y as f64,
                    w,
                    spec.endplate_concavity,
                    spec.corner_radius_px,
                )
            });
            if m.iter().any(|&v| v) {
                inside.zip_mut_with(&m, |a, &b| *a |= b);
                masks.push(InstanceMask::new(
                    shape.id.clone(),
                    m,
                    Provenance::GroundTruth,
                    0,
                )?);
            }
        }
        let mut clean = inside.mapv(|v| if v { bone } else { c.background_mean });
        if spec.partial_volume_sigma_px > 0.0 {
            clean = gaussian_blur(&clean, spec.partial_volume_sigma_px);
        }
        for y in 0..rows {
            for x in 0..cols {
                let mean = clean[[y, x]];
                let v = mean + noise.sample(&mut rng);
                voxels[[s, y, x]] = v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
            }
        }
        if !masks.is_empty() {
            truth.insert(
                volume_id,
                s,
                0,
                LabelEntry {
                    masks,
                    generation: 0,
                    fallback: false,
                },
            )?;
        }
    }

    let [ds, dy, dx] = spec.spacing_mm;
    let volume = Volume::new(volume_id, voxels, Spacing::new(ds, dy, dx)?)?;
    let vertebrae = shapes
        .iter()
        .map(|s| VertebraLandmarks::new(s.id.clone(), s.corners()))
        .collect::<Result<Vec<_>, _>>()?;
    let annotation = LandmarkAnnotation::new(volume_id, slices / 2, vertebrae)?;
    annotation.validate_against(&volume)?;
    Ok(Phantom {
        volume,
        annotation,
        truth,
        shapes,
        profile,
    })
}

const JITTER_RETRIES: usize = 100;

/// Moves every corner by a random displacement whose length in millimeters is
/// uniform in `[0, max_shift_mm]` and whose direction is uniform on the circle.
/// A corner is redrawn while the quadrilateral is not simple or leaves the slice.
pub fn jitter_landmarks(
    a: &LandmarkAnnotation,
    spacing: Spacing,
    slice_shape: (usize, usize),
    max_shift_mm: f64,
    seed: u64,
) -> Result<LandmarkAnnotation, PhantomError> {
    if !(max_shift_mm >= 0.0 && max_shift_mm.is_finite()) {
        return Err(PhantomError::InvalidSpec(format!(
            "max_shift_mm {max_shift_mm} must be finite and >= 0"
        )));
    }
    if max_shift_mm == 0.0 {
        return Ok(a.clone());
    }
    let (rows, cols) = slice_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vertebrae = Vec::with_capacity(a.vertebrae.len());
    for v in &a.vertebrae {
        let mut corners = v.corners;
        for k in 0..4 {
            let mut placed = false;
            for _ in 0..JITTER_RETRIES {
                let r = rng.random::<f64>() * max_shift_mm;
                let phi = rng.random::<f64>() * std::f64::consts::TAU;
                let cand = Point::new(
                    v.corners[k].x + r * phi.cos() / spacing.col,
                    v.corners[k].y + r * phi.sin() / spacing.row,
                );
                let in_bounds = cand.x >= 0.0
                    && cand.y >= 0.0
                    && cand.x <= (cols - 1) as f64
                    && cand.y <= (rows - 1) as f64;
                let mut trial = corners;
                trial[k] = cand;
                if in_bounds && is_simple_polygon(&trial) {
                    corners = trial;
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(PhantomError::RetriesExhausted {
                    id: v.id.clone(),
                    tries: JITTER_RETRIES,
                });
            }
        }
        vertebrae.push(VertebraLandmarks::new(v.id.clone(), corners)?);
    }
    Ok(LandmarkAnnotation::new(
        a.volume_id.clone(),
        a.slice_index,
        vertebrae,
    )?)
}
