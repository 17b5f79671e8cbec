//! Pseudo-label refinement: confident prediction selection followed by a
//! per-instance fully connected CRF.

use std::cmp::Ordering;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::{
    mask_centroid, BBox, DataError, InstanceMask, InstancePrediction, Mask2, Point, Provenance,
};
use crate::geometry::{curve_distance, fit_spine_curve, SpineCurve};

#[derive(Debug, Error)]
pub enum RefinementError {
    #[error("shape mismatch: image {image:?}, probabilities {prob:?}")]
    ShapeMismatch {
        image: (usize, usize),
        prob: (usize, usize),
    },
    #[error("invalid refinement config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionConfig {
    pub t1_objectness: f64,
    pub t2_pixel: f64,
    pub curve_degree: usize,
    /// Curve-distance cutoff as a multiple of the median ROI height.
    pub rejection_factor: f64,
    pub min_rois_for_curve: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            t1_objectness: 0.9,
            t2_pixel: 0.5,
            curve_degree: 2,
            rejection_factor: 1.5,
            min_rois_for_curve: 3,
        }
    }
}

impl SelectionConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.t1_objectness > 0.0 && self.t1_objectness <= 1.0) {
            v.push(format!("t1_objectness {} must be in (0, 1]", self.t1_objectness));
        }
        if !(self.t2_pixel > 0.0 && self.t2_pixel <= 1.0) {
            v.push(format!("t2_pixel {} must be in (0, 1]", self.t2_pixel));
        }
        if !(self.rejection_factor > 0.0 && self.rejection_factor.is_finite()) {
            v.push(format!("rejection_factor {} must be > 0", self.rejection_factor));
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrfConfig {
    pub n_iterations: usize,
    pub appearance_weight: f64,
    pub spatial_weight: f64,
    pub appearance_sigma_xy: f64,
    pub appearance_sigma_intensity: f64,
    pub spatial_sigma_xy: f64,
    /// Margin added around each predicted box to form the CRF window.
    pub window_margin_px: usize,
}

impl Default for CrfConfig {
    fn default() -> Self {
        Self {
            n_iterations: 5,
            appearance_weight: 0.05,
            spatial_weight: 0.05,
            appearance_sigma_xy: 30.0,
            appearance_sigma_intensity: 10.0,
            spatial_sigma_xy: 3.0,
            window_margin_px: 8,
        }
    }
}

impl CrfConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, w) in [
            ("appearance_weight", self.appearance_weight),
            ("spatial_weight", self.spatial_weight),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                v.push(format!("{name} {w} must be >= 0"));
            }
        }
        for (name, s) in [
            ("appearance_sigma_xy", self.appearance_sigma_xy),
            ("appearance_sigma_intensity", self.appearance_sigma_intensity),
            ("spatial_sigma_xy", self.spatial_sigma_xy),
        ] {
            if !(s > 0.0 && s.is_finite()) {
                v.push(format!("{name} {s} must be > 0"));
            }
        }
        v
    }
}

/// Output of [`select_confident`]. `kept[i]` was built from input prediction
/// `kept_source[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub kept: Vec<InstanceMask>,
    pub kept_source: Vec<usize>,
    pub rejected: Vec<InstancePrediction>,
}

/// Thresholds predictions on a slice of `shape` and rejects ROIs far from the fitted spine curve.
///
/// Kept masks are named `roi<k>` after their input index; callers assign
/// vertebra ids.
pub fn select_confident(
    preds: &[InstancePrediction],
    shape: (usize, usize),
    cfg: &SelectionConfig,
) -> Selection {
    let mut survivors: Vec<(usize, InstanceMask, Point, usize)> = Vec::new();
    let mut rejected_idx = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        if p.objectness < cfg.t1_objectness {
            rejected_idx.push(i);
            continue;
        }
        let (h, w) = p.prob_map.dim();
        let mut mask = Mask2::from_elem(shape, false);
        let b = p.bbox;
        mask.slice_mut(s![b.y0..b.y0 + h, b.x0..b.x0 + w])
            .assign(&p.prob_map.mapv(|v| v >= cfg.t2_pixel));
        match mask_centroid(&mask) {
            Some(c) => {
                let m = InstanceMask::new(format!("roi{i}"), mask, Provenance::Selected, 0)
                    .expect("non-empty");
                survivors.push((i, m, c, b.height()));
            }
            None => rejected_idx.push(i),
        }
    }

    if survivors.len() >= cfg.min_rois_for_curve.max(cfg.curve_degree + 1) {
        let mut heights: Vec<f64> = survivors.iter().map(|s| s.3 as f64).collect();
        heights.sort_by(f64::total_cmp);
        let n = heights.len();
        let median = if n % 2 == 1 {
            heights[n / 2]
        } else {
            0.5 * (heights[n / 2 - 1] + heights[n / 2])
        };
        let cutoff = cfg.rejection_factor * median;
        let points: Vec<Point> = survivors.iter().map(|s| s.2).collect();
        let outliers = curve_outliers(&points, cfg.curve_degree, cutoff, cfg.min_rois_for_curve);
        for k in outliers.into_iter().rev() {
            let (i, ..) = survivors.remove(k);
            rejected_idx.push(i);
        }
    }

    rejected_idx.sort_unstable();
    Selection {
        kept_source: survivors.iter().map(|s| s.0).collect(),
        kept: survivors.into_iter().map(|s| s.1).collect(),
        rejected: rejected_idx.into_iter().map(|i| preds[i].clone()).collect(),
    }
}

/// Indices (ascending) of points rejected as curve outliers.
///
/// A plain least-squares fit is pulled towards a far outlier, so points are
/// removed greedily: while the current fit leaves a point beyond `cutoff`, the
/// point whose exclusion yields the best fit of the rest is dropped, provided
/// it lies beyond `cutoff` from that refit. A final pass drops anything still
/// beyond `cutoff`. Rank-deficient fits disable rejection.
pub fn curve_outliers(points: &[Point], degree: usize, cutoff: f64, min_points: usize) -> Vec<usize> {
    let mut active: Vec<usize> = (0..points.len()).collect();
    let fit = |idx: &[usize]| -> Option<SpineCurve> {
        let pts: Vec<Point> = idx.iter().map(|&i| points[i]).collect();
        fit_spine_curve(&pts, degree).ok()
    };
    let beyond = |c: &SpineCurve, i: usize| curve_distance(c, points[i]) > cutoff;
    let mut removed = Vec::new();
    while let Some(curve) = fit(&active) {
        if !active.iter().any(|&i| beyond(&curve, i)) || active.len() <= min_points.max(degree + 1) {
            break;
        }
        // candidate exclusion with the smallest remaining residual; ties go to
        // the point farther from the current fit, then to position
        let mut best: Option<(f64, f64, usize, SpineCurve)> = None;
        for (k, &i) in active.iter().enumerate() {
            let rest: Vec<usize> = active.iter().copied().filter(|&j| j != i).collect();
            let Some(c) = fit(&rest) else { continue };
            let far = curve_distance(&curve, points[i]);
            let better = match &best {
                None => true,
                Some((rms, f, bk, _)) => match cmp_tol(c.rms_residual, *rms) {
                    Ordering::Less => true,
                    Ordering::Greater => false,
                    Ordering::Equal => match cmp_tol(*f, far) {
                        Ordering::Less => true,
                        Ordering::Greater => false,
                        Ordering::Equal => point_key(points[i]) < point_key(points[active[*bk]]),
                    },
                },
            };
            if better {
                best = Some((c.rms_residual, far, k, c));
            }
        }
        match best {
            Some((_, _, k, c)) if beyond(&c, active[k]) => {
                removed.push(active.remove(k));
            }
            _ => break,
        }
    }
    if let Some(curve) = fit(&active) {
        removed.extend(active.iter().copied().filter(|&i| beyond(&curve, i)));
    }
    removed.sort_unstable();
    removed
}

/// Orders values that differ only by rounding as equal, so that the choice
/// does not depend on input order.
fn cmp_tol(a: f64, b: f64) -> Ordering {
    if (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs())) {
        Ordering::Equal
    } else {
        a.total_cmp(&b)
    }
}

fn point_key(p: Point) -> (u64, u64) {
    (p.x.to_bits(), p.y.to_bits())
}

const PROB_CLAMP: f64 = 1e-5;

struct Unary {
    fg: Vec<f64>,
    bg: Vec<f64>,
}

fn unaries(prob: &Array2<f64>) -> Unary {
    let p: Vec<f64> = prob.iter().map(|&v| v.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)).collect();
    Unary {
        fg: p.iter().map(|v| -v.ln()).collect(),
        bg: p.iter().map(|v| -(1.0 - v).ln()).collect(),
    }
}

fn gauss(d2: f64, sigma: f64) -> f64 {
    (-d2 / (2.0 * sigma * sigma)).exp()
}

/// One mean-field sweep given pairwise messages.
fn update(
    u: &Unary,
    msg_fg: &[f64],
    msg_bg: &[f64],
    q: &mut [f64],
    e_fg: &mut [f64],
    e_bg: &mut [f64],
) {
    for i in 0..q.len() {
        // Potts: a label pays for the neighbours that disagree with it
        e_fg[i] = u.fg[i] + msg_bg[i];
        e_bg[i] = u.bg[i] + msg_fg[i];
        q[i] = 1.0 / (1.0 + (e_fg[i] - e_bg[i]).exp());
    }
}

/// Binary fully connected CRF solved by mean-field iteration.
///
/// Returns `fg` where the final foreground energy does not exceed the
/// background energy; with no pairwise coupling this is `mask_prob ≥ 0.5`.
pub fn crf_refine(
    image: &Array2<f64>,
    mask_prob: &Array2<f64>,
    cfg: &CrfConfig,
) -> Result<Mask2, RefinementError> {
    if image.dim() != mask_prob.dim() {
        return Err(RefinementError::ShapeMismatch {
            image: image.dim(),
            prob: mask_prob.dim(),
        });
    }
    let (h, w) = image.dim();
    let n = h * w;
    let u = unaries(mask_prob);
    let mut e_fg = u.fg.clone();
    let mut e_bg = u.bg.clone();
    if cfg.n_iterations > 0 {
        let intensity: Vec<f64> = image.iter().copied().collect();
        // positional factors depend only on the offset, so they are tabulated
        let d2 = |dy: usize, dx: usize| (dx * dx + dy * dy) as f64;
        let app_xy = Array2::from_shape_fn((h, w), |(dy, dx)| gauss(d2(dy, dx), cfg.appearance_sigma_xy));
        let sp_xy = Array2::from_shape_fn((h, w), |(dy, dx)| gauss(d2(dy, dx), cfg.spatial_sigma_xy));
        // dense symmetric kernel, zero diagonal
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            let (yi, xi) = (i / w, i % w);
            for j in i + 1..n {
                let (yj, xj) = (j / w, j % w);
                let off = [yi.abs_diff(yj), xi.abs_diff(xj)];
                let di = intensity[i] - intensity[j];
                let v = cfg.appearance_weight
                    * (app_xy[off] * gauss(di * di, cfg.appearance_sigma_intensity))
                    + cfg.spatial_weight * sp_xy[off];
                k[i * n + j] = v;
                k[j * n + i] = v;
            }
        }
        let mut q: Vec<f64> = mask_prob
            .iter()
            .map(|&v| v.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))
            .collect();
        let mut msg_fg = vec![0.0; n];
        let mut msg_bg = vec![0.0; n];
        for _ in 0..cfg.n_iterations {
            for i in 0..n {
                let row = &k[i * n..(i + 1) * n];
                let (mut f, mut b) = (0.0, 0.0);
                for j in 0..n {
                    if j != i {
                        f += row[j] * q[j];
                        b += row[j] * (1.0 - q[j]);
                    }
                }
                msg_fg[i] = f;
                msg_bg[i] = b;
            }
            update(&u, &msg_fg, &msg_bg, &mut q, &mut e_fg, &mut e_bg);
        }
    }
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        e_fg[y * w + x] <= e_bg[y * w + x]
    }))
}

/// Selection followed by a CRF over each kept instance's dilated box.
///
/// Returns the refined masks (provenance `crf_refined`, named like the
/// selection output) with the index of their source prediction.
pub fn refine_labels_with_source(
    image: &Array2<f64>,
    preds: &[InstancePrediction],
    sel_cfg: &SelectionConfig,
    crf_cfg: &CrfConfig,
) -> Result<Vec<(usize, InstanceMask)>, RefinementError> {
    let (h, w) = image.dim();
    let selection = select_confident(preds, (h, w), sel_cfg);
    let mut out = Vec::new();
    for (m, &src) in selection.kept.iter().zip(&selection.kept_source) {
        let p = &preds[src];
        let prob = p.full_prob(h, w);
        let win: BBox = p.bbox.dilate(crf_cfg.window_margin_px, h, w);
        let view = s![win.y0..win.y1, win.x0..win.x1];
        let refined = crf_refine(
            &image.slice(view).to_owned(),
            &prob.slice(view).to_owned(),
            crf_cfg,
        )?;
        let mut full = Mask2::from_elem((h, w), false);
        full.slice_mut(view).assign(&refined);
        if full.iter().any(|&v| v) {
            out.push((src, m.advance(full, Provenance::CrfRefined, m.iteration)?));
        }
    }
    Ok(out)
}

pub fn refine_labels(
    image: &Array2<f64>,
    preds: &[InstancePrediction],
    sel_cfg: &SelectionConfig,
    crf_cfg: &CrfConfig,
) -> Result<Vec<InstanceMask>, RefinementError> {
    Ok(refine_labels_with_source(image, preds, sel_cfg, crf_cfg)?
        .into_iter()
        .map(|(_, m)| m)
        .collect())
}
