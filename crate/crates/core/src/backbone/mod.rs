//! Trainable instance segmentation backbone.
//!
//! The rest of the pipeline only relies on [`InstanceSegmenter`]: one
//! objectness probability, one box and one per-pixel probability map per
//! region of interest. The reference implementation is a small two-stage
//! model:
//!
//! * a frozen filter-bank encoder ([`features`]),
//! * a proposal head scoring every cell of a coarse grid and regressing a box
//!   relative to a fixed anchor,
//! * a mask head predicting foreground probability for every pixel of a box
//!   from encoder features and box-relative coordinates.
//!
//! Both heads are trained jointly with momentum SGD on
//! `L = L_cls + L_box + L_mask + α·L_edge`.

pub mod features;
pub mod loss;
pub mod mlp;

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::{BBox, InstanceMask, InstancePrediction};
use crate::geometry::GeometryError;
use features::{FeatureMap, CH_BLUR2, CH_BLUR4, CH_EDGE_BLUR, N_CHANNELS};
use loss::{bce_with_logit, edge_loss_with_grad, sigmoid, smooth_l1, total_loss};
use mlp::{Mlp, MlpGrad};

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("training slice {0} has no instance labels")]
    NoLabels(usize),
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("non-finite loss component")]
    NonFinite,
    #[error("invalid backbone config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// `[rows, cols]` every input image must have.
    pub input_size: [usize; 2],
    pub max_instances: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub edge_loss_alpha: f64,
    pub seed: u64,
    /// Proposal grid stride in pixels.
    pub stride: usize,
    /// Anchor box `[width, height]` in pixels.
    pub anchor_px: [f64; 2],
    /// Context margin added around instance boxes.
    pub mask_margin_px: usize,
    pub proposal_hidden: usize,
    pub mask_hidden: usize,
    /// Intensity units mapped to one after median centering.
    pub intensity_scale: f64,
    pub nms_iou: f64,
    /// Proposals scoring below this are not reported.
    pub min_score: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_size: [128, 128],
            max_instances: 8,
            learning_rate: 0.001,
            momentum: 0.9,
            epochs: 50,
            edge_loss_alpha: 0.1,
            seed: 0,
            stride: 8,
            anchor_px: [40.0, 26.0],
            mask_margin_px: 3,
            proposal_hidden: 32,
            mask_hidden: 16,
            intensity_scale: 200.0,
            nms_iou: 0.3,
            min_score: 0.05,
        }
    }
}

impl BackboneConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.edge_loss_alpha >= 0.0 && self.edge_loss_alpha.is_finite()) {
            v.push(format!("edge_loss_alpha {} must be >= 0", self.edge_loss_alpha));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            v.push(format!("learning_rate {} must be > 0", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            v.push(format!("momentum {} must be in [0, 1)", self.momentum));
        }
        if self.epochs < 1 {
            v.push("epochs must be >= 1".into());
        }
        if self.input_size.iter().any(|&d| d < 2) {
            v.push(format!("input_size {:?} must be at least 2x2", self.input_size));
        }
        if self.max_instances < 1 {
            v.push("max_instances must be >= 1".into());
        }
        if self.stride < 1 {
            v.push("stride must be >= 1".into());
        }
        if !self.anchor_px.iter().all(|&a| a > 0.0) {
            v.push("anchor_px must be positive".into());
        }
        if self.proposal_hidden < 1 || self.mask_hidden < 1 {
            v.push("hidden sizes must be >= 1".into());
        }
        if self.intensity_scale <= 0.0 {
            v.push("intensity_scale must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.nms_iou) || !(0.0..=1.0).contains(&self.min_score) {
            v.push("nms_iou and min_score must be in [0, 1]".into());
        }
        v
    }

    pub fn validate(&self) -> Result<(), BackboneError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(BackboneError::InvalidConfig(v.join("; ")))
        }
    }

    fn shape(&self) -> (usize, usize) {
        (self.input_size[0], self.input_size[1])
    }
}

/// Mean loss components over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub cls: f64,
    #[serde(rename = "box")]
    pub box_: f64,
    pub mask: f64,
    pub edge: f64,
    pub total: f64,
}

/// Per-feature standardization frozen at the first training call.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl Normalizer {
    fn fit(rows: &[&Array2<f64>]) -> Self {
        let cols = rows[0].ncols();
        let mut sum = Array1::<f64>::zeros(cols);
        let mut sq = Array1::<f64>::zeros(cols);
        let mut n = 0.0;
        for r in rows {
            sum += &r.sum_axis(Axis(0));
            sq += &r.mapv(|v| v * v).sum_axis(Axis(0));
            n += r.nrows() as f64;
        }
        let mean = &sum / n;
        let std = (&sq / n - &mean * &mean).mapv(|v| v.max(0.0).sqrt().max(1e-6));
        Self { mean, std }
    }

    fn apply(&self, x: &mut Array2<f64>) {
        for mut row in x.rows_mut() {
            row -= &self.mean;
            row /= &self.std;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub config: BackboneConfig,
    pub proposal_norm: Normalizer,
    pub mask_norm: Normalizer,
    pub proposal: Mlp,
    pub mask: Mlp,
    /// One entry per epoch run on this model, including warm-started ones.
    pub training_log: Vec<EpochLoss>,
}

/// The contract the pipeline relies on.
pub trait InstanceSegmenter {
    fn predict(&self, image: &Array2<f64>) -> Result<Vec<InstancePrediction>, BackboneError>;
}

impl InstanceSegmenter for TrainedModel {
    fn predict(&self, image: &Array2<f64>) -> Result<Vec<InstancePrediction>, BackboneError> {
        predict(self, image)
    }
}

/// One training image with its instance labels.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub image: Array2<f64>,
    pub labels: Vec<InstanceMask>,
}

const GRID_STEPS: [f64; 7] = [-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0];
const PROPOSAL_CHANNELS: [usize; 3] = [CH_BLUR2, CH_BLUR4, CH_EDGE_BLUR];
const N_PROPOSAL_FEATURES: usize = GRID_STEPS.len() * GRID_STEPS.len() * PROPOSAL_CHANNELS.len();
const N_MASK_FEATURES: usize = N_CHANNELS + 5;

struct Grid {
    rows: usize,
    cols: usize,
    stride: usize,
}

impl Grid {
    fn new(shape: (usize, usize), stride: usize) -> Self {
        Self {
            rows: shape.0.div_ceil(stride),
            cols: shape.1.div_ceil(stride),
            stride,
        }
    }

    fn len(&self) -> usize {
        self.rows * self.cols
    }

    fn center(&self, cell: usize) -> (f64, f64) {
        let (r, c) = (cell / self.cols, cell % self.cols);
        let half = (self.stride as f64 - 1.0) / 2.0;
        (
            (c * self.stride) as f64 + half,
            (r * self.stride) as f64 + half,
        )
    }
}

fn proposal_features(fm: &FeatureMap, grid: &Grid, anchor: [f64; 2]) -> Array2<f64> {
    let mut x = Array2::zeros((grid.len(), N_PROPOSAL_FEATURES));
    let step_x = anchor[0] / 5.0;
    let step_y = anchor[1] / 5.0;
    for cell in 0..grid.len() {
        let (cx, cy) = grid.center(cell);
        let mut k = 0;
        for &ch in &PROPOSAL_CHANNELS {
            for gy in GRID_STEPS {
                for gx in GRID_STEPS {
                    let sx = (cx + gx * step_x).round() as isize;
                    let sy = (cy + gy * step_y).round() as isize;
                    x[[cell, k]] = fm.sample(ch, sy, sx);
                    k += 1;
                }
            }
        }
    }
    x
}

fn mask_features(fm: &FeatureMap, b: &BBox) -> Array2<f64> {
    let (w, h) = (b.width() as f64, b.height() as f64);
    let mut x = Array2::zeros((b.area(), N_MASK_FEATURES));
    let mut row = 0;
    for y in b.y0..b.y1 {
        let v = 2.0 * ((y - b.y0) as f64 + 0.5) / h - 1.0;
        for xx in b.x0..b.x1 {
            let u = 2.0 * ((xx - b.x0) as f64 + 0.5) / w - 1.0;
            for c in 0..N_CHANNELS {
                x[[row, c]] = fm.channels[c][[y, xx]];
            }
            let extra = [u, v, u * u, v * v, u * u * v * v];
            for (k, e) in extra.into_iter().enumerate() {
                x[[row, N_CHANNELS + k]] = e;
            }
            row += 1;
        }
    }
    x
}

/// Box targets relative to a cell: center offset in strides, log size ratio.
fn encode_box(b: &BBox, cell_center: (f64, f64), stride: usize, anchor: [f64; 2]) -> [f64; 4] {
    let c = b.center();
    [
        (c.x - cell_center.0) / stride as f64,
        (c.y - cell_center.1) / stride as f64,
        (b.width() as f64 / anchor[0]).ln(),
        (b.height() as f64 / anchor[1]).ln(),
    ]
}

fn decode_box(
    t: [f64; 4],
    cell_center: (f64, f64),
    stride: usize,
    anchor: [f64; 2],
    shape: (usize, usize),
) -> Option<BBox> {
    let cx = cell_center.0 + t[0] * stride as f64;
    let cy = cell_center.1 + t[1] * stride as f64;
    let w = anchor[0] * t[2].clamp(-3.0, 3.0).exp();
    let h = anchor[1] * t[3].clamp(-3.0, 3.0).exp();
    let clip = |v: f64, hi: usize| v.round().clamp(0.0, hi as f64) as usize;
    let x0 = clip(cx - w / 2.0 + 0.5, shape.1);
    let x1 = clip(cx + w / 2.0 + 0.5, shape.1);
    let y0 = clip(cy - h / 2.0 + 0.5, shape.0);
    let y1 = clip(cy + h / 2.0 + 0.5, shape.0);
    (x1 >= x0 + 2 && y1 >= y0 + 2).then_some(BBox { x0, y0, x1, y1 })
}

/// Instance box with context margin, as used for box targets and mask ROIs.
fn label_box(m: &InstanceMask, margin: usize) -> Option<BBox> {
    let (h, w) = m.mask.dim();
    m.bbox().map(|b| b.dilate(margin, h, w))
}

const POSITIVE_RADIUS: f64 = 0.75;
const IGNORE_RADIUS: f64 = 1.25;

struct PreparedSlice {
    prop_x: Array2<f64>,
    /// 1 positive, 0 negative, -1 ignored.
    cell_label: Vec<i8>,
    box_target: Array2<f64>,
    mask_x: Array2<f64>,
    mask_t: Array1<f64>,
    /// `(row offset, height, width)` of each ROI inside `mask_x`.
    rois: Vec<(usize, usize, usize)>,
}

fn prepare(sample: &TrainingSample, cfg: &BackboneConfig) -> PreparedSlice {
    let shape = cfg.shape();
    let fm = features::encode(&sample.image, cfg.intensity_scale);
    let grid = Grid::new(shape, cfg.stride);
    let prop_x = proposal_features(&fm, &grid, cfg.anchor_px);
    let boxes: Vec<BBox> = sample
        .labels
        .iter()
        .filter_map(|m| label_box(m, cfg.mask_margin_px))
        .collect();
    let mut cell_label = vec![0i8; grid.len()];
    let mut box_target = Array2::zeros((grid.len(), 4));
    let s = cfg.stride as f64;
    for (cell, label) in cell_label.iter_mut().enumerate() {
        let (cx, cy) = grid.center(cell);
        let mut best: Option<(f64, usize)> = None;
        let mut near = false;
        for (i, b) in boxes.iter().enumerate() {
            let c = b.center();
            let (dx, dy) = ((c.x - cx).abs(), (c.y - cy).abs());
            if dx <= POSITIVE_RADIUS * s && dy <= POSITIVE_RADIUS * s {
                let d = dx.hypot(dy);
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, i));
                }
            } else if dx <= IGNORE_RADIUS * s && dy <= IGNORE_RADIUS * s {
                near = true;
            }
        }
        if let Some((_, i)) = best {
            *label = 1;
            let t = encode_box(&boxes[i], (cx, cy), cfg.stride, cfg.anchor_px);
            for (k, v) in t.into_iter().enumerate() {
                box_target[[cell, k]] = v;
            }
        } else if near {
            *label = -1;
        }
    }
    let total: usize = boxes.iter().map(BBox::area).sum();
    let mut mask_x = Array2::zeros((total, N_MASK_FEATURES));
    let mut mask_t = Array1::zeros(total);
    let mut rois = Vec::with_capacity(boxes.len());
    let mut offset = 0;
    for (b, m) in boxes.iter().zip(sample.labels.iter().filter(|m| m.bbox().is_some())) {
        let x = mask_features(&fm, b);
        mask_x
            .slice_mut(ndarray::s![offset..offset + b.area(), ..])
            .assign(&x);
        let mut k = offset;
        for y in b.y0..b.y1 {
            for xx in b.x0..b.x1 {
                mask_t[k] = if m.mask[[y, xx]] { 1.0 } else { 0.0 };
                k += 1;
            }
        }
        rois.push((offset, b.height(), b.width()));
        offset += b.area();
    }
    PreparedSlice {
        prop_x,
        cell_label,
        box_target,
        mask_x,
        mask_t,
        rois,
    }
}

struct StepResult {
    cls: f64,
    box_: f64,
    mask: f64,
    edge: f64,
    prop_grad: MlpGrad,
    mask_grad: MlpGrad,
}

fn step(model: &TrainedModel, s: &PreparedSlice, alpha: f64) -> StepResult {
    // proposal head
    let fwd = model.proposal.forward(&s.prop_x);
    let n_pos = s.cell_label.iter().filter(|&&l| l == 1).count();
    let n_neg = s.cell_label.iter().filter(|&&l| l == 0).count();
    let mut d_out = Array2::zeros(fwd.out.dim());
    let (mut cls_pos, mut cls_neg, mut box_loss) = (0.0, 0.0, 0.0);
    for (cell, &label) in s.cell_label.iter().enumerate() {
        let z = fwd.out[[cell, 0]];
        match label {
            1 => {
                cls_pos += bce_with_logit(z, 1.0);
                d_out[[cell, 0]] = 0.5 * (sigmoid(z) - 1.0) / n_pos as f64;
                for k in 0..4 {
                    let (l, g) = smooth_l1(fwd.out[[cell, 1 + k]] - s.box_target[[cell, k]]);
                    box_loss += l;
                    d_out[[cell, 1 + k]] = g / n_pos as f64;
                }
            }
            0 => {
                cls_neg += bce_with_logit(z, 0.0);
                d_out[[cell, 0]] = 0.5 * sigmoid(z) / n_neg as f64;
            }
            _ => {}
        }
    }
    let cls = 0.5 * (cls_pos / n_pos.max(1) as f64 + cls_neg / n_neg.max(1) as f64);
    let box_ = box_loss / n_pos.max(1) as f64;
    let prop_grad = model.proposal.backward(&s.prop_x, &fwd, &d_out);

    // mask head
    let fwd = model.mask.forward(&s.mask_x);
    let mut d_out = Array2::zeros(fwd.out.dim());
    let n_roi = s.rois.len().max(1) as f64;
    let (mut mask_loss, mut edge) = (0.0, 0.0);
    for &(off, h, w) in &s.rois {
        let n = (h * w) as f64;
        let logits = fwd.out.slice(ndarray::s![off..off + h * w, 0]);
        let probs = Array2::from_shape_fn((h, w), |(y, x)| sigmoid(logits[y * w + x]));
        let target = Array2::from_shape_fn((h, w), |(y, x)| s.mask_t[off + y * w + x]);
        let (e, de) = if h >= 2 && w >= 2 && alpha > 0.0 {
            edge_loss_with_grad(&probs, &target).expect("shapes agree")
        } else if h >= 2 && w >= 2 {
            (
                edge_loss_with_grad(&probs, &target).expect("shapes agree").0,
                Array2::zeros((h, w)),
            )
        } else {
            (0.0, Array2::zeros((h, w)))
        };
        edge += e / n_roi;
        for y in 0..h {
            for x in 0..w {
                let k = y * w + x;
                let (z, p, t) = (logits[k], probs[[y, x]], target[[y, x]]);
                mask_loss += bce_with_logit(z, t) / (n * n_roi);
                d_out[[off + k, 0]] =
                    (p - t) / (n * n_roi) + alpha * de[[y, x]] * p * (1.0 - p) / n_roi;
            }
        }
    }
    let mask_grad = model.mask.backward(&s.mask_x, &fwd, &d_out);
    StepResult {
        cls,
        box_,
        mask: mask_loss,
        edge,
        prop_grad,
        mask_grad,
    }
}

/// Trains the heads on `samples`; warm-starts from `init` when given.
///
/// With `init`, `cfg.epochs` may be zero, which returns the initial model
/// unchanged apart from adopting `cfg`.
pub fn train(
    samples: &[TrainingSample],
    cfg: &BackboneConfig,
    init: Option<&TrainedModel>,
) -> Result<TrainedModel, BackboneError> {
    let mut v = cfg.violations();
    if init.is_some() && cfg.epochs == 0 {
        v.retain(|m| !m.starts_with("epochs"));
    }
    if !v.is_empty() {
        return Err(BackboneError::InvalidConfig(v.join("; ")));
    }
    if samples.is_empty() {
        return Err(BackboneError::EmptyTrainingSet);
    }
    let shape = cfg.shape();
    for (i, s) in samples.iter().enumerate() {
        if s.image.dim() != shape {
            return Err(BackboneError::ShapeMismatch {
                expected: shape,
                actual: s.image.dim(),
            });
        }
        if s.labels.is_empty() || s.labels.iter().all(|m| m.area() == 0) {
            return Err(BackboneError::NoLabels(i));
        }
        if let Some(m) = s.labels.iter().find(|m| m.mask.dim() != shape) {
            return Err(BackboneError::ShapeMismatch {
                expected: shape,
                actual: m.mask.dim(),
            });
        }
    }
    if let Some(m) = init {
        if m.config.input_size != cfg.input_size
            || m.config.stride != cfg.stride
            || m.config.anchor_px != cfg.anchor_px
            || m.proposal.w1.nrows() != cfg.proposal_hidden
            || m.mask.w1.nrows() != cfg.mask_hidden
        {
            return Err(BackboneError::InvalidConfig(
                "warm-start model has an incompatible architecture".into(),
            ));
        }
    }

    let mut prepared: Vec<PreparedSlice> = samples.iter().map(|s| prepare(s, cfg)).collect();
    let mut model = match init {
        Some(m) => TrainedModel {
            config: cfg.clone(),
            ..m.clone()
        },
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let prop_rows: Vec<&Array2<f64>> = prepared.iter().map(|p| &p.prop_x).collect();
            let mask_rows: Vec<&Array2<f64>> = prepared.iter().map(|p| &p.mask_x).collect();
            TrainedModel {
                config: cfg.clone(),
                proposal_norm: Normalizer::fit(&prop_rows),
                mask_norm: Normalizer::fit(&mask_rows),
                proposal: Mlp::new(N_PROPOSAL_FEATURES, cfg.proposal_hidden, 5, &mut rng),
                mask: Mlp::new(N_MASK_FEATURES, cfg.mask_hidden, 1, &mut rng),
                training_log: Vec::new(),
            }
        }
    };
    for p in &mut prepared {
        model.proposal_norm.apply(&mut p.prop_x);
        model.mask_norm.apply(&mut p.mask_x);
    }

    let mut v_prop = model.proposal.zeros_like();
    let mut v_mask = model.mask.zeros_like();
    let alpha = cfg.edge_loss_alpha;
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    for _ in 0..cfg.epochs {
        let epoch = model.training_log.len();
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(epoch as u64),
        );
        order.shuffle(&mut rng);
        let (mut cls, mut box_, mut mask, mut edge) = (0.0, 0.0, 0.0, 0.0);
        for &i in &order {
            let r = step(&model, &prepared[i], alpha);
            if ![r.cls, r.box_, r.mask, r.edge].iter().all(|v| v.is_finite()) {
                return Err(BackboneError::NonFinite);
            }
            cls += r.cls;
            box_ += r.box_;
            mask += r.mask;
            edge += r.edge;
            model
                .proposal
                .sgd_step(&r.prop_grad, &mut v_prop, cfg.learning_rate, cfg.momentum);
            model
                .mask
                .sgd_step(&r.mask_grad, &mut v_mask, cfg.learning_rate, cfg.momentum);
        }
        let n = prepared.len() as f64;
        let (cls, box_, mask, edge) = (cls / n, box_ / n, mask / n, edge / n);
        model.training_log.push(EpochLoss {
            epoch,
            cls,
            box_,
            mask,
            edge,
            total: total_loss(cls, box_, mask, edge, alpha)?,
        });
    }
    Ok(model)
}

pub fn predict(
    model: &TrainedModel,
    image: &Array2<f64>,
) -> Result<Vec<InstancePrediction>, BackboneError> {
    let cfg = &model.config;
    let shape = cfg.shape();
    if image.dim() != shape {
        return Err(BackboneError::ShapeMismatch {
            expected: shape,
            actual: image.dim(),
        });
    }
    let fm = features::encode(image, cfg.intensity_scale);
    let grid = Grid::new(shape, cfg.stride);
    let mut px = proposal_features(&fm, &grid, cfg.anchor_px);
    model.proposal_norm.apply(&mut px);
    let out = model.proposal.forward(&px).out;

    let mut candidates: Vec<(f64, usize, BBox)> = (0..grid.len())
        .filter_map(|cell| {
            let score = sigmoid(out[[cell, 0]]);
            let t = [out[[cell, 1]], out[[cell, 2]], out[[cell, 3]], out[[cell, 4]]];
            decode_box(t, grid.center(cell), cfg.stride, cfg.anchor_px, shape)
                .map(|b| (score, cell, b))
        })
        .filter(|(score, _, _)| *score >= cfg.min_score)
        .collect();
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut kept: Vec<(f64, BBox)> = Vec::new();
    for (score, _, b) in candidates {
        if kept.len() >= cfg.max_instances {
            break;
        }
        if kept.iter().all(|(_, k)| k.iou(&b) <= cfg.nms_iou) {
            kept.push((score, b));
        }
    }

    let mut preds = Vec::with_capacity(kept.len());
    for (score, b) in kept {
        let mut mx = mask_features(&fm, &b);
        model.mask_norm.apply(&mut mx);
        let logits = model.mask.forward(&mx).out;
        let prob_map =
            Array2::from_shape_fn((b.height(), b.width()), |(y, x)| {
                sigmoid(logits[[y * b.width() + x, 0]])
            });
        preds.push(InstancePrediction {
            objectness: score,
            bbox: b,
            prob_map,
        });
    }
    Ok(preds)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"WISSCKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointSidecar {
    format_version: u32,
    config: BackboneConfig,
    tensors: Vec<String>,
    training_log: Vec<EpochLoss>,
}

impl TrainedModel {
    fn tensors(&self) -> Vec<(&'static str, Vec<usize>, Vec<f64>)> {
        let a2 = |a: &Array2<f64>| (vec![a.nrows(), a.ncols()], a.iter().copied().collect());
        let a1 = |a: &Array1<f64>| (vec![a.len()], a.to_vec());
        let mut out = Vec::new();
        let mut push = |name: &'static str, (dims, data): (Vec<usize>, Vec<f64>)| {
            out.push((name, dims, data))
        };
        push("proposal.norm.mean", a1(&self.proposal_norm.mean));
        push("proposal.norm.std", a1(&self.proposal_norm.std));
        push("mask.norm.mean", a1(&self.mask_norm.mean));
        push("mask.norm.std", a1(&self.mask_norm.std));
        push("proposal.w1", a2(&self.proposal.w1));
        push("proposal.b1", a1(&self.proposal.b1));
        push("proposal.w2", a2(&self.proposal.w2));
        push("proposal.b2", a1(&self.proposal.b2));
        push("mask.w1", a2(&self.mask.w1));
        push("mask.b1", a1(&self.mask.b1));
        push("mask.w2", a2(&self.mask.w2));
        push("mask.b2", a1(&self.mask.b2));
        out
    }

    /// Writes `<path>` (binary tensors) and `<path>.json` (config and log).
    pub fn save(&self, path: &Path) -> Result<(), BackboneError> {
        let err = |e: std::io::Error| BackboneError::Checkpoint(format!("{}: {e}", path.display()));
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(err)?;
        }
        let tensors = self.tensors();
        let mut blob = Vec::new();
        blob.extend_from_slice(CHECKPOINT_MAGIC);
        blob.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        blob.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, dims, data) in &tensors {
            blob.extend_from_slice(&(name.len() as u32).to_le_bytes());
            blob.extend_from_slice(name.as_bytes());
            blob.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in dims {
                blob.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, blob).map_err(err)?;
        let sidecar = CheckpointSidecar {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            tensors: tensors.iter().map(|t| t.0.to_string()).collect(),
            training_log: self.training_log.clone(),
        };
        let text = serde_json::to_string_pretty(&sidecar)
            .map_err(|e| BackboneError::Checkpoint(e.to_string()))?;
        fs::write(sidecar_path(path), text + "\n").map_err(err)
    }

    pub fn load(path: &Path) -> Result<Self, BackboneError> {
        let err = |m: String| BackboneError::Checkpoint(format!("{}: {m}", path.display()));
        let blob = fs::read(path).map_err(|e| err(e.to_string()))?;
        let text = fs::read_to_string(sidecar_path(path)).map_err(|e| err(e.to_string()))?;
        let sidecar: CheckpointSidecar =
            serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        let mut r = Reader { buf: &blob, pos: 0 };
        if r.take(8).ok_or_else(|| err("truncated".into()))? != CHECKPOINT_MAGIC {
            return Err(err("bad magic".into()));
        }
        let version = r.u32().ok_or_else(|| err("truncated".into()))?;
        if version != CHECKPOINT_VERSION || sidecar.format_version != CHECKPOINT_VERSION {
            return Err(err(format!("unsupported version {version}")));
        }
        let count = r.u32().ok_or_else(|| err("truncated".into()))? as usize;
        let mut tensors = std::collections::BTreeMap::new();
        for _ in 0..count {
            let (name, dims, data) = r.tensor().ok_or_else(|| err("truncated tensor".into()))?;
            tensors.insert(name, (dims, data));
        }
        let mut get2 = |name: &str| -> Result<Array2<f64>, BackboneError> {
            let (dims, data) = tensors
                .remove(name)
                .ok_or_else(|| err(format!("missing {name}")))?;
            if dims.len() != 2 {
                return Err(err(format!("{name} is not 2-D")));
            }
            Array2::from_shape_vec((dims[0], dims[1]), data).map_err(|e| err(e.to_string()))
        };
        let w = [
            get2("proposal.w1")?,
            get2("proposal.w2")?,
            get2("mask.w1")?,
            get2("mask.w2")?,
        ];
        let mut get1 = |name: &str| -> Result<Array1<f64>, BackboneError> {
            let (dims, data) = tensors
                .remove(name)
                .ok_or_else(|| err(format!("missing {name}")))?;
            if dims.len() != 1 {
                return Err(err(format!("{name} is not 1-D")));
            }
            Ok(Array1::from_vec(data))
        };
        let [pw1, pw2, mw1, mw2] = w;
        Ok(TrainedModel {
            config: sidecar.config,
            proposal_norm: Normalizer {
                mean: get1("proposal.norm.mean")?,
                std: get1("proposal.norm.std")?,
            },
            mask_norm: Normalizer {
                mean: get1("mask.norm.mean")?,
                std: get1("mask.norm.std")?,
            },
            proposal: Mlp {
                w1: pw1,
                b1: get1("proposal.b1")?,
                w2: pw2,
                b2: get1("proposal.b2")?,
            },
            mask: Mlp {
                w1: mw1,
                b1: get1("mask.b1")?,
                w2: mw2,
                b2: get1("mask.b2")?,
            },
            training_log: sidecar.training_log,
        })
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn tensor(&mut self) -> Option<(String, Vec<usize>, Vec<f64>)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec()).ok()?;
        let rank = self.u32()? as usize;
        let dims: Vec<usize> = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Option<_>>()?;
        let len: usize = dims.iter().product();
        let data = (0..len)
            .map(|_| Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?)))
            .collect::<Option<Vec<f64>>>()?;
        Some((name, dims, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::Provenance;

    fn blob_image(shape: (usize, usize), boxes: &[(usize, usize, usize, usize)]) -> TrainingSample {
        let mut img = Array2::from_elem(shape, 60.0);
        let mut labels = Vec::new();
        for (i, &(x0, y0, x1, y1)) in boxes.iter().enumerate() {
            let mut m = Array2::from_elem(shape, false);
            for y in y0..y1 {
                for x in x0..x1 {
                    img[[y, x]] = 300.0;
                    m[[y, x]] = true;
                }
            }
            labels.push(InstanceMask::new(format!("V{i}"), m, Provenance::Coarse, 0).unwrap());
        }
        TrainingSample { image: img, labels }
    }

    fn small_cfg() -> BackboneConfig {
        BackboneConfig {
            input_size: [48, 48],
            epochs: 3,
            anchor_px: [20.0, 14.0],
            ..BackboneConfig::default()
        }
    }

    #[test]
    fn box_codec_round_trip() {
        let b = BBox::new(10, 12, 40, 30).unwrap();
        let t = encode_box(&b, (23.5, 19.5), 8, [40.0, 26.0]);
        let back = decode_box(t, (23.5, 19.5), 8, [40.0, 26.0], (128, 128)).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn config_violations_are_all_reported() {
        let cfg = BackboneConfig {
            edge_loss_alpha: -1.0,
            learning_rate: 0.0,
            epochs: 0,
            ..BackboneConfig::default()
        };
        assert_eq!(cfg.violations().len(), 3);
    }

    #[test]
    fn training_errors() {
        let cfg = small_cfg();
        assert!(matches!(train(&[], &cfg, None), Err(BackboneError::EmptyTrainingSet)));
        let wrong = blob_image((40, 48), &[(5, 5, 15, 12)]);
        assert!(matches!(
            train(&[wrong], &cfg, None),
            Err(BackboneError::ShapeMismatch { .. })
        ));
        let mut unlabeled = blob_image((48, 48), &[(5, 5, 15, 12)]);
        unlabeled.labels.clear();
        assert!(matches!(
            train(&[unlabeled], &cfg, None),
            Err(BackboneError::NoLabels(0))
        ));
    }

    #[test]
    fn logged_total_is_weighted_sum() {
        let cfg = small_cfg();
        let s = blob_image((48, 48), &[(5, 5, 25, 17), (8, 24, 28, 38)]);
        let m = train(&[s], &cfg, None).unwrap();
        assert_eq!(m.training_log.len(), 3);
        for e in &m.training_log {
            let t = e.cls + e.box_ + e.mask + cfg.edge_loss_alpha * e.edge;
            assert!((e.total - t).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_epoch_warm_start_is_identity() {
        let cfg = small_cfg();
        let s = blob_image((48, 48), &[(5, 5, 25, 17)]);
        let m = train(std::slice::from_ref(&s), &cfg, None).unwrap();
        let same = train(
            std::slice::from_ref(&s),
            &BackboneConfig { epochs: 0, ..cfg },
            Some(&m),
        )
        .unwrap();
        assert_eq!(predict(&m, &s.image).unwrap(), predict(&same, &s.image).unwrap());
    }

    #[test]
    fn predictions_respect_contract() {
        let cfg = BackboneConfig {
            max_instances: 3,
            ..small_cfg()
        };
        let s = blob_image((48, 48), &[(5, 5, 25, 17), (8, 24, 28, 38)]);
        let m = train(std::slice::from_ref(&s), &cfg, None).unwrap();
        let preds = predict(&m, &s.image).unwrap();
        assert!(preds.len() <= 3);
        for p in &preds {
            p.validate(48, 48).unwrap();
        }
        assert!(predict(&m, &Array2::zeros((10, 10))).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = small_cfg();
        let s = blob_image((48, 48), &[(5, 5, 25, 17)]);
        let m = train(&[s], &cfg, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ckpt.bin");
        m.save(&p).unwrap();
        assert_eq!(TrainedModel::load(&p).unwrap(), m);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(TrainedModel::load(&p).is_err());
    }
}
