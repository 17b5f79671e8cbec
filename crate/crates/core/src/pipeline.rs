//! Self-training on annotated slices and slice-propagated extension to
//! volumetric segmentation.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{self, BackboneConfig, BackboneError, EpochLoss, TrainedModel, TrainingSample};
use crate::data_model::{
    mask_centroid, DataError, InstanceMask, InstancePrediction, LandmarkAnnotation, Mask2, Point,
    Provenance, Volume,
};
use crate::geometry::{rasterize_quadrilateral, GeometryError};
use crate::labels::{LabelEntry, LabelStore};
use crate::refinement::{refine_labels_with_source, CrfConfig, RefinementError, SelectionConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no volume with id {0}")]
    MissingVolume(String),
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("no labels to train on")]
    NoLabels,
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Refinement(#[from] RefinementError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub self_train_iterations: usize,
    pub propagation_radius: usize,
    pub backbone: BackboneConfig,
    pub selection: SelectionConfig,
    pub crf: CrfConfig,
    /// Overrides the backbone seed.
    pub seed: u64,
    /// Stop a self-training loop early once the final training loss changes
    /// by less than this fraction between iterations.
    pub early_stop_rel_tol: Option<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            self_train_iterations: 2,
            propagation_radius: 2,
            backbone: BackboneConfig::default(),
            selection: SelectionConfig::default(),
            crf: CrfConfig::default(),
            seed: 0,
            early_stop_rel_tol: None,
        }
    }
}

impl PipelineConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.self_train_iterations < 1 {
            v.push("self_train_iterations must be >= 1".into());
        }
        if let Some(t) = self.early_stop_rel_tol {
            if !(t >= 0.0 && t.is_finite()) {
                v.push(format!("early_stop_rel_tol {t} must be >= 0"));
            }
        }
        v.extend(self.backbone.violations().into_iter().map(|m| format!("backbone: {m}")));
        v.extend(self.selection.violations().into_iter().map(|m| format!("selection: {m}")));
        v.extend(self.crf.violations().into_iter().map(|m| format!("crf: {m}")));
        v
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(PipelineError::InvalidConfig(v.join("; ")))
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            seed: self.seed,
            ..self.backbone.clone()
        }
    }
}

/// One training call and the labels it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Propagation step; 0 for the annotated slices.
    pub radius: usize,
    /// Self-training pass within the step, from 1.
    pub iteration: usize,
    /// 1-based index of the checkpoint written by this stage.
    pub checkpoint: usize,
    pub training_slices: usize,
    pub losses: Vec<EpochLoss>,
    /// Provenance of the masks written by this stage.
    pub provenance_counts: BTreeMap<String, usize>,
    /// Slices (`volume@slice`) that kept their previous labels.
    pub fallback: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub stages: Vec<StageRecord>,
    /// Propagated slices whose refinement came back empty.
    pub excluded: Vec<String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub model: TrainedModel,
    pub store: LabelStore,
    /// Every trained model in order; checkpoint `k` is `checkpoints[k - 1]`.
    pub checkpoints: Vec<TrainedModel>,
    pub log: RunLog,
}

fn find<'a>(volumes: &'a [Volume], id: &str) -> Result<&'a Volume, PipelineError> {
    volumes
        .iter()
        .find(|v| v.id() == id)
        .ok_or_else(|| PipelineError::MissingVolume(id.to_string()))
}

fn slice_tag(volume_id: &str, slice: usize) -> String {
    format!("{volume_id}@{slice}")
}

/// One coarse mask per annotated vertebra, stored at iteration 0 of the
/// annotated slice.
pub fn build_coarse_labels(
    annotations: &[LandmarkAnnotation],
    volumes: &[Volume],
) -> Result<LabelStore, PipelineError> {
    let mut store = LabelStore::new();
    for a in annotations {
        let vol = find(volumes, &a.volume_id)?;
        a.validate_against(vol)?;
        let masks = a
            .vertebrae
            .iter()
            .map(|v| {
                let m = rasterize_quadrilateral(&v.corners, vol.slice_shape())?;
                Ok(InstanceMask::new(v.id.clone(), m, Provenance::Coarse, 0)?)
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        store.insert(
            &a.volume_id,
            a.slice_index,
            0,
            LabelEntry {
                masks,
                generation: 0,
                fallback: false,
            },
        )?;
    }
    Ok(store)
}

/// Annotated slice of each volume: the slice holding coarse labels.
pub fn annotated_slices(store: &LabelStore) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for (key, entry) in store.iter() {
        if key.iteration == 0 && entry.masks.iter().any(|m| m.provenance == Provenance::Coarse) {
            out.entry(key.volume_id.clone()).or_insert(key.slice_index);
        }
    }
    out
}

/// Names new masks after the reference mask they overlap most, one-to-one;
/// the rest get fresh ids.
fn inherit_ids(masks: &[Mask2], reference: &[InstanceMask]) -> Vec<String> {
    let mut pairs = Vec::new();
    for (i, m) in masks.iter().enumerate() {
        for (j, r) in reference.iter().enumerate() {
            let o = m.iter().zip(r.mask.iter()).filter(|(a, b)| **a && **b).count();
            if o > 0 {
                pairs.push((o, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut ids: Vec<Option<String>> = vec![None; masks.len()];
    let mut used = BTreeSet::new();
    for (_, i, j) in pairs {
        if ids[i].is_none() && !used.contains(&j) {
            used.insert(j);
            ids[i] = Some(reference[j].vertebra_id.clone());
        }
    }
    let taken: BTreeSet<String> = reference.iter().map(|r| r.vertebra_id.clone()).collect();
    let mut next = 1;
    ids.into_iter()
        .map(|id| {
            id.unwrap_or_else(|| loop {
                let candidate = format!("U{next}");
                next += 1;
                if !taken.contains(&candidate) {
                    break candidate;
                }
            })
        })
        .collect()
}

struct Runner<'a> {
    cfg: &'a PipelineConfig,
    volumes: &'a [Volume],
    store: LabelStore,
    model: Option<TrainedModel>,
    checkpoints: Vec<TrainedModel>,
    log: RunLog,
}

impl Runner<'_> {
    fn samples(&self, slices: &[(String, usize)]) -> Result<Vec<TrainingSample>, PipelineError> {
        slices
            .iter()
            .map(|(vid, s)| {
                let (_, entry) = self.store.latest(vid, *s).ok_or(PipelineError::NoLabels)?;
                Ok(TrainingSample {
                    image: find(self.volumes, vid)?.slice_f64(*s),
                    labels: entry.masks.clone(),
                })
            })
            .collect()
    }

    fn refine(
        &mut self,
        model: &TrainedModel,
        vid: &str,
        slice: usize,
    ) -> Result<Vec<Mask2>, PipelineError> {
        let image = find(self.volumes, vid)?.slice_f64(slice);
        let preds = backbone::predict(model, &image)?;
        match refine_labels_with_source(&image, &preds, &self.cfg.selection, &self.cfg.crf) {
            Ok(r) => Ok(r.into_iter().map(|(_, m)| m.mask).collect()),
            Err(e) => {
                self.log
                    .warnings
                    .push(format!("refinement failed on {}: {e}", slice_tag(vid, slice)));
                Ok(Vec::new())
            }
        }
    }

    /// Train/refine passes over `slices`, warm-starting from the current model.
    fn self_train(&mut self, slices: &[(String, usize)], radius: usize) -> Result<(), PipelineError> {
        if slices.is_empty() {
            return Err(PipelineError::NoLabels);
        }
        let bcfg = self.cfg.backbone_config();
        let mut last_loss: Option<f64> = None;
        for iteration in 1..=self.cfg.self_train_iterations {
            let samples = self.samples(slices)?;
            let before = self.model.as_ref().map_or(0, |m| m.training_log.len());
            let model = backbone::train(&samples, &bcfg, self.model.as_ref())?;
            self.checkpoints.push(model.clone());
            let checkpoint = self.checkpoints.len();
            let mut counts: BTreeMap<String, usize> = BTreeMap::new();
            let mut fallback = Vec::new();
            for (vid, s) in slices {
                let refined = self.refine(&model, vid, *s)?;
                let (prev_it, prev) = self
                    .store
                    .latest(vid, *s)
                    .map(|(i, e)| (i, e.clone()))
                    .ok_or(PipelineError::NoLabels)?;
                let next_it = prev_it + 1;
                let entry = if refined.is_empty() {
                    fallback.push(slice_tag(vid, *s));
                    LabelEntry {
                        masks: prev.masks.clone(),
                        generation: checkpoint as u32,
                        fallback: true,
                    }
                } else {
                    let ids = inherit_ids(&refined, &prev.masks);
                    let masks = refined
                        .into_iter()
                        .zip(ids)
                        .map(|(m, id)| InstanceMask::new(id, m, Provenance::CrfRefined, next_it))
                        .collect::<Result<Vec<_>, _>>()?;
                    LabelEntry {
                        masks,
                        generation: checkpoint as u32,
                        fallback: false,
                    }
                };
                for m in &entry.masks {
                    *counts.entry(m.provenance.as_str().to_string()).or_default() += 1;
                }
                self.store.insert(vid, *s, next_it, entry)?;
            }
            let losses = model.training_log[before..].to_vec();
            let final_loss = losses.last().map(|l| l.total);
            self.log.stages.push(StageRecord {
                radius,
                iteration,
                checkpoint,
                training_slices: slices.len(),
                losses,
                provenance_counts: counts,
                fallback,
            });
            self.model = Some(model);
            if let (Some(tol), Some(prev), Some(cur)) = (self.cfg.early_stop_rel_tol, last_loss, final_loss) {
                if (prev - cur).abs() <= tol * prev.abs() {
                    break;
                }
            }
            last_loss = final_loss;
        }
        Ok(())
    }

    fn labelled_within(&self, mids: &BTreeMap<String, usize>, k: usize) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for (vid, &m) in mids {
            for s in self.store.slices(vid) {
                if s.abs_diff(m) <= k {
                    out.push((vid.clone(), s));
                }
            }
        }
        out
    }

    fn propagate(&mut self) -> Result<(), PipelineError> {
        let mids = annotated_slices(&self.store);
        for k in 1..=self.cfg.propagation_radius {
            let model = self.model.clone().ok_or(PipelineError::NoLabels)?;
            let generation = self.checkpoints.len() as u32;
            for (vid, &m) in &mids {
                let n = find(self.volumes, vid)?.num_slices();
                for (s, toward) in [(m.checked_sub(k), 1isize), (Some(m + k), -1)] {
                    let Some(s) = s.filter(|&s| s < n) else {
                        self.log.warnings.push(format!(
                            "{vid}: radius {k} truncated, volume has {n} slices around {m}"
                        ));
                        continue;
                    };
                    let refined = self.refine(&model, vid, s)?;
                    if refined.is_empty() {
                        self.log.excluded.push(slice_tag(vid, s));
                        continue;
                    }
                    let inner = (s as isize + toward) as usize;
                    let reference = self
                        .store
                        .latest(vid, inner)
                        .map(|(_, e)| e.masks.clone())
                        .unwrap_or_default();
                    let ids = inherit_ids(&refined, &reference);
                    let masks = refined
                        .into_iter()
                        .zip(ids)
                        .map(|(m, id)| InstanceMask::new(id, m, Provenance::CrfRefined, 0))
                        .collect::<Result<Vec<_>, _>>()?;
                    self.store.insert(
                        vid,
                        s,
                        0,
                        LabelEntry {
                            masks,
                            generation,
                            fallback: false,
                        },
                    )?;
                }
            }
            let slices = self.labelled_within(&mids, k);
            self.self_train(&slices, k)?;
        }
        Ok(())
    }

    fn finish(self) -> Result<PipelineOutput, PipelineError> {
        Ok(PipelineOutput {
            model: self.model.ok_or(PipelineError::NoLabels)?,
            store: self.store,
            checkpoints: self.checkpoints,
            log: self.log,
        })
    }
}

/// Self-training on the annotated slices held in `store`.
pub fn self_train(
    volumes: &[Volume],
    store: LabelStore,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput, PipelineError> {
    cfg.validate()?;
    let mut runner = Runner {
        cfg,
        volumes,
        store,
        model: None,
        checkpoints: Vec::new(),
        log: RunLog::default(),
    };
    let mids = annotated_slices(&runner.store);
    let slices: Vec<(String, usize)> = mids.into_iter().collect();
    runner.self_train(&slices, 0)?;
    runner.finish()
}

/// Extends a self-trained run outwards from the annotated slices.
pub fn slice_propagate(
    volumes: &[Volume],
    run: PipelineOutput,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput, PipelineError> {
    cfg.validate()?;
    let mut runner = Runner {
        cfg,
        volumes,
        store: run.store,
        model: Some(run.model),
        checkpoints: run.checkpoints,
        log: run.log,
    };
    runner.propagate()?;
    runner.finish()
}

/// Coarse labels, self-training and propagation in one call.
pub fn run_pipeline(
    volumes: &[Volume],
    annotations: &[LandmarkAnnotation],
    cfg: &PipelineConfig,
) -> Result<PipelineOutput, PipelineError> {
    let store = build_coarse_labels(annotations, volumes)?;
    let run = self_train(volumes, store, cfg)?;
    slice_propagate(volumes, run, cfg)
}

struct Placed {
    mask: Mask2,
    centroid: Point,
}

fn place(masks: &[InstanceMask]) -> Vec<Placed> {
    let mut out: Vec<Placed> = masks
        .iter()
        .filter_map(|m| {
            mask_centroid(&m.mask).map(|c| Placed {
                mask: m.mask.clone(),
                centroid: c,
            })
        })
        .collect();
    // content order makes linking independent of input order
    out.sort_by(|a, b| {
        a.centroid
            .y
            .total_cmp(&b.centroid.y)
            .then(a.centroid.x.total_cmp(&b.centroid.x))
            .then_with(|| a.mask.iter().cmp(b.mask.iter()))
    });
    out
}

/// Stacks the final masks of slices within `radius` of `mid` into an instance
/// labelmap. Ids are numbered from 1 on the middle slice by centroid row and
/// carried outwards by overlap with the nearest labelled slice.
pub fn assemble_volume(
    store: &LabelStore,
    volume_id: &str,
    dims: (usize, usize, usize),
    mid: usize,
    radius: usize,
) -> (Array3<i16>, Vec<String>) {
    let mut out = Array3::<i16>::zeros(dims);
    let mut warnings = Vec::new();
    let mut next_id: i16 = 1;
    let load = |s: usize| store.latest(volume_id, s).map(|(_, e)| place(&e.masks));
    let paint = |out: &mut Array3<i16>, s: usize, labelled: &[(i16, Placed)]| {
        let mut order: Vec<&(i16, Placed)> = labelled.iter().collect();
        order.sort_by_key(|(id, _)| *id);
        for (id, p) in order {
            for ((y, x), &v) in p.mask.indexed_iter() {
                if v {
                    out[[s, y, x]] = *id;
                }
            }
        }
    };
    if mid >= dims.0 {
        warnings.push(format!("{volume_id}: middle slice {mid} outside volume"));
        return (out, warnings);
    }
    let centre: Vec<(i16, Placed)> = match load(mid) {
        Some(ps) => ps
            .into_iter()
            .map(|p| {
                let id = next_id;
                next_id += 1;
                (id, p)
            })
            .collect(),
        None => {
            warnings.push(format!("{volume_id}: no labels on slice {mid}"));
            Vec::new()
        }
    };
    paint(&mut out, mid, &centre);
    for dir in [-1isize, 1] {
        let mut prev: Vec<(i16, Placed)> = centre
            .iter()
            .map(|(id, p)| {
                (
                    *id,
                    Placed {
                        mask: p.mask.clone(),
                        centroid: p.centroid,
                    },
                )
            })
            .collect();
        for k in 1..=radius {
            let s = mid as isize + dir * k as isize;
            if s < 0 || s as usize >= dims.0 {
                break;
            }
            let s = s as usize;
            let Some(cur) = load(s) else {
                warnings.push(format!("{volume_id}: slice {s} missing, left as background"));
                continue;
            };
            let mut pairs = Vec::new();
            for (i, c) in cur.iter().enumerate() {
                for (j, (pid, p)) in prev.iter().enumerate() {
                    let o = c.mask.iter().zip(p.mask.iter()).filter(|(a, b)| **a && **b).count();
                    if o > 0 {
                        pairs.push((o, c.centroid.dist(p.centroid), *pid, i, j));
                    }
                }
            }
            pairs.sort_by(|a, b| {
                b.0.cmp(&a.0)
                    .then(a.1.total_cmp(&b.1))
                    .then(a.2.cmp(&b.2))
                    .then(a.3.cmp(&b.3))
            });
            let mut ids: Vec<Option<i16>> = vec![None; cur.len()];
            let mut used = BTreeSet::new();
            for (_, _, pid, i, j) in pairs {
                if ids[i].is_none() && !used.contains(&j) {
                    used.insert(j);
                    ids[i] = Some(pid);
                }
            }
            let labelled: Vec<(i16, Placed)> = cur
                .into_iter()
                .zip(ids)
                .map(|(p, id)| {
                    let id = id.unwrap_or_else(|| {
                        let id = next_id;
                        next_id += 1;
                        id
                    });
                    (id, p)
                })
                .collect();
            paint(&mut out, s, &labelled);
            prev = labelled;
        }
    }
    (out, warnings)
}

/// How predictions become masks at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// Objectness and pixel thresholds only.
    Raw,
    /// Confident selection followed by the CRF.
    Refined,
}

/// Masks for one slice of an unseen volume.
pub fn infer_slice(
    model: &TrainedModel,
    image: &ndarray::Array2<f64>,
    cfg: &PipelineConfig,
    mode: InferenceMode,
) -> Result<Vec<InstanceMask>, PipelineError> {
    let preds: Vec<InstancePrediction> = backbone::predict(model, image)?;
    match mode {
        InferenceMode::Raw => {
            let (h, w) = image.dim();
            let mut out = Vec::new();
            for (i, p) in preds.iter().enumerate() {
                if p.objectness < cfg.selection.t1_objectness {
                    continue;
                }
                let m = p.full_prob(h, w).mapv(|v| v >= cfg.selection.t2_pixel);
                if m.iter().any(|&v| v) {
                    out.push(InstanceMask::new(format!("roi{i}"), m, Provenance::Selected, 0)?);
                }
            }
            Ok(out)
        }
        InferenceMode::Refined => Ok(refine_labels_with_source(image, &preds, &cfg.selection, &cfg.crf)?
            .into_iter()
            .map(|(_, m)| m)
            .collect()),
    }
}

/// Segments slices `mid ± radius` of an unseen volume into a store holding one
/// entry per slice at iteration 0.
pub fn infer_volume(
    model: &TrainedModel,
    volume: &Volume,
    mid: usize,
    cfg: &PipelineConfig,
    mode: InferenceMode,
) -> Result<LabelStore, PipelineError> {
    let mut store = LabelStore::new();
    let n = volume.num_slices();
    let lo = mid.saturating_sub(cfg.propagation_radius);
    let hi = (mid + cfg.propagation_radius).min(n.saturating_sub(1));
    for s in lo..=hi {
        let masks = infer_slice(model, &volume.slice_f64(s), cfg, mode)?;
        if !masks.is_empty() {
            store.insert(
                volume.id(),
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
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(shape: (usize, usize), y0: usize, x0: usize, n: usize) -> Mask2 {
        Mask2::from_shape_fn(shape, |(y, x)| (y0..y0 + n).contains(&y) && (x0..x0 + n).contains(&x))
    }

    fn mask(id: &str, m: Mask2) -> InstanceMask {
        InstanceMask::new(id, m, Provenance::CrfRefined, 0).unwrap()
    }

    #[test]
    fn inherited_ids_follow_overlap() {
        let shape = (20, 20);
        let reference = vec![mask("A", square(shape, 0, 0, 5)), mask("B", square(shape, 10, 10, 5))];
        let new = vec![square(shape, 11, 11, 5), square(shape, 1, 1, 5), square(shape, 0, 15, 3)];
        assert_eq!(inherit_ids(&new, &reference), vec!["B", "A", "U1"]);
    }

    #[test]
    fn config_violations_collect_nested() {
        let mut cfg = PipelineConfig {
            self_train_iterations: 0,
            ..PipelineConfig::default()
        };
        cfg.backbone.edge_loss_alpha = -1.0;
        cfg.selection.t1_objectness = 2.0;
        cfg.crf.spatial_sigma_xy = 0.0;
        assert_eq!(cfg.violations().len(), 4);
    }

    fn store_with(slices: &[(usize, Vec<InstanceMask>)]) -> LabelStore {
        let mut st = LabelStore::new();
        for (s, masks) in slices {
            st.insert(
                "v",
                *s,
                0,
                LabelEntry {
                    masks: masks.clone(),
                    generation: 0,
                    fallback: false,
                },
            )
            .unwrap();
        }
        st
    }

    #[test]
    fn single_slice_store_fills_only_that_slice() {
        let shape = (12, 12);
        let st = store_with(&[(2, vec![mask("a", square(shape, 1, 1, 3)), mask("b", square(shape, 6, 6, 3))])]);
        let (vol, warnings) = assemble_volume(&st, "v", (5, 12, 12), 2, 0);
        assert!(warnings.is_empty());
        for s in [0, 1, 3, 4] {
            assert!(vol.index_axis(ndarray::Axis(0), s).iter().all(|&v| v == 0));
        }
        assert_eq!(vol[[2, 2, 2]], 1);
        assert_eq!(vol[[2, 7, 7]], 2);
    }

    #[test]
    fn assembly_links_by_overlap_and_is_order_invariant() {
        let shape = (16, 16);
        let a = |dy: usize| mask("x", square(shape, 1 + dy, 2, 4));
        let b = |dy: usize| mask("y", square(shape, 9 + dy, 3, 4));
        let slices = vec![
            (1, vec![b(1), a(1)]),
            (2, vec![a(0), b(0)]),
            (3, vec![b(0), a(1)]),
        ];
        let st = store_with(&slices);
        let (vol, _) = assemble_volume(&st, "v", (5, 16, 16), 2, 1);
        for s in 1..=3 {
            assert_eq!(vol[[s, 3, 3]], 1, "slice {s}");
            assert_eq!(vol[[s, 11, 4]], 2, "slice {s}");
        }
        let reversed: Vec<(usize, Vec<InstanceMask>)> = slices
            .iter()
            .map(|(s, m)| (*s, m.iter().rev().cloned().collect()))
            .collect();
        let (vol2, _) = assemble_volume(&store_with(&reversed), "v", (5, 16, 16), 2, 1);
        assert_eq!(vol, vol2);
        // slices outside the radius stay empty
        let (narrow, _) = assemble_volume(&st, "v", (5, 16, 16), 2, 0);
        assert!(narrow.index_axis(ndarray::Axis(0), 1).iter().all(|&v| v == 0));
    }

    #[test]
    fn missing_slice_is_reported() {
        let shape = (8, 8);
        let st = store_with(&[(2, vec![mask("a", square(shape, 1, 1, 3))])]);
        let (_, warnings) = assemble_volume(&st, "v", (5, 8, 8), 2, 1);
        assert_eq!(warnings.len(), 2);
    }
}
