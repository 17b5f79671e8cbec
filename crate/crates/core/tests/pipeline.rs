mod support;

use std::collections::BTreeSet;

use wiss_core::backbone::{self, BackboneConfig, TrainingSample};
use wiss_core::experiment::masks_to_labelmap;
use wiss_core::geometry::rasterize_quadrilateral;
use wiss_core::metrics::{per_vertebra_report, HausdorffMode, Metric};
use wiss_core::phantom::{generate_phantom, Phantom, PhantomSpec};
use wiss_core::pipeline::{
    assemble_volume, build_coarse_labels, run_pipeline, self_train, slice_propagate,
    PipelineConfig,
};
use wiss_core::refinement::{refine_labels, select_confident};
use wiss_core::{Provenance, Volume};

fn phantoms(seeds: impl IntoIterator<Item = u64>, n_vertebrae: usize) -> Vec<Phantom> {
    seeds
        .into_iter()
        .map(|seed| {
            generate_phantom(&PhantomSpec {
                seed,
                n_vertebrae,
                ..PhantomSpec::default()
            })
            .unwrap()
        })
        .collect()
}

fn split(ps: &[Phantom]) -> (Vec<Volume>, Vec<wiss_core::LandmarkAnnotation>) {
    (
        ps.iter().map(|p| p.volume.clone()).collect(),
        ps.iter().map(|p| p.annotation.clone()).collect(),
    )
}

fn quick(iterations: usize, radius: usize, epochs: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        self_train_iterations: iterations,
        propagation_radius: radius,
        ..PipelineConfig::default()
    };
    cfg.backbone.epochs = epochs;
    cfg
}

fn slice_dice(pred: &[wiss_core::InstanceMask], p: &Phantom) -> Vec<f64> {
    let m = p.annotation.slice_index;
    let truth = p.truth_labelmap().slice(ndarray::s![m..m + 1, .., ..]).to_owned();
    let pred = masks_to_labelmap(pred, p.volume.slice_shape());
    per_vertebra_report(p.volume.id(), &pred, &truth, p.volume.spacing(), &[Metric::Dic], HausdorffMode::Max)
        .unwrap()
        .rows
        .iter()
        .filter(|r| r.metric == Metric::Dic)
        .map(|r| r.value.unwrap())
        .collect()
}

#[test]
fn coarse_labels_are_rasterized_landmarks() {
    let ps = phantoms([7], 3);
    let (vols, anns) = split(&ps);
    let store = build_coarse_labels(&anns, &vols).unwrap();
    let m = anns[0].slice_index;
    assert_eq!(store.len(), 1);
    let entry = store.get(vols[0].id(), m, 0).unwrap();
    assert_eq!(entry.masks.len(), 3);
    for (mask, v) in entry.masks.iter().zip(&anns[0].vertebrae) {
        assert_eq!(mask.provenance, Provenance::Coarse);
        assert_eq!(mask.iteration, 0);
        assert_eq!(mask.mask, rasterize_quadrilateral(&v.corners, vols[0].slice_shape()).unwrap());
    }
}

#[test]
fn coarse_dice_against_truth_matches_golden() {
    let ps = phantoms(0..20, 4);
    let (vols, anns) = split(&ps);
    let store = build_coarse_labels(&anns, &vols).unwrap();
    let mut all = Vec::new();
    for p in &ps {
        let e = store.get(p.volume.id(), p.annotation.slice_index, 0).unwrap();
        all.extend(slice_dice(&e.masks, p));
    }
    let min = all.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    support::golden("coarse_dice", &serde_json::json!({ "min": min, "mean": mean, "count": all.len() }));
    assert_eq!(all.len(), 80);
    assert!(min >= 85.0, "{min}");
}

#[test]
fn one_iteration_adds_one_label_generation() {
    let ps = phantoms([1, 2], 4);
    let (vols, anns) = split(&ps);
    let store = build_coarse_labels(&anns, &vols).unwrap();
    let out = self_train(&vols, store, &quick(1, 0, 10)).unwrap();
    assert_eq!(out.checkpoints.len(), 1);
    assert_eq!(out.log.stages.len(), 1);
    for (v, a) in vols.iter().zip(&anns) {
        assert_eq!(out.store.slices(v.id()), vec![a.slice_index]);
        assert_eq!(out.store.iterations(v.id(), a.slice_index), vec![0, 1]);
    }
}

#[test]
fn zero_radius_propagation_changes_nothing() {
    let ps = phantoms([3], 4);
    let (vols, anns) = split(&ps);
    let cfg = quick(1, 0, 5);
    let st = self_train(&vols, build_coarse_labels(&anns, &vols).unwrap(), &cfg).unwrap();
    let (store, log, model) = (st.store.clone(), st.log.clone(), st.model.clone());
    let out = slice_propagate(&vols, st, &cfg).unwrap();
    assert_eq!(out.store, store);
    assert_eq!(out.log, log);
    assert_eq!(out.model, model);
}

#[test]
fn runs_are_deterministic() {
    let ps = phantoms([4, 5], 4);
    let (vols, anns) = split(&ps);
    let cfg = quick(1, 1, 5);
    let a = run_pipeline(&vols, &anns, &cfg).unwrap();
    let b = run_pipeline(&vols, &anns, &cfg).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.store, b.store);
    assert_eq!(a.checkpoints, b.checkpoints);
}

#[test]
fn propagation_covers_offsets_and_assembles_three_bodies() {
    let ps = phantoms([21, 22, 23], 3);
    let (vols, anns) = split(&ps);
    let cfg = quick(2, 2, 50);
    let out = run_pipeline(&vols, &anns, &cfg).unwrap();
    for (v, a) in vols.iter().zip(&anns) {
        let m = a.slice_index as i64;
        let offsets: BTreeSet<i64> = out.store.slices(v.id()).iter().map(|&s| s as i64 - m).collect();
        assert_eq!(offsets, (-2..=2).collect());
        let (labels, warnings) = assemble_volume(&out.store, v.id(), v.dims(), a.slice_index, 2);
        assert!(warnings.is_empty(), "{warnings:?}");
        let comps = support::components_3d(&labels);
        assert_eq!(comps.len(), 3, "{comps:?}");
        let ids: BTreeSet<i16> = comps.iter().map(|c| c.0).collect();
        assert_eq!(ids.len(), 3);
        assert!(comps.iter().all(|c| c.2 <= 5));
        for s in out.store.slices(v.id()) {
            let (_, e) = out.store.latest(v.id(), s).unwrap();
            let fg = support::union(&e.masks, v.slice_shape());
            let painted = labels.index_axis(ndarray::Axis(0), s).mapv(|l| l != 0);
            assert_eq!(painted, fg);
        }
    }
}

#[test]
fn refinement_does_not_lower_dice_on_held_out_slices() {
    let train: Vec<TrainingSample> = support::coarse_samples(0..20).into_iter().map(|(_, s)| s).collect();
    let model = backbone::train(&train, &BackboneConfig::default(), None).unwrap();
    let cfg = PipelineConfig::default();
    let (mut refined, mut selected) = (Vec::new(), Vec::new());
    for p in phantoms(1000..1020, 4) {
        let image = p.volume.slice_f64(p.annotation.slice_index);
        let preds = backbone::predict(&model, &image).unwrap();
        let sel = select_confident(&preds, image.dim(), &cfg.selection);
        selected.extend(slice_dice(&sel.kept, &p));
        let r = refine_labels(&image, &preds, &cfg.selection, &cfg.crf).unwrap();
        refined.extend(slice_dice(&r, &p));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (r, s) = (mean(&refined), mean(&selected));
    support::golden("refinement_means", &serde_json::json!({ "refined": r, "selected_only": s }));
    assert!(r >= s, "refined {r} < selected {s}");
}
