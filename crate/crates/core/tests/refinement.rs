mod support;

use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wiss_core::refinement::{
    crf_refine, refine_labels, refine_labels_with_source, select_confident, CrfConfig,
    SelectionConfig,
};
use wiss_core::{BBox, InstancePrediction, Provenance};

fn pred(objectness: f64, b: (usize, usize, usize, usize), p: f64) -> InstancePrediction {
    let bbox = BBox::new(b.0, b.1, b.2, b.3).unwrap();
    InstancePrediction {
        objectness,
        bbox,
        prob_map: Array2::from_elem((bbox.height(), bbox.width()), p),
    }
}

fn random_case(seed: u64, n: usize) -> (Array2<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = Array2::from_shape_fn((n, n), |(y, x)| {
        let base = if (x + y) < n { 300.0 } else { 60.0 };
        base + rng.random_range(-20.0..20.0)
    });
    let prob = Array2::from_shape_fn((n, n), |_| rng.random::<f64>());
    (image, prob)
}

#[test]
fn single_confident_prediction_is_kept_as_its_box() {
    let p = pred(0.95, (2, 3, 7, 9), 0.8);
    let s = select_confident(std::slice::from_ref(&p), (12, 12), &SelectionConfig::default());
    assert_eq!(s.kept.len(), 1);
    let m = &s.kept[0];
    assert_eq!(m.provenance, Provenance::Selected);
    assert_eq!(m.area(), 5 * 6);
    assert_eq!(m.bbox(), Some(p.bbox));
}

#[test]
fn low_objectness_is_rejected() {
    let p = pred(0.5, (2, 3, 7, 9), 0.8);
    let s = select_confident(std::slice::from_ref(&p), (12, 12), &SelectionConfig::default());
    assert!(s.kept.is_empty());
    assert_eq!(s.rejected, vec![p]);
}

#[test]
fn empty_after_binarization_is_rejected() {
    let p = pred(0.99, (2, 3, 7, 9), 0.2);
    let s = select_confident(&[p], (12, 12), &SelectionConfig::default());
    assert!(s.kept.is_empty());
    assert_eq!(s.rejected.len(), 1);
}

#[test]
fn lateral_outlier_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let (preds, outlier, shape) = support::collinear_with_outlier(&mut rng);
        let s = select_confident(&preds, shape, &SelectionConfig::default());
        let mut expected: Vec<usize> = (0..6).filter(|&i| i != outlier).collect();
        expected.sort_unstable();
        assert_eq!(s.kept_source, expected);
        assert_eq!(s.rejected, vec![preds[outlier].clone()]);
    }
}

#[test]
fn curve_skipped_below_three_rois() {
    let preds = vec![pred(0.95, (10, 10, 30, 30), 0.9), pred(0.95, (300, 40, 320, 60), 0.9)];
    let s = select_confident(&preds, (400, 400), &SelectionConfig::default());
    assert_eq!(s.kept.len(), 2);
}

#[test]
fn crf_without_coupling_is_thresholding() {
    for seed in 0..5 {
        let (image, prob) = random_case(seed, 12);
        let thresholded = prob.mapv(|p| p >= 0.5);
        let no_weights = CrfConfig {
            appearance_weight: 0.0,
            spatial_weight: 0.0,
            ..CrfConfig::default()
        };
        assert_eq!(crf_refine(&image, &prob, &no_weights).unwrap(), thresholded);
        let no_iterations = CrfConfig {
            n_iterations: 0,
            ..CrfConfig::default()
        };
        let once = crf_refine(&image, &prob, &no_iterations).unwrap();
        assert_eq!(once, thresholded);
        assert_eq!(crf_refine(&image, &prob, &no_iterations).unwrap(), once);
    }
}

#[test]
fn crf_matches_naive_reference() {
    for (seed, n) in [(1, 8), (2, 16), (3, 24)] {
        let (image, prob) = random_case(seed, n);
        for cfg in [
            CrfConfig::default(),
            CrfConfig {
                appearance_weight: 0.3,
                spatial_weight: 0.7,
                n_iterations: 3,
                ..CrfConfig::default()
            },
        ] {
            assert_eq!(
                crf_refine(&image, &prob, &cfg).unwrap(),
                support::crf_naive(&image, &prob, &cfg)
            );
        }
    }
}

#[test]
fn crf_recovers_two_region_boundary() {
    let (image, prob, truth) = support::two_region_case(16, 8, 2);
    let cfg = CrfConfig::default();
    let refined = crf_refine(&image, &prob, &cfg).unwrap();
    assert_eq!(refined, support::crf_naive(&image, &prob, &cfg));
    let before = support::mismatches(&prob.mapv(|p| p >= 0.5), &truth);
    let after = support::mismatches(&refined, &truth);
    assert!(after < before, "{after} >= {before}");
    assert!(support::max_boundary_offset(&refined, 8) <= 1);
}

#[test]
fn crf_rejects_shape_mismatch() {
    assert!(crf_refine(&Array2::zeros((4, 4)), &Array2::zeros((4, 5)), &CrfConfig::default()).is_err());
}

#[test]
fn refine_labels_of_nothing_is_nothing() {
    let image = Array2::zeros((16, 16));
    let out = refine_labels(&image, &[], &SelectionConfig::default(), &CrfConfig::default()).unwrap();
    assert!(out.is_empty());
}

#[test]
fn refine_labels_is_selection_then_windowed_crf() {
    let (image, _) = random_case(9, 40);
    let preds = vec![
        pred(0.97, (5, 4, 18, 14), 0.8),
        pred(0.3, (20, 20, 30, 30), 0.9),
        pred(0.95, (22, 22, 36, 34), 0.6),
    ];
    let sel = SelectionConfig::default();
    let crf = CrfConfig::default();
    let out = refine_labels_with_source(&image, &preds, &sel, &crf).unwrap();
    let selection = select_confident(&preds, image.dim(), &sel);
    let mut manual = Vec::new();
    for &src in &selection.kept_source {
        let p = &preds[src];
        let win = p.bbox.dilate(8, 40, 40);
        let view = ndarray::s![win.y0..win.y1, win.x0..win.x1];
        let r = crf_refine(
            &image.slice(view).to_owned(),
            &p.full_prob(40, 40).slice(view).to_owned(),
            &crf,
        )
        .unwrap();
        let mut full = Array2::from_elem((40, 40), false);
        full.slice_mut(view).assign(&r);
        if full.iter().any(|&v| v) {
            manual.push((src, full));
        }
    }
    assert_eq!(out.len(), manual.len());
    for ((src, m), (msrc, mm)) in out.iter().zip(&manual) {
        assert_eq!(src, msrc);
        assert_eq!(&m.mask, mm);
        assert_eq!(m.provenance, Provenance::CrfRefined);
    }
}

fn arb_preds() -> impl Strategy<Value = Vec<InstancePrediction>> {
    prop::collection::vec(
        (0.0..1.0f64, 0usize..60, 0usize..60, 4usize..20, 4usize..20, 0.3..1.0f64),
        0..7,
    )
    .prop_map(|v| {
        v.into_iter()
            .map(|(o, x, y, w, h, p)| pred(o, (x, y, x + w, y + h), p))
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn selection_is_order_insensitive(preds in arb_preds(), seed in any::<u64>()) {
        let cfg = SelectionConfig { t1_objectness: 0.3, ..SelectionConfig::default() };
        let mut perm: Vec<usize> = (0..preds.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let shuffled: Vec<InstancePrediction> = perm.iter().map(|&i| preds[i].clone()).collect();
        let a = select_confident(&preds, (80, 80), &cfg);
        let b = select_confident(&shuffled, (80, 80), &cfg);
        let mut ka: Vec<usize> = a.kept_source.clone();
        let mut kb: Vec<usize> = b.kept_source.iter().map(|&i| perm[i]).collect();
        ka.sort_unstable();
        kb.sort_unstable();
        prop_assert_eq!(ka, kb);
    }

    #[test]
    fn raising_t1_never_adds_instances(preds in arb_preds(), t in 0.05..0.95f64, dt in 0.0..0.5f64) {
        let lo = SelectionConfig { t1_objectness: t, ..SelectionConfig::default() };
        let hi = SelectionConfig { t1_objectness: (t + dt).min(1.0), ..SelectionConfig::default() };
        let a = select_confident(&preds, (80, 80), &lo);
        let b = select_confident(&preds, (80, 80), &hi);
        prop_assert!(b.kept.len() <= a.kept.len());
        for i in &b.kept_source {
            prop_assert!(preds[*i].objectness >= hi.t1_objectness);
        }
    }

    #[test]
    fn crf_without_coupling_thresholds(seed in any::<u64>(), n in 2usize..10) {
        let (image, prob) = random_case(seed, n);
        let cfg = CrfConfig { appearance_weight: 0.0, spatial_weight: 0.0, ..CrfConfig::default() };
        prop_assert_eq!(crf_refine(&image, &prob, &cfg).unwrap(), prob.mapv(|p| p >= 0.5));
    }
}
