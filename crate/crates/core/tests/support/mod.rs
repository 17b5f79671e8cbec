//! Reference implementations used as oracles by the integration tests. They
//! favour the most literal formulation over speed and share no code with the
//! library beyond its data types.
#![allow(dead_code)]

use ndarray::{Array2, Array3};
use wiss_core::metrics::Confusion;
use wiss_core::refinement::CrfConfig;
use wiss_core::{InstancePrediction, Mask2, Spacing};

pub fn confusion_loop(pred: &Array3<bool>, gt: &Array3<bool>) -> Confusion {
    let mut c = Confusion::default();
    for (p, g) in pred.iter().zip(gt) {
        match (*p, *g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

pub fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| 100.0 * num as f64 / den as f64)
}

/// Voxels with at least one 6-neighbour outside the mask or outside the grid.
pub fn boundary(m: &Array3<bool>) -> Vec<[usize; 3]> {
    let (d, h, w) = m.dim();
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !m[[z, y, x]] {
                    continue;
                }
                let p = [z as isize, y as isize, x as isize];
                let edge = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]]
                    .iter()
                    .any(|o| {
                        let q = [p[0] + o[0], p[1] + o[1], p[2] + o[2]];
                        q.iter().any(|&v| v < 0)
                            || q[0] as usize >= d
                            || q[1] as usize >= h
                            || q[2] as usize >= w
                            || !m[[q[0] as usize, q[1] as usize, q[2] as usize]]
                    });
                if edge {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// All-pairs surface distances: `(asd, max hausdorff)`.
pub fn surface_distances_brute(a: &Array3<bool>, b: &Array3<bool>, sp: Spacing) -> (f64, f64) {
    let sa = boundary(a);
    let sb = boundary(b);
    let dist = |p: &[usize; 3], q: &[usize; 3]| {
        let dz = (p[0] as f64 - q[0] as f64) * sp.slice;
        let dy = (p[1] as f64 - q[1] as f64) * sp.row;
        let dx = (p[2] as f64 - q[2] as f64) * sp.col;
        (dz * dz + dy * dy + dx * dx).sqrt()
    };
    let nearest = |from: &[[usize; 3]], to: &[[usize; 3]]| -> Vec<f64> {
        from.iter()
            .map(|p| to.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min))
            .collect()
    };
    let ab = nearest(&sa, &sb);
    let ba = nearest(&sb, &sa);
    let asd = 0.5 * (ab.iter().sum::<f64>() / ab.len() as f64 + ba.iter().sum::<f64>() / ba.len() as f64);
    let hsd = ab.iter().chain(&ba).copied().fold(0.0, f64::max);
    (asd, hsd)
}

/// `mean sqrt((∂x M − ∂x G)² + (∂y M − ∂y G)² + ε)` with central differences
/// inside and one-sided differences at the border.
pub fn edge_loss_direct(m: &Array2<f64>, g: &Array2<f64>, eps: f64) -> f64 {
    let (h, w) = m.dim();
    let dx = |a: &Array2<f64>, y: usize, x: usize| {
        if x == 0 {
            a[[y, 1]] - a[[y, 0]]
        } else if x == w - 1 {
            a[[y, w - 1]] - a[[y, w - 2]]
        } else {
            0.5 * (a[[y, x + 1]] - a[[y, x - 1]])
        }
    };
    let dy = |a: &Array2<f64>, y: usize, x: usize| {
        if y == 0 {
            a[[1, x]] - a[[0, x]]
        } else if y == h - 1 {
            a[[h - 1, x]] - a[[h - 2, x]]
        } else {
            0.5 * (a[[y + 1, x]] - a[[y - 1, x]])
        }
    };
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let ex = dx(m, y, x) - dx(g, y, x);
            let ey = dy(m, y, x) - dy(g, y, x);
            total += (ex * ex + ey * ey + eps).sqrt();
        }
    }
    total / (h * w) as f64
}

/// Dense binary mean field with every pairwise weight recomputed on demand.
pub fn crf_naive(image: &Array2<f64>, prob: &Array2<f64>, cfg: &CrfConfig) -> Mask2 {
    let (h, w) = image.dim();
    let n = h * w;
    let g = |d2: f64, s: f64| (-d2 / (2.0 * s * s)).exp();
    let k = |i: usize, j: usize| {
        let (yi, xi, yj, xj) = (i / w, i % w, j / w, j % w);
        let dy = yi.abs_diff(yj);
        let dx = xi.abs_diff(xj);
        let d2 = (dx * dx + dy * dy) as f64;
        let di = image[[yi, xi]] - image[[yj, xj]];
        cfg.appearance_weight * (g(d2, cfg.appearance_sigma_xy) * g(di * di, cfg.appearance_sigma_intensity))
            + cfg.spatial_weight * g(d2, cfg.spatial_sigma_xy)
    };
    let p: Vec<f64> = prob.iter().map(|v| v.clamp(1e-5, 1.0 - 1e-5)).collect();
    let u_fg: Vec<f64> = p.iter().map(|v| -v.ln()).collect();
    let u_bg: Vec<f64> = p.iter().map(|v| -(1.0 - v).ln()).collect();
    let mut q = p.clone();
    let mut e_fg = u_fg.clone();
    let mut e_bg = u_bg.clone();
    for _ in 0..cfg.n_iterations {
        let mut mf = vec![0.0; n];
        let mut mb = vec![0.0; n];
        for i in 0..n {
            for (j, &qj) in q.iter().enumerate() {
                if i != j {
                    let kij = k(i, j);
                    mf[i] += kij * qj;
                    mb[i] += kij * (1.0 - qj);
                }
            }
        }
        for i in 0..n {
            e_fg[i] = u_fg[i] + mb[i];
            e_bg[i] = u_bg[i] + mf[i];
            q[i] = 1.0 / (1.0 + (e_fg[i] - e_bg[i]).exp());
        }
    }
    Array2::from_shape_fn((h, w), |(y, x)| e_fg[y * w + x] <= e_bg[y * w + x])
}

/// Two-region image: intensity 1000 left of column `edge`, 0 from it on; the
/// probability map claims foreground with 0.7 up to `edge + over` and 0.3
/// elsewhere.
pub fn two_region_case(n: usize, edge: usize, over: usize) -> (Array2<f64>, Array2<f64>, Mask2) {
    let image = Array2::from_shape_fn((n, n), |(_, x)| if x < edge { 1000.0 } else { 0.0 });
    let prob = Array2::from_shape_fn((n, n), |(_, x)| if x < edge + over { 0.7 } else { 0.3 });
    let truth = Array2::from_shape_fn((n, n), |(_, x)| x < edge);
    (image, prob, truth)
}

pub fn mismatches(a: &Mask2, b: &Mask2) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Largest distance, in columns, between a refined row boundary and `edge`.
pub fn max_boundary_offset(m: &Mask2, edge: usize) -> usize {
    m.rows()
        .into_iter()
        .map(|row| {
            let fg = row.iter().filter(|&&v| v).count();
            fg.abs_diff(edge)
        })
        .max()
        .unwrap_or(0)
}

/// Six ROIs: five centred on a random line through the image, one displaced
/// sideways by ten median heights. Returns the predictions and the outlier's
/// index.
pub fn collinear_with_outlier(rng: &mut impl rand::Rng) -> (Vec<InstancePrediction>, usize, (usize, usize)) {
    use wiss_core::BBox;
    let shape = (600usize, 600usize);
    let height = rng.random_range(14..=24usize);
    let width = rng.random_range(24..=40usize);
    let gap = rng.random_range(4..=10usize);
    let slope: f64 = rng.random_range(-0.3..0.3);
    let y_start = rng.random_range(40..80usize);
    let x_anchor: f64 = rng.random_range(250.0..350.0);
    let line = |y: f64| x_anchor + slope * (y - 200.0);
    let mut boxes = Vec::new();
    for k in 0..5 {
        let y0 = y_start + k * (height + gap);
        let cy = y0 as f64 + height as f64 / 2.0;
        let x0 = (line(cy) - width as f64 / 2.0).round() as usize;
        boxes.push(BBox::new(x0, y0, x0 + width, y0 + height).unwrap());
    }
    let k = rng.random_range(0..5usize);
    let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let y0 = boxes[k].y0 + rng.random_range(0..=height / 2);
    let cy = y0 as f64 + height as f64 / 2.0;
    let x0 = (line(cy) + side * 10.0 * height as f64 - width as f64 / 2.0).round() as usize;
    let outlier_box = BBox::new(x0, y0, x0 + width, y0 + height).unwrap();
    let at = rng.random_range(0..=5usize);
    boxes.insert(at, outlier_box);
    let preds = boxes
        .into_iter()
        .map(|b| InstancePrediction {
            objectness: rng.random_range(0.92..1.0),
            bbox: b,
            prob_map: Array2::from_elem((b.height(), b.width()), 0.8),
        })
        .collect();
    (preds, at, shape)
}

/// Compares `value` with `tests/golden/<name>.json`, numbers within 1e-9
/// relative. Set `WISS_BLESS=1` to rewrite the file instead.
pub fn golden(name: &str, value: &serde_json::Value) {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(format!("{name}.json"));
    if std::env::var_os("WISS_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, serde_json::to_string_pretty(value).unwrap() + "\n").unwrap();
        return;
    }
    let text = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e} (run with WISS_BLESS=1 to create)", path.display()));
    let stored: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(json_close(&stored, value), "golden {name} differs:\nstored {stored}\nactual {value}");
}

fn json_close(a: &serde_json::Value, b: &serde_json::Value) -> bool {
    use serde_json::Value::*;
    match (a, b) {
        (Number(x), Number(y)) => {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            (x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1.0)
        }
        (Array(x), Array(y)) => x.len() == y.len() && x.iter().zip(y).all(|(p, q)| json_close(p, q)),
        (Object(x), Object(y)) => {
            x.len() == y.len() && x.iter().all(|(k, v)| y.get(k).is_some_and(|w| json_close(v, w)))
        }
        _ => a == b,
    }
}

/// Mid-slice image and coarse labels of the default phantom with each seed.
pub fn coarse_samples(seeds: std::ops::Range<u64>) -> Vec<(wiss_core::phantom::Phantom, wiss_core::backbone::TrainingSample)> {
    use wiss_core::phantom::{generate_phantom, PhantomSpec};
    seeds
        .map(|seed| {
            let p = generate_phantom(&PhantomSpec { seed, ..PhantomSpec::default() }).unwrap();
            let m = p.annotation.slice_index;
            let store = wiss_core::pipeline::build_coarse_labels(
                std::slice::from_ref(&p.annotation),
                std::slice::from_ref(&p.volume),
            )
            .unwrap();
            let labels = store.get(p.volume.id(), m, 0).unwrap().masks.clone();
            let sample = wiss_core::backbone::TrainingSample {
                image: p.volume.slice_f64(m),
                labels,
            };
            (p, sample)
        })
        .collect()
}

/// Union of instance masks.
pub fn union(masks: &[wiss_core::InstanceMask], shape: (usize, usize)) -> Mask2 {
    let mut out = Array2::from_elem(shape, false);
    for m in masks {
        out.zip_mut_with(&m.mask, |a, &b| *a |= b);
    }
    out
}

pub fn dice2(a: &Mask2, b: &Mask2) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let total = a.iter().filter(|&&x| x).count() + b.iter().filter(|&&x| x).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

/// 6-connected components of the nonzero voxels with the same label, by
/// flood fill. Returns `(label, voxel count, slices spanned)` per component.
pub fn components_3d(labels: &Array3<i16>) -> Vec<(i16, usize, usize)> {
    let (d, h, w) = labels.dim();
    let mut seen = Array3::from_elem((d, h, w), false);
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let l = labels[[z, y, x]];
                if l == 0 || seen[[z, y, x]] {
                    continue;
                }
                let mut stack = vec![(z, y, x)];
                seen[[z, y, x]] = true;
                let mut count = 0;
                let (mut zlo, mut zhi) = (z, z);
                while let Some((cz, cy, cx)) = stack.pop() {
                    count += 1;
                    zlo = zlo.min(cz);
                    zhi = zhi.max(cz);
                    let mut push = |nz: usize, ny: usize, nx: usize| {
                        if labels[[nz, ny, nx]] == l && !seen[[nz, ny, nx]] {
                            seen[[nz, ny, nx]] = true;
                            stack.push((nz, ny, nx));
                        }
                    };
                    if cz > 0 { push(cz - 1, cy, cx); }
                    if cz + 1 < d { push(cz + 1, cy, cx); }
                    if cy > 0 { push(cz, cy - 1, cx); }
                    if cy + 1 < h { push(cz, cy + 1, cx); }
                    if cx > 0 { push(cz, cy, cx - 1); }
                    if cx + 1 < w { push(cz, cy, cx + 1); }
                }
                out.push((l, count, zhi - zlo + 1));
            }
        }
    }
    out
}
