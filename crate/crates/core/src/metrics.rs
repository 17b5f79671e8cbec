//! Overlap and surface-distance metrics, per-vertebra reports and
//! difference-map rendering.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{s, Array2, Array3, ArrayBase, Data, Dimension, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::{Mask2, Spacing};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("surface distance undefined: {0} has no surface")]
    UndefinedDistance(&'static str),
    #[error("i/o error writing {path}: {message}")]
    Write { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&self, o: &Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

pub fn confusion_counts<S1, S2, D>(
    pred: &ArrayBase<S1, D>,
    gt: &ArrayBase<S2, D>,
) -> Result<Confusion, MetricsError>
where
    S1: Data<Elem = bool>,
    S2: Data<Elem = bool>,
    D: Dimension,
{
    if pred.shape() != gt.shape() {
        return Err(MetricsError::ShapeMismatch(
            pred.shape().to_vec(),
            gt.shape().to_vec(),
        ));
    }
    let mut c = Confusion::default();
    Zip::from(pred).and(gt).for_each(|&p, &g| match (p, g) {
        (true, true) => c.tp += 1,
        (true, false) => c.fp += 1,
        (false, true) => c.fn_ += 1,
        (false, false) => c.tn += 1,
    });
    Ok(c)
}

/// Dice in percent. Both masks empty counts as perfect agreement.
pub fn dic(c: &Confusion) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        100.0
    } else {
        200.0 * c.tp as f64 / denom as f64
    }
}

pub fn acc(c: &Confusion) -> Option<f64> {
    let total = c.total();
    (total > 0).then(|| 100.0 * (c.tp + c.tn) as f64 / total as f64)
}

/// Sensitivity; missing when there is no ground-truth foreground.
pub fn sen(c: &Confusion) -> Option<f64> {
    let denom = c.tp + c.fn_;
    (denom > 0).then(|| 100.0 * c.tp as f64 / denom as f64)
}

/// Specificity; missing when there is no ground-truth background.
pub fn spe(c: &Confusion) -> Option<f64> {
    let denom = c.tn + c.fp;
    (denom > 0).then(|| 100.0 * c.tn as f64 / denom as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HausdorffMode {
    /// Exact (maximum) Hausdorff distance.
    #[default]
    Max,
    /// Larger of the two directed 95th percentiles.
    Percentile95,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistances {
    pub asd: f64,
    pub hsd: f64,
}

/// Foreground voxels with at least one background 6-neighbor; outside the
/// array counts as background.
pub fn surface_voxels(mask: &Array3<bool>) -> Vec<[usize; 3]> {
    let (d, h, w) = mask.dim();
    let mut out = Vec::new();
    for ((z, y, x), &v) in mask.indexed_iter() {
        if !v {
            continue;
        }
        let border = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
        if border
            || !mask[[z - 1, y, x]]
            || !mask[[z + 1, y, x]]
            || !mask[[z, y - 1, x]]
            || !mask[[z, y + 1, x]]
            || !mask[[z, y, x - 1]]
            || !mask[[z, y, x + 1]]
        {
            out.push([z, y, x]);
        }
    }
    out
}

/// 1D lower-envelope squared distance transform with sample spacing `step`.
fn edt_1d(f: &[f64], step: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    let first = match f.iter().position(|x| x.is_finite()) {
        Some(i) => i,
        None => {
            out.iter_mut().for_each(|o| *o = f64::INFINITY);
            return;
        }
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let w2 = step * step;
    for q in (first + 1)..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + w2 * (q * q) as f64) - (f[p] + w2 * (p * p) as f64))
                / (2.0 * w2 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates everywhere
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    let mut k = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = (q as f64 - p as f64) * step;
        *o = d * d + f[p];
    }
}

/// Squared physical distance from every voxel to the nearest seed voxel.
pub fn squared_distance_transform(seeds: &Array3<bool>, spacing: Spacing) -> Array3<f64> {
    let mut dist = seeds.mapv(|s| if s { 0.0 } else { f64::INFINITY });
    let steps = spacing.to_array();
    for (axis, &step) in steps.iter().enumerate() {
        let len = dist.shape()[axis];
        let mut buf_in = vec![0.0; len];
        let mut buf_out = vec![0.0; len];
        for mut lane in dist.lanes_mut(ndarray::Axis(axis)) {
            for (b, v) in buf_in.iter_mut().zip(lane.iter()) {
                *b = *v;
            }
            edt_1d(&buf_in, step, &mut buf_out);
            for (v, b) in lane.iter_mut().zip(&buf_out) {
                *v = *b;
            }
        }
    }
    dist
}

fn directed(from: &[[usize; 3]], to_dt: &Array3<f64>) -> Vec<f64> {
    from.iter().map(|&[z, y, x]| to_dt[[z, y, x]].sqrt()).collect()
}

fn percentile95(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let rank = (0.95 * (v.len() - 1) as f64).ceil() as usize;
    v[rank.min(v.len() - 1)]
}

/// Average symmetric surface distance and Hausdorff distance in millimeters.
pub fn surface_distances(
    pred: &Array3<bool>,
    gt: &Array3<bool>,
    spacing: Spacing,
    mode: HausdorffMode,
) -> Result<SurfaceDistances, MetricsError> {
    if pred.dim() != gt.dim() {
        return Err(MetricsError::ShapeMismatch(
            pred.shape().to_vec(),
            gt.shape().to_vec(),
        ));
    }
    let sp = surface_voxels(pred);
    let sg = surface_voxels(gt);
    if sp.is_empty() {
        return Err(MetricsError::UndefinedDistance("prediction"));
    }
    if sg.is_empty() {
        return Err(MetricsError::UndefinedDistance("ground truth"));
    }
    let mut seeds_p = Array3::from_elem(pred.dim(), false);
    sp.iter().for_each(|&[z, y, x]| seeds_p[[z, y, x]] = true);
    let mut seeds_g = Array3::from_elem(gt.dim(), false);
    sg.iter().for_each(|&[z, y, x]| seeds_g[[z, y, x]] = true);
    let d_pg = directed(&sp, &squared_distance_transform(&seeds_g, spacing));
    let d_gp = directed(&sg, &squared_distance_transform(&seeds_p, spacing));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let asd = 0.5 * (mean(&d_pg) + mean(&d_gp));
    let hsd = match mode {
        HausdorffMode::Max => {
            let m1 = d_pg.iter().cloned().fold(0.0, f64::max);
            let m2 = d_gp.iter().cloned().fold(0.0, f64::max);
            m1.max(m2)
        }
        HausdorffMode::Percentile95 => percentile95(d_pg).max(percentile95(d_gp)),
    };
    Ok(SurfaceDistances { asd, hsd })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Metric {
    Dic,
    Acc,
    Sen,
    Spe,
    Asd,
    Hsd,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Dic => "DIC",
            Metric::Acc => "ACC",
            Metric::Sen => "SEN",
            Metric::Spe => "SPE",
            Metric::Asd => "ASD",
            Metric::Hsd => "HSD",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            Metric::Asd | Metric::Hsd => "mm",
            _ => "%",
        }
    }

    pub const SLICE_2D: [Metric; 4] = [Metric::Dic, Metric::Acc, Metric::Sen, Metric::Spe];
    pub const VOLUME_3D: [Metric; 3] = [Metric::Dic, Metric::Asd, Metric::Hsd];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub volume_id: String,
    pub vertebra_id: String,
    pub metric: Metric,
    /// `None` when the metric is undefined (e.g. an undetected vertebra's distances).
    pub value: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub scans: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
}

impl MetricsReport {
    pub fn extend(&mut self, other: MetricsReport) {
        self.rows.extend(other.rows);
    }

    /// Mean over the defined per-vertebra values of each scan.
    pub fn per_scan_means(&self) -> BTreeMap<(String, Metric), f64> {
        let mut acc: BTreeMap<(String, Metric), (f64, usize)> = BTreeMap::new();
        for r in &self.rows {
            if let Some(v) = r.value {
                let e = acc.entry((r.volume_id.clone(), r.metric)).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
        }
        acc.into_iter()
            .map(|(k, (s, n))| (k, s / n as f64))
            .collect()
    }

    /// Mean and population standard deviation of per-scan means.
    pub fn summary(&self) -> BTreeMap<Metric, MetricSummary> {
        let mut by_metric: BTreeMap<Metric, Vec<f64>> = BTreeMap::new();
        for ((_, m), v) in self.per_scan_means() {
            by_metric.entry(m).or_default().push(v);
        }
        by_metric
            .into_iter()
            .map(|(m, v)| (m, mean_std(&v)))
            .collect()
    }

    pub fn mean(&self, metric: Metric) -> Option<f64> {
        self.summary().get(&metric).map(|s| s.mean)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), MetricsError> {
        let err = |e: &dyn std::fmt::Display| MetricsError::Write {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(|e| err(&e))?;
        w.write_record(["volume_id", "vertebra_id", "metric", "unit", "value"])
            .map_err(|e| err(&e))?;
        for r in &self.rows {
            let value = r.value.map(|v| format!("{v}")).unwrap_or_default();
            w.write_record([
                r.volume_id.as_str(),
                r.vertebra_id.as_str(),
                r.metric.name(),
                r.metric.unit(),
                value.as_str(),
            ])
            .map_err(|e| err(&e))?;
        }
        w.flush().map_err(|e| err(&e))
    }

    pub fn summary_json(&self) -> serde_json::Value {
        let mut per_scan = serde_json::Map::new();
        for ((vol, m), v) in self.per_scan_means() {
            let entry = per_scan
                .entry(vol)
                .or_insert_with(|| serde_json::Value::Object(Default::default()));
            entry[m.name()] = serde_json::json!(v);
        }
        let mut overall = serde_json::Map::new();
        for (m, s) in self.summary() {
            overall.insert(
                m.name().to_string(),
                serde_json::json!({"mean": s.mean, "std": s.std, "scans": s.scans, "unit": m.unit()}),
            );
        }
        let missing = self.rows.iter().filter(|r| r.value.is_none()).count();
        serde_json::json!({"per_scan": per_scan, "overall": overall, "missing_values": missing})
    }
}

pub fn mean_std(v: &[f64]) -> MetricSummary {
    if v.is_empty() {
        return MetricSummary {
            mean: f64::NAN,
            std: f64::NAN,
            scans: 0,
        };
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    MetricSummary {
        mean,
        std: var.sqrt(),
        scans: v.len(),
    }
}

fn instance_ids(labels: &Array3<i16>) -> Vec<i16> {
    let mut ids: Vec<i16> = labels.iter().copied().filter(|&v| v != 0).collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// Greedy one-to-one matching of ground-truth to predicted instances by
/// overlap (largest first; ties to lower ids).
pub fn match_instances(pred: &Array3<i16>, gt: &Array3<i16>) -> BTreeMap<i16, i16> {
    let mut overlap: BTreeMap<(i16, i16), u64> = BTreeMap::new();
    Zip::from(pred).and(gt).for_each(|&p, &g| {
        if p != 0 && g != 0 {
            *overlap.entry((g, p)).or_insert(0) += 1;
        }
    });
    let mut pairs: Vec<((i16, i16), u64)> = overlap.into_iter().collect();
    pairs.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut used_g = std::collections::BTreeSet::new();
    let mut used_p = std::collections::BTreeSet::new();
    let mut out = BTreeMap::new();
    for ((g, p), _) in pairs {
        if used_g.contains(&g) || used_p.contains(&p) {
            continue;
        }
        used_g.insert(g);
        used_p.insert(p);
        out.insert(g, p);
    }
    out
}

fn bbox3(mask: &Array3<bool>) -> Option<([usize; 3], [usize; 3])> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for ((z, y, x), &v) in mask.indexed_iter() {
        if v {
            any = true;
            for (k, c) in [z, y, x].into_iter().enumerate() {
                lo[k] = lo[k].min(c);
                hi[k] = hi[k].max(c + 1);
            }
        }
    }
    any.then_some((lo, hi))
}

/// Per-vertebra metrics for one scan. Ground-truth instances without a
/// matching prediction score DIC 0 with their distances recorded as missing.
pub fn per_vertebra_report(
    volume_id: &str,
    pred: &Array3<i16>,
    gt: &Array3<i16>,
    spacing: Spacing,
    metrics: &[Metric],
    mode: HausdorffMode,
) -> Result<MetricsReport, MetricsError> {
    if pred.dim() != gt.dim() {
        return Err(MetricsError::ShapeMismatch(
            pred.shape().to_vec(),
            gt.shape().to_vec(),
        ));
    }
    let matches = match_instances(pred, gt);
    let mut report = MetricsReport::default();
    let dims = gt.dim();
    for g in instance_ids(gt) {
        let gmask = gt.mapv(|v| v == g);
        let pmask = match matches.get(&g) {
            Some(&p) => pred.mapv(|v| v == p),
            None => Array3::from_elem(dims, false),
        };
        let c = confusion_counts(&pmask, &gmask)?;
        let need_dist = metrics.iter().any(|m| matches!(m, Metric::Asd | Metric::Hsd));
        let dist = if need_dist && matches.contains_key(&g) {
            // crop to the union box plus one voxel; surface membership only
            // depends on direct neighbors so the crop is exact
            let union = Zip::from(&pmask).and(&gmask).map_collect(|&a, &b| a || b);
            let (lo, hi) = bbox3(&union).expect("non-empty ground truth");
            let lo = lo.map(|v| v.saturating_sub(1));
            let hi = [
                (hi[0] + 1).min(dims.0),
                (hi[1] + 1).min(dims.1),
                (hi[2] + 1).min(dims.2),
            ];
            let crop = s![lo[0]..hi[0], lo[1]..hi[1], lo[2]..hi[2]];
            let pc = pmask.slice(crop).to_owned();
            let gc = gmask.slice(crop).to_owned();
            surface_distances(&pc, &gc, spacing, mode).ok()
        } else {
            None
        };
        for &m in metrics {
            let value = match m {
                Metric::Dic => Some(dic(&c)),
                Metric::Acc => acc(&c),
                Metric::Sen => sen(&c),
                Metric::Spe => spe(&c),
                Metric::Asd => dist.map(|d| d.asd),
                Metric::Hsd => dist.map(|d| d.hsd),
            };
            report.rows.push(MetricRow {
                volume_id: volume_id.to_string(),
                vertebra_id: g.to_string(),
                metric: m,
                value,
            });
        }
    }
    Ok(report)
}

pub const OVERSEGMENTATION: Rgb<u8> = Rgb([255, 0, 0]);
pub const UNDERSEGMENTATION: Rgb<u8> = Rgb([255, 255, 0]);

/// Grayscale image with prediction-only pixels in red and ground-truth-only
/// pixels in yellow.
pub fn render_difference_map(
    pred: &Mask2,
    gt: &Mask2,
    image: &Array2<f64>,
) -> Result<RgbImage, MetricsError> {
    if pred.dim() != gt.dim() || pred.dim() != image.dim() {
        return Err(MetricsError::ShapeMismatch(
            pred.shape().to_vec(),
            image.shape().to_vec(),
        ));
    }
    let (h, w) = image.dim();
    let lo = image.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = image.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = if hi > lo { hi - lo } else { 1.0 };
    let mut out = RgbImage::new(w as u32, h as u32);
    for ((y, x), &v) in image.indexed_iter() {
        let px = match (pred[[y, x]], gt[[y, x]]) {
            (true, false) => OVERSEGMENTATION,
            (false, true) => UNDERSEGMENTATION,
            _ => {
                let g = (((v - lo) / range) * 255.0).round().clamp(0.0, 255.0) as u8;
                Rgb([g, g, g])
            }
        };
        out.put_pixel(x as u32, y as u32, px);
    }
    Ok(out)
}
