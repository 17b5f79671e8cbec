//! Experiment configuration, run directories, evaluation, the ablation grid
//! and manifest replay. The command-line front end is a thin layer over this.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array3, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backbone::{self, BackboneError, TrainedModel, TrainingSample};
use crate::data_model::{DataError, InstanceMask, LandmarkAnnotation, Mask2, Spacing, Volume};
use crate::io;
use crate::labels::LabelStore;
use crate::metrics::{
    per_vertebra_report, render_difference_map, HausdorffMode, Metric, MetricSummary,
    MetricsError, MetricsReport,
};
use crate::phantom::{generate_phantom, jitter_landmarks, PhantomError, PhantomSpec};
use crate::pipeline::{
    assemble_volume, build_coarse_labels, infer_slice, infer_volume, self_train, slice_propagate,
    InferenceMode, PipelineConfig, PipelineError, RunLog,
};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),
    #[error("i/o error at {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("cannot replay: {0}")]
    Replay(String),
}

impl ExperimentError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::Io { .. } => "io",
            Self::Data(_) => "data",
            Self::Phantom(_) => "phantom",
            Self::Pipeline(_) => "pipeline",
            Self::Backbone(_) => "backbone",
            Self::Metrics(_) => "metrics",
            Self::Replay(_) => "replay",
        }
    }

    /// Machine-readable error description.
    pub fn report(&self) -> serde_json::Value {
        let details: Vec<String> = match self {
            Self::Config(v) => v.clone(),
            other => vec![other.to_string()],
        };
        serde_json::json!({"error": self.kind(), "details": details})
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// `train` phantoms with seeds `0..train` and `test` phantoms with seeds
    /// from `test_seed_start`, all derived from `base`.
    PhantomSuite {
        train: usize,
        #[serde(default)]
        test: usize,
        #[serde(default)]
        base: PhantomSpec,
        #[serde(default = "default_test_seed_start")]
        test_seed_start: u64,
    },
    Phantoms {
        train: Vec<PhantomSpec>,
        #[serde(default)]
        test: Vec<PhantomSpec>,
    },
    /// Directories in the layout written by `phantom gen`.
    Directory {
        train: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
    },
}

fn default_test_seed_start() -> u64 {
    1000
}

impl DatasetConfig {
    /// The standard suite: 20 training and 20 held-out default phantoms.
    pub fn standard_suite() -> Self {
        Self::PhantomSuite {
            train: 20,
            test: 20,
            base: PhantomSpec::default(),
            test_seed_start: default_test_seed_start(),
        }
    }

    fn phantom_specs(&self) -> Option<(Vec<PhantomSpec>, Vec<PhantomSpec>)> {
        match self {
            Self::PhantomSuite {
                train,
                test,
                base,
                test_seed_start,
            } => {
                let with_seed = |seed| PhantomSpec {
                    seed,
                    ..base.clone()
                };
                Some((
                    (0..*train as u64).map(with_seed).collect(),
                    (0..*test as u64).map(|k| with_seed(test_seed_start + k)).collect(),
                ))
            }
            Self::Phantoms { train, test } => Some((train.clone(), test.clone())),
            Self::Directory { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub max_shift_mm: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            max_shift_mm: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricOptions {
    pub hausdorff: HausdorffMode,
    pub difference_maps: bool,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            hausdorff: HausdorffMode::Max,
            difference_maps: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    /// Landmark jitter applied to training annotations.
    #[serde(default)]
    pub noise: Option<NoiseConfig>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub metrics: MetricOptions,
}

impl ExperimentConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .pipeline
            .violations()
            .into_iter()
            .map(|m| format!("pipeline: {m}"))
            .collect();
        if let Some(n) = &self.noise {
            if !(n.max_shift_mm >= 0.0 && n.max_shift_mm.is_finite()) {
                v.push(format!("noise: max_shift_mm {} must be >= 0", n.max_shift_mm));
            }
        }
        match &self.dataset {
            DatasetConfig::Directory { train, test } => {
                for p in std::iter::once(train).chain(test) {
                    if !p.is_dir() {
                        v.push(format!("dataset: directory {} does not exist", p.display()));
                    }
                }
            }
            other => {
                let (train, test) = other.phantom_specs().expect("phantom dataset");
                if train.is_empty() {
                    v.push("dataset: at least one training phantom is required".into());
                }
                let mut seeds = std::collections::BTreeSet::new();
                for (i, spec) in train.iter().chain(&test).enumerate() {
                    if let Err(e) = spec.validate() {
                        v.push(format!("dataset: phantom {i}: {e}"));
                    }
                    if !seeds.insert(spec.seed) {
                        v.push(format!("dataset: phantom seed {} used twice", spec.seed));
                    }
                }
            }
        }
        v
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(ExperimentError::Config(v))
        }
    }

    /// Parses and validates a config file, reporting every problem found.
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| ExperimentError::Config(vec![format!("{}: {e}", path.display())]))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// A volume with its annotation and, when known, its true instance labelmap.
#[derive(Debug, Clone)]
pub struct Case {
    pub volume: Volume,
    pub annotation: LandmarkAnnotation,
    pub truth: Option<Array3<i16>>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Case>,
    pub test: Vec<Case>,
}

pub fn phantom_case(spec: &PhantomSpec) -> Result<Case, ExperimentError> {
    let p = generate_phantom(spec)?;
    let truth = p.truth_labelmap();
    Ok(Case {
        volume: p.volume,
        annotation: p.annotation,
        truth: Some(truth),
    })
}

fn truth_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.truth"))
}

/// Writes a case in the directory layout read by [`load_directory`].
pub fn write_case(case: &Case, dir: &Path) -> Result<(), ExperimentError> {
    let id = case.volume.id();
    io::write_volume(&case.volume, &dir.join(id))?;
    io::write_annotation(&case.annotation, &io::annotation_path(dir, id))?;
    if let Some(t) = &case.truth {
        io::write_raw_volume(t, case.volume.spacing(), &truth_path(dir, id))?;
    }
    Ok(())
}

/// Reads every `<id>.landmarks.json` in `dir` with its volume and optional
/// `<id>.truth` labelmap, in id order.
pub fn load_directory(dir: &Path) -> Result<Vec<Case>, ExperimentError> {
    let mut stems = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let name = entry.map_err(|e| io_err(dir, e))?.file_name();
        if let Some(stem) = name.to_string_lossy().strip_suffix(".landmarks.json") {
            stems.push(stem.to_string());
        }
    }
    stems.sort();
    stems
        .into_iter()
        .map(|id| {
            let volume = io::read_volume(&dir.join(&id))?;
            let annotation = io::read_annotation_for(&io::annotation_path(dir, &id), &volume)?;
            let tp = truth_path(dir, &id);
            let truth = if io::volume_paths(&tp).0.exists() {
                let t = io::read_volume(&tp)?;
                if t.dims() != volume.dims() {
                    return Err(DataError::InvalidLabels(format!(
                        "truth for {id} has dims {:?}, volume {:?}",
                        t.dims(),
                        volume.dims()
                    ))
                    .into());
                }
                Some(t.voxels().clone())
            } else {
                None
            };
            Ok(Case {
                volume,
                annotation,
                truth,
            })
        })
        .collect()
}

pub fn load_dataset(cfg: &DatasetConfig) -> Result<Dataset, ExperimentError> {
    match cfg {
        DatasetConfig::Directory { train, test } => Ok(Dataset {
            train: load_directory(train)?,
            test: match test {
                Some(t) => load_directory(t)?,
                None => Vec::new(),
            },
        }),
        other => {
            let (train, test) = other.phantom_specs().expect("phantom dataset");
            Ok(Dataset {
                train: train.iter().map(phantom_case).collect::<Result<_, _>>()?,
                test: test.iter().map(phantom_case).collect::<Result<_, _>>()?,
            })
        }
    }
}

/// Training annotations with corner jitter; volume `i` uses seed `seed + i`.
pub fn noisy_annotations(
    cases: &[Case],
    noise: &NoiseConfig,
) -> Result<Vec<LandmarkAnnotation>, ExperimentError> {
    cases
        .iter()
        .enumerate()
        .map(|(i, c)| {
            Ok(jitter_landmarks(
                &c.annotation,
                c.volume.spacing(),
                c.volume.slice_shape(),
                noise.max_shift_mm,
                noise.seed.wrapping_add(i as u64),
            )?)
        })
        .collect()
}

/// Prediction and truth for one volume, ready for scoring.
#[derive(Debug, Clone)]
pub struct Scored {
    pub volume_id: String,
    pub spacing: Spacing,
    pub mid: usize,
    pub pred: Array3<i16>,
    pub truth: Array3<i16>,
}

/// Scores on the annotated slice, per slice offset and over the slab.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub radius: usize,
    pub mid_sagittal: MetricsReport,
    /// Keyed by `|offset|` from the annotated slice.
    pub per_offset: BTreeMap<usize, MetricsReport>,
    pub volumetric: MetricsReport,
}

impl Evaluation {
    pub fn mid_dic(&self) -> MetricSummary {
        summary_of(&self.mid_sagittal, Metric::Dic)
    }

    pub fn volumetric_dic(&self) -> MetricSummary {
        summary_of(&self.volumetric, Metric::Dic)
    }

    pub fn offset_dic(&self) -> BTreeMap<usize, MetricSummary> {
        self.per_offset
            .iter()
            .map(|(k, r)| (*k, summary_of(r, Metric::Dic)))
            .collect()
    }

    pub fn summary_json(&self) -> serde_json::Value {
        let offsets: serde_json::Map<String, serde_json::Value> = self
            .offset_dic()
            .into_iter()
            .map(|(k, s)| (k.to_string(), serde_json::json!(s)))
            .collect();
        serde_json::json!({
            "radius": self.radius,
            "mid_sagittal": self.mid_sagittal.summary_json(),
            "volumetric": self.volumetric.summary_json(),
            "per_offset_dic": offsets,
        })
    }
}

fn summary_of(r: &MetricsReport, m: Metric) -> MetricSummary {
    r.summary().get(&m).copied().unwrap_or(MetricSummary {
        mean: f64::NAN,
        std: f64::NAN,
        scans: 0,
    })
}

fn slice3(a: &Array3<i16>, s: usize) -> Array3<i16> {
    a.slice(ndarray::s![s..s + 1, .., ..]).to_owned()
}

fn has_labels(a: &Array3<i16>) -> bool {
    a.iter().any(|&v| v != 0)
}

pub fn evaluate(
    scored: &[Scored],
    radius: usize,
    mode: HausdorffMode,
) -> Result<Evaluation, ExperimentError> {
    let mut ev = Evaluation {
        radius,
        ..Evaluation::default()
    };
    for sc in scored {
        if sc.pred.dim() != sc.truth.dim() {
            return Err(MetricsError::ShapeMismatch(sc.pred.shape().to_vec(), sc.truth.shape().to_vec()).into());
        }
        let n = sc.truth.dim().0;
        let mid_truth = slice3(&sc.truth, sc.mid);
        ev.mid_sagittal.extend(per_vertebra_report(
            &sc.volume_id,
            &slice3(&sc.pred, sc.mid),
            &mid_truth,
            sc.spacing,
            &Metric::SLICE_2D,
            mode,
        )?);
        for k in 0..=radius {
            let mut slices = vec![sc.mid + k];
            if k > 0 && sc.mid >= k {
                slices.insert(0, sc.mid - k);
            }
            for s in slices.into_iter().filter(|&s| s < n) {
                let t = slice3(&sc.truth, s);
                if !has_labels(&t) {
                    continue;
                }
                let r = per_vertebra_report(&sc.volume_id, &slice3(&sc.pred, s), &t, sc.spacing, &[Metric::Dic], mode)?;
                ev.per_offset.entry(k).or_default().extend(r);
            }
        }
        let lo = sc.mid.saturating_sub(radius);
        let hi = (sc.mid + radius + 1).min(n);
        let mut truth = Array3::zeros(sc.truth.dim());
        truth.slice_mut(s![lo..hi, .., ..]).assign(&sc.truth.slice(s![lo..hi, .., ..]));
        let mut pred = Array3::zeros(sc.pred.dim());
        pred.slice_mut(s![lo..hi, .., ..]).assign(&sc.pred.slice(s![lo..hi, .., ..]));
        ev.volumetric.extend(per_vertebra_report(
            &sc.volume_id,
            &pred,
            &truth,
            sc.spacing,
            &Metric::VOLUME_3D,
            mode,
        )?);
    }
    Ok(ev)
}

/// Instance labelmap of one slice, ids in mask order.
pub fn masks_to_labelmap(masks: &[InstanceMask], shape: (usize, usize)) -> Array3<i16> {
    let mut out = Array3::zeros((1, shape.0, shape.1));
    for (k, m) in masks.iter().enumerate() {
        for ((y, x), &v) in m.mask.indexed_iter() {
            if v {
                out[[0, y, x]] = k as i16 + 1;
            }
        }
    }
    out
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of every file under `dir` except the manifest, keyed by relative path.
pub fn digest_tree(dir: &Path) -> Result<BTreeMap<String, String>, ExperimentError> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<(), ExperimentError> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| io_err(dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|e| io_err(dir, e)))
            .collect::<Result<_, _>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                let rel: Vec<String> = p
                    .strip_prefix(root)
                    .expect("under root")
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy().into_owned())
                    .collect();
                let rel = rel.join("/");
                if rel == MANIFEST_FILE {
                    continue;
                }
                let bytes = fs::read(&p).map_err(|e| io_err(&p, e))?;
                out.insert(rel, sha256_hex(&bytes));
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    PhantomGen,
    Run,
    Eval,
    Ablate,
}

/// Everything needed to re-execute a command, plus digests of its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub command: Command,
    #[serde(default)]
    pub config: Option<ExperimentConfig>,
    #[serde(default)]
    pub phantom_specs: Vec<PhantomSpec>,
    /// Run directory scored by `eval`.
    #[serde(default)]
    pub eval_input: Option<PathBuf>,
    #[serde(default)]
    pub eval_options: Option<MetricOptions>,
    #[serde(default)]
    pub train_volumes: Vec<String>,
    #[serde(default)]
    pub test_volumes: Vec<String>,
    #[serde(default)]
    pub run: Option<RunLog>,
    #[serde(default)]
    pub checkpoints: Vec<String>,
    #[serde(default)]
    pub summary: Option<serde_json::Value>,
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    fn new(command: Command) -> Self {
        Self {
            format_version: MANIFEST_VERSION,
            command,
            config: None,
            phantom_specs: Vec::new(),
            eval_input: None,
            eval_options: None,
            train_volumes: Vec::new(),
            test_volumes: Vec::new(),
            run: None,
            checkpoints: Vec::new(),
            summary: None,
            files: BTreeMap::new(),
        }
    }

    fn seal(mut self, dir: &Path) -> Result<Self, ExperimentError> {
        self.files = digest_tree(dir)?;
        io::write_json(&self, &dir.join(MANIFEST_FILE))?;
        Ok(self)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        Ok(io::read_json(path)?)
    }
}

fn prepare_out(dir: &Path) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let stale = fs::read_dir(dir).map_err(|e| io_err(dir, e))?.next().is_some();
    if stale {
        return Err(io_err(dir, "output directory is not empty"));
    }
    Ok(())
}

/// Writes phantoms (volume, landmarks, truth) into `out`.
pub fn phantom_gen(specs: &[PhantomSpec], out: &Path) -> Result<Manifest, ExperimentError> {
    let mut v = Vec::new();
    for (i, s) in specs.iter().enumerate() {
        if let Err(e) = s.validate() {
            v.push(format!("phantom {i}: {e}"));
        }
    }
    if !v.is_empty() {
        return Err(ExperimentError::Config(v));
    }
    prepare_out(out)?;
    let mut manifest = Manifest::new(Command::PhantomGen);
    for s in specs {
        let case = phantom_case(s)?;
        write_case(&case, out)?;
        manifest.train_volumes.push(case.volume.id().to_string());
    }
    manifest.phantom_specs = specs.to_vec();
    manifest.seal(out)
}

pub const DATA_DIR: &str = "data";
pub const SEGMENTATION_DIR: &str = "segmentations";
pub const LABEL_DIR: &str = "labels";
pub const CHECKPOINT_DIR: &str = "checkpoints";

fn checkpoint_name(k: usize) -> String {
    format!("{CHECKPOINT_DIR}/it{k}.bin")
}

/// Coarse labels, self-training, propagation and assembly on the training
/// volumes; held-out volumes are segmented with the final model.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest, ExperimentError> {
    cfg.validate()?;
    prepare_out(out)?;
    let data = load_dataset(&cfg.dataset)?;
    let pcfg = &cfg.pipeline;
    let annotations = match &cfg.noise {
        Some(n) => noisy_annotations(&data.train, n)?,
        None => data.train.iter().map(|c| c.annotation.clone()).collect(),
    };
    let volumes: Vec<Volume> = data.train.iter().map(|c| c.volume.clone()).collect();

    let data_dir = out.join(DATA_DIR);
    for (c, a) in data.train.iter().zip(&annotations) {
        write_case(
            &Case {
                annotation: a.clone(),
                ..c.clone()
            },
            &data_dir,
        )?;
    }
    for c in &data.test {
        write_case(c, &data_dir)?;
    }

    let store = build_coarse_labels(&annotations, &volumes)?;
    let st = self_train(&volumes, store, pcfg)?;
    let result = slice_propagate(&volumes, st, pcfg)?;

    let mut manifest = Manifest::new(Command::Run);
    for (k, m) in result.checkpoints.iter().enumerate() {
        let name = checkpoint_name(k + 1);
        m.save(&out.join(&name))?;
        manifest.checkpoints.push(name);
    }
    result.store.save(&out.join(LABEL_DIR))?;
    let seg_dir = out.join(SEGMENTATION_DIR);
    let mut warnings = Vec::new();
    for (c, a) in data.train.iter().zip(&annotations) {
        let (lm, w) = assemble_volume(
            &result.store,
            c.volume.id(),
            c.volume.dims(),
            a.slice_index,
            pcfg.propagation_radius,
        );
        warnings.extend(w);
        io::write_raw_volume(&lm, c.volume.spacing(), &seg_dir.join(c.volume.id()))?;
    }
    for c in &data.test {
        let lm = segment_unseen(&result.model, c, pcfg, InferenceMode::Refined, &mut warnings)?;
        io::write_raw_volume(&lm, c.volume.spacing(), &seg_dir.join(c.volume.id()))?;
    }
    let mut log = result.log;
    log.warnings.extend(warnings);
    manifest.config = Some(cfg.clone());
    manifest.train_volumes = data.train.iter().map(|c| c.volume.id().to_string()).collect();
    manifest.test_volumes = data.test.iter().map(|c| c.volume.id().to_string()).collect();
    manifest.run = Some(log);
    manifest.seal(out)
}

fn segment_unseen(
    model: &TrainedModel,
    case: &Case,
    cfg: &PipelineConfig,
    mode: InferenceMode,
    warnings: &mut Vec<String>,
) -> Result<Array3<i16>, ExperimentError> {
    let mid = case.annotation.slice_index;
    let store = infer_volume(model, &case.volume, mid, cfg, mode)?;
    let (lm, w) = assemble_volume(&store, case.volume.id(), case.volume.dims(), mid, cfg.propagation_radius);
    warnings.extend(w);
    Ok(lm)
}

fn group_evaluation(
    run_dir: &Path,
    ids: &[String],
    radius: usize,
    mode: HausdorffMode,
) -> Result<(Evaluation, Vec<(Scored, Volume)>), ExperimentError> {
    let data = run_dir.join(DATA_DIR);
    let mut scored = Vec::new();
    for id in ids {
        let tp = truth_path(&data, id);
        let seg = run_dir.join(SEGMENTATION_DIR).join(id);
        if !io::volume_paths(&tp).0.exists() || !io::volume_paths(&seg).0.exists() {
            continue;
        }
        let volume = io::read_volume(&data.join(id))?;
        let annotation = io::read_annotation(&io::annotation_path(&data, id))?;
        let truth = io::read_volume(&tp)?.voxels().clone();
        let pred = io::read_volume(&seg)?.voxels().clone();
        scored.push((
            Scored {
                volume_id: id.clone(),
                spacing: volume.spacing(),
                mid: annotation.slice_index,
                pred,
                truth,
            },
            volume,
        ));
    }
    let only: Vec<Scored> = scored.iter().map(|(s, _)| s.clone()).collect();
    Ok((evaluate(&only, radius, mode)?, scored))
}

/// Scores a run directory against its ground truth into `out`.
pub fn eval(run_dir: &Path, out: &Path, opts: MetricOptions) -> Result<Manifest, ExperimentError> {
    let source = Manifest::load(&run_dir.join(MANIFEST_FILE))?;
    let radius = source
        .config
        .as_ref()
        .map_or(0, |c| c.pipeline.propagation_radius);
    prepare_out(out)?;
    let mut summary = serde_json::Map::new();
    for (group, ids) in [("train", &source.train_volumes), ("test", &source.test_volumes)] {
        let (ev, scored) = group_evaluation(run_dir, ids, radius, opts.hausdorff)?;
        if scored.is_empty() {
            continue;
        }
        let dir = out.join(group);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        ev.mid_sagittal.write_csv(&dir.join("mid_sagittal.csv"))?;
        ev.volumetric.write_csv(&dir.join("volumetric.csv"))?;
        let mut by_offset = MetricsReport::default();
        for (k, r) in &ev.per_offset {
            by_offset.extend(MetricsReport {
                rows: r
                    .rows
                    .iter()
                    .map(|row| crate::metrics::MetricRow {
                        vertebra_id: format!("{}@{k}", row.vertebra_id),
                        ..row.clone()
                    })
                    .collect(),
            });
        }
        by_offset.write_csv(&dir.join("per_offset.csv"))?;
        let js = ev.summary_json();
        io::write_json(&js, &dir.join("summary.json"))?;
        summary.insert(group.to_string(), js);
        if opts.difference_maps {
            for (sc, vol) in &scored {
                let fg = |a: &Array3<i16>| -> Mask2 { a.index_axis(Axis(0), sc.mid).mapv(|v| v != 0) };
                let img = render_difference_map(&fg(&sc.pred), &fg(&sc.truth), &vol.slice_f64(sc.mid))?;
                let p = dir.join("difference").join(format!("{}.png", sc.volume_id));
                fs::create_dir_all(p.parent().expect("parent")).map_err(|e| io_err(&p, e))?;
                img.save(&p).map_err(|e| io_err(&p, e))?;
            }
        }
    }
    let mut manifest = Manifest::new(Command::Eval);
    manifest.eval_input = Some(run_dir.to_path_buf());
    manifest.eval_options = Some(opts);
    manifest.train_volumes = source.train_volumes;
    manifest.test_volumes = source.test_volumes;
    manifest.summary = Some(serde_json::Value::Object(summary));
    manifest.seal(out)
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub noisy: bool,
    /// Mid-sagittal per-vertebra DIC on the evaluation volumes.
    pub dic: MetricSummary,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    /// `test` when held-out volumes exist, otherwise `train`.
    pub evaluated_on: String,
    pub rows: Vec<AblationRow>,
    /// Full propagated pipeline, clean and noisy, scored over the slab.
    pub propagation: BTreeMap<String, Evaluation>,
}

impl Ablation {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn table(&self) -> String {
        let mut t = format!("{:<14} {:>8} {:>8}\n", "method", "DIC", "std");
        for r in &self.rows {
            t += &format!("{:<14} {:>8.2} {:>8.2}\n", r.name, r.dic.mean, r.dic.std);
        }
        t
    }
}

pub const ABLATION_ROWS: [&str; 4] = ["M", "M-E", "M-E-R", "M-E-R-ST"];

fn mid_report(
    model: &TrainedModel,
    cases: &[&Case],
    cfg: &PipelineConfig,
    mode: InferenceMode,
) -> Result<MetricsReport, ExperimentError> {
    let mut report = MetricsReport::default();
    for c in cases {
        let Some(truth) = &c.truth else { continue };
        let m = c.annotation.slice_index;
        let image = c.volume.slice_f64(m);
        let masks = infer_slice(model, &image, cfg, mode)?;
        let pred = masks_to_labelmap(&masks, image.dim());
        report.extend(per_vertebra_report(
            c.volume.id(),
            &pred,
            &slice3(truth, m),
            c.volume.spacing(),
            &Metric::SLICE_2D,
            HausdorffMode::Max,
        )?);
    }
    Ok(report)
}

/// The ablation grid on clean and jittered landmarks:
///
/// * `M`: trained once on coarse labels without the edge term, raw output;
/// * `M-E`: trained once on coarse labels, raw output;
/// * `M-E-R`: the `M-E` model followed by selection and CRF;
/// * `M-E-R-ST`: the model after all self-training passes, refined output.
///
/// Jittered rows carry an `n-` prefix. The full propagated pipeline is also
/// scored for both label sets.
pub fn ablation(cfg: &ExperimentConfig) -> Result<Ablation, ExperimentError> {
    cfg.validate()?;
    let data = load_dataset(&cfg.dataset)?;
    let pcfg = &cfg.pipeline;
    let held_out = data.test.iter().any(|c| c.truth.is_some());
    let eval_cases: Vec<&Case> = if held_out {
        data.test.iter().filter(|c| c.truth.is_some()).collect()
    } else {
        data.train.iter().filter(|c| c.truth.is_some()).collect()
    };
    let volumes: Vec<Volume> = data.train.iter().map(|c| c.volume.clone()).collect();
    let mut rows = Vec::new();
    let mut propagation = BTreeMap::new();
    for noisy in [false, true] {
        let annotations = if noisy {
            noisy_annotations(&data.train, &cfg.noise.unwrap_or_default())?
        } else {
            data.train.iter().map(|c| c.annotation.clone()).collect()
        };
        let coarse = build_coarse_labels(&annotations, &volumes)?;
        let samples: Vec<TrainingSample> = annotations
            .iter()
            .zip(&volumes)
            .map(|(a, v)| TrainingSample {
                image: v.slice_f64(a.slice_index),
                labels: coarse
                    .get(v.id(), a.slice_index, 0)
                    .expect("coarse labels")
                    .masks
                    .clone(),
            })
            .collect();
        let mut plain = pcfg.backbone_config();
        plain.edge_loss_alpha = 0.0;
        let m = backbone::train(&samples, &plain, None)?;
        let st = self_train(&volumes, coarse, pcfg)?;
        let me = st.checkpoints.first().expect("one checkpoint").clone();
        let mest = st.model.clone();
        let prefix = if noisy { "n-" } else { "" };
        for (name, model, mode) in [
            ("M", &m, InferenceMode::Raw),
            ("M-E", &me, InferenceMode::Raw),
            ("M-E-R", &me, InferenceMode::Refined),
            ("M-E-R-ST", &mest, InferenceMode::Refined),
        ] {
            let report = mid_report(model, &eval_cases, pcfg, mode)?;
            rows.push(AblationRow {
                name: format!("{prefix}{name}"),
                noisy,
                dic: summary_of(&report, Metric::Dic),
                report,
            });
        }
        let full = slice_propagate(&volumes, st, pcfg)?;
        let mut warnings = Vec::new();
        let mut scored = Vec::new();
        for c in &eval_cases {
            let pred = segment_unseen(&full.model, c, pcfg, InferenceMode::Refined, &mut warnings)?;
            scored.push(Scored {
                volume_id: c.volume.id().to_string(),
                spacing: c.volume.spacing(),
                mid: c.annotation.slice_index,
                pred,
                truth: c.truth.clone().expect("filtered"),
            });
        }
        propagation.insert(
            if noisy { "noisy" } else { "clean" }.to_string(),
            evaluate(&scored, pcfg.propagation_radius, cfg.metrics.hausdorff)?,
        );
    }
    Ok(Ablation {
        evaluated_on: if held_out { "test" } else { "train" }.into(),
        rows,
        propagation,
    })
}

/// Runs [`ablation`] and writes the table, reports and manifest into `out`.
pub fn ablate(cfg: &ExperimentConfig, out: &Path) -> Result<(Manifest, Ablation), ExperimentError> {
    cfg.validate()?;
    prepare_out(out)?;
    let ab = ablation(cfg)?;
    let csv_path = out.join("ablation.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| io_err(&csv_path, e))?;
    w.write_record(["method", "noisy", "dic_mean", "dic_std", "scans"])
        .map_err(|e| io_err(&csv_path, e))?;
    for r in &ab.rows {
        w.write_record([
            r.name.clone(),
            r.noisy.to_string(),
            format!("{}", r.dic.mean),
            format!("{}", r.dic.std),
            r.dic.scans.to_string(),
        ])
        .map_err(|e| io_err(&csv_path, e))?;
    }
    w.flush().map_err(|e| io_err(&csv_path, e))?;
    fs::write(out.join("ablation.txt"), ab.table()).map_err(|e| io_err(out, e))?;
    for r in &ab.rows {
        r.report.write_csv(&out.join("rows").join(format!("{}.csv", r.name)).tap_parent()?)?;
    }
    let mut prop = serde_json::Map::new();
    for (k, ev) in &ab.propagation {
        prop.insert(k.clone(), ev.summary_json());
    }
    let summary = serde_json::json!({
        "evaluated_on": ab.evaluated_on,
        "rows": ab.rows.iter().map(|r| serde_json::json!({"method": r.name, "noisy": r.noisy, "dic": r.dic})).collect::<Vec<_>>(),
        "propagation": prop,
    });
    io::write_json(&summary, &out.join("summary.json"))?;
    let mut manifest = Manifest::new(Command::Ablate);
    manifest.config = Some(cfg.clone());
    manifest.summary = Some(summary);
    Ok((manifest.seal(out)?, ab))
}

trait TapParent: Sized {
    fn tap_parent(self) -> Result<Self, ExperimentError>;
}

impl TapParent for PathBuf {
    /// Creates the parent directory and passes the path through.
    fn tap_parent(self) -> Result<Self, ExperimentError> {
        if let Some(p) = self.parent() {
            fs::create_dir_all(p).map_err(|e| io_err(p, e))?;
        }
        Ok(self)
    }
}

/// Outcome of re-executing a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub command: Command,
    pub identical: bool,
    /// Files whose digest differs, or which exist on one side only.
    pub mismatches: Vec<String>,
}

/// Re-executes the command recorded in `manifest_path` into `out` and compares
/// output digests.
pub fn replay(manifest_path: &Path, out: &Path) -> Result<ReplayReport, ExperimentError> {
    let original = Manifest::load(manifest_path)?;
    let missing = |what: &str| ExperimentError::Replay(format!("manifest has no {what}"));
    let fresh = match original.command {
        Command::PhantomGen => phantom_gen(&original.phantom_specs, out)?,
        Command::Run => {
            let mut cfg = original.config.clone().ok_or_else(|| missing("config"))?;
            cfg.output_dir = Some(out.to_path_buf());
            run(&cfg, out)?
        }
        Command::Eval => {
            let input = original.eval_input.clone().ok_or_else(|| missing("eval input"))?;
            eval(&input, out, original.eval_options.unwrap_or_default())?
        }
        Command::Ablate => {
            let mut cfg = original.config.clone().ok_or_else(|| missing("config"))?;
            cfg.output_dir = Some(out.to_path_buf());
            ablate(&cfg, out)?.0
        }
    };
    let mut mismatches = Vec::new();
    for (k, v) in &original.files {
        if fresh.files.get(k) != Some(v) {
            mismatches.push(k.clone());
        }
    }
    for k in fresh.files.keys() {
        if !original.files.contains_key(k) {
            mismatches.push(k.clone());
        }
    }
    mismatches.sort();
    Ok(ReplayReport {
        command: original.command,
        identical: mismatches.is_empty(),
        mismatches,
    })
}

/// Default output directory for a command: `$WISS_OUT_ROOT/<name>` or
/// `runs/<name>`.
pub fn default_output_dir(name: &str) -> PathBuf {
    let root = std::env::var_os("WISS_OUT_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(name)
}

/// Loads the label store written by [`run`].
pub fn load_run_labels(run_dir: &Path) -> Result<LabelStore, ExperimentError> {
    Ok(LabelStore::load(&run_dir.join(LABEL_DIR))?)
}
