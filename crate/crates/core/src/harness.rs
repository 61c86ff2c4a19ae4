//! Experiment runner: paired baseline/correction arms over seeded scenario
//! suites, parameter sweeps, training runs, and the files they emit.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::detectors::{Detector, MissPolicy, PromptId, SyntheticDetector};
use crate::engine::{BufferMode, EngineConfig, EngineError, Episode, EpisodeLog};
use crate::feedback::FeedbackConfig;
use crate::metrics::{evaluate_subset, recall_after_first_miss, EdsReport, OffsetCurve, RecallCount, ReportRow, Subset};
use crate::oa::{
    evaluate_alignment, load_checkpoint, save_checkpoint, train_oa, AlignEval, CurvePoint, OaConfig, OaError, OaManifest,
    OaParams, PromptOrigin, TrainConfig, TrainReport,
};
use crate::promptbuffer::BufferConfig;
use crate::rng::{derive_seed, rng_for, tag};
use crate::scenesim::{
    crop_descriptor, generate_scenario, render_frame, view_transform, Scenario, ScenarioConfig, SceneError, StyleParams,
    DESCRIPTOR_DIM,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("experiment needs a checkpoint for arm {0:?}")]
    MissingCheckpoint(String),
    #[error("unknown sweep parameter {0:?}")]
    UnknownParameter(String),
    #[error("bad value {value:?} for {key}: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("invalid experiment: {0}")]
    Invalid(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Oa(#[from] OaError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Prompts placed in the buffer before the first frame, cropped from
/// descriptors restyled with an out-of-scenario style.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreloadSpec {
    pub eps_style: f64,
    pub style_seed: u64,
    /// Entity tags to preload; empty means every entity.
    #[serde(default)]
    pub tags: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSpec {
    pub name: String,
    /// Absent for the no-correction arm.
    #[serde(default)]
    pub feedback: Option<FeedbackConfig>,
    #[serde(default)]
    pub buffer: BufferConfig,
    #[serde(default)]
    pub buffer_mode: BufferMode,
    #[serde(default)]
    pub preload: Option<PreloadSpec>,
    /// Overrides the experiment checkpoint for this arm.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

impl ArmSpec {
    pub fn baseline() -> Self {
        Self {
            name: "baseline".into(),
            feedback: None,
            buffer: BufferConfig::default(),
            buffer_mode: BufferMode::Live,
            preload: None,
            checkpoint: None,
        }
    }

    pub fn ttc(feedback: FeedbackConfig) -> Self {
        Self {
            name: "ttc".into(),
            feedback: Some(feedback),
            ..Self::baseline()
        }
    }

    /// Whether this arm runs the adapter at all.
    pub fn uses_adapter(&self) -> bool {
        self.feedback.is_some() || self.preload.is_some()
    }
}

fn default_miss_distance() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    /// Template for every scenario; its seed is replaced per run.
    pub scenario: ScenarioConfig,
    /// Scenarios per seed.
    pub scenarios: usize,
    pub seeds: Vec<u64>,
    pub policy: MissPolicy,
    pub arms: Vec<ArmSpec>,
    pub subsets: Vec<Subset>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Distance used by the post-miss recall columns.
    #[serde(default = "default_miss_distance")]
    pub miss_distance: f64,
}

impl ExperimentSpec {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let spec: Self = toml::from_str(s).map_err(|e| HarnessError::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("experiment spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.arms.is_empty() || self.seeds.is_empty() || self.scenarios == 0 {
            return Err(HarnessError::Invalid("needs arms, seeds, and scenarios".into()));
        }
        let names: BTreeSet<&str> = self.arms.iter().map(|a| a.name.as_str()).collect();
        if names.len() != self.arms.len() {
            return Err(HarnessError::Invalid("arm names must be unique".into()));
        }
        if self.subsets.is_empty() {
            return Err(HarnessError::Invalid("needs at least one subset".into()));
        }
        Ok(())
    }

    /// Scenario `index` of `seed`; shared by every arm.
    pub fn scenario_config(&self, seed: u64, index: usize) -> ScenarioConfig {
        ScenarioConfig {
            name: format!("{}-s{seed}-{index}", self.name),
            seed: derive_seed(seed, &[tag("eval-scene"), index as u64]),
            ..self.scenario.clone()
        }
    }

    pub fn policy_for(&self, seed: u64, index: usize) -> MissPolicy {
        MissPolicy {
            seed: derive_seed(self.policy.seed, &[seed, index as u64]),
            ..self.policy.clone()
        }
    }

    pub fn engine_config(&self, arm: &ArmSpec, seed: u64, index: usize) -> EngineConfig {
        EngineConfig {
            feedback: arm.feedback.clone(),
            buffer: arm.buffer.clone(),
            buffer_mode: arm.buffer_mode,
            seed: derive_seed(seed, &[tag("engine"), index as u64]),
            ..EngineConfig::default()
        }
    }
}

/// Restyled descriptors for the entities selected by `spec`.
pub fn preload_descriptors(scenario: &Scenario, spec: &PreloadSpec) -> Vec<(u32, Vec<f64>)> {
    let style = StyleParams {
        rotation_seed: derive_seed(spec.style_seed, &[tag("preload-rotation")]),
        noise_seed: derive_seed(spec.style_seed, &[tag("preload-noise")]),
        eps_style: spec.eps_style,
        gains: vec![1.0; DESCRIPTOR_DIM],
        shift: 0.0,
    };
    scenario
        .entities
        .iter()
        .filter(|e| spec.tags.is_empty() || spec.tags.contains(&e.class_tag))
        .map(|e| {
            let angle = rng_for(spec.style_seed, &[tag("preload-view"), e.id as u64]).random_range(0.0..std::f64::consts::PI);
            (e.id, view_transform(&e.canonical_descriptor, &style.for_entity(e.id), angle))
        })
        .collect()
}

/// One episode of one arm, tagged with where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub arm: String,
    pub seed: u64,
    pub index: usize,
    /// Preloaded prompt per entity, if any.
    pub preloaded: Vec<(u32, PromptId)>,
    pub log: EpisodeLog,
}

pub fn run_arm_episode(
    spec: &ExperimentSpec,
    arm: &ArmSpec,
    params: Option<Arc<OaParams>>,
    seed: u64,
    index: usize,
) -> Result<EpisodeRecord> {
    let scenario = generate_scenario(&spec.scenario_config(seed, index))?;
    let params = if arm.uses_adapter() { params } else { None };
    if arm.uses_adapter() && params.is_none() {
        return Err(HarnessError::MissingCheckpoint(arm.name.clone()));
    }
    let preload = arm.preload.as_ref().map(|p| preload_descriptors(&scenario, p)).unwrap_or_default();
    let mut ep = Episode::new(scenario, spec.policy_for(seed, index), params, spec.engine_config(arm, seed, index))?;
    let preloaded = preload
        .into_iter()
        .map(|(e, d)| (e, ep.preload(d, PromptOrigin::External)))
        .collect();
    Ok(EpisodeRecord {
        arm: arm.name.clone(),
        seed,
        index,
        preloaded,
        log: ep.run_to_end()?,
    })
}

/// Hash of the base detector's output stream for one scenario, used to
/// confirm arms see identical inputs.
pub fn base_stream_hash(spec: &ExperimentSpec, seed: u64, index: usize) -> Result<String> {
    let scenario = generate_scenario(&spec.scenario_config(seed, index))?;
    let det = SyntheticDetector::new(spec.policy_for(seed, index));
    let mut h = Sha256::new();
    for t in 0..scenario.frame_count() {
        let f = render_frame(&scenario, t)?;
        h.update(serde_json::to_vec(&det.detect(&f))?);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn load_params(path: &Path) -> Result<Arc<OaParams>> {
    Ok(Arc::new(load_checkpoint(path, None)?))
}

fn pool(jobs: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool")
}

/// Runs every (arm, seed, scenario) episode. `params` is the experiment's
/// adapter; arms naming their own checkpoint load it here.
pub fn run_episodes(spec: &ExperimentSpec, params: Option<Arc<OaParams>>, jobs: usize) -> Result<Vec<EpisodeRecord>> {
    spec.validate()?;
    let mut arm_params = Vec::new();
    for arm in &spec.arms {
        arm_params.push(match &arm.checkpoint {
            Some(p) => Some(load_params(p)?),
            None => params.clone(),
        });
    }
    let mut tasks = Vec::new();
    for (a, arm) in spec.arms.iter().enumerate() {
        for &seed in &spec.seeds {
            for i in 0..spec.scenarios {
                tasks.push((a, arm, seed, i));
            }
        }
    }
    pool(jobs).install(|| {
        tasks
            .par_iter()
            .map(|&(a, arm, seed, i)| run_arm_episode(spec, arm, arm_params[a].clone(), seed, i))
            .collect()
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation; zero for a single value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

/// Per-seed numbers for one arm and subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub arm: String,
    pub subset: String,
    pub seed: u64,
    pub report: EdsReport,
    pub post_miss: RecallCount,
    pub feedback_events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub arm: String,
    pub subset: String,
    pub map: MeanStd,
    pub eds: MeanStd,
    pub recall: MeanStd,
    /// Pooled over seeds.
    pub post_miss_recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub rows: Vec<SummaryRow>,
    /// Each arm minus the first arm, per subset and seed, then averaged.
    pub deltas: Vec<SummaryRow>,
    pub per_seed: Vec<SeedResult>,
    pub stream_hashes: Vec<String>,
}

impl ExperimentReport {
    pub fn row(&self, arm: &str, subset: &Subset) -> Option<&SummaryRow> {
        let s = subset.name();
        self.rows.iter().find(|r| r.arm == arm && r.subset == s)
    }

    pub fn delta(&self, arm: &str, subset: &Subset) -> Option<&SummaryRow> {
        let s = subset.name();
        self.deltas.iter().find(|r| r.arm == arm && r.subset == s)
    }

    pub fn summary_csv(&self) -> Result<String> {
        table_csv(self.rows.iter().chain(&self.deltas))
    }

    pub fn per_seed_rows(&self) -> Vec<ReportRow> {
        self.per_seed
            .iter()
            .map(|r| ReportRow::new(&format!("{}@{}", r.arm, r.seed), &r.subset, &r.report))
            .collect()
    }

    /// Stable digest of every reported number.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.summary_csv().expect("in-memory csv"));
        let mut buf = Vec::new();
        crate::metrics::write_csv(&self.per_seed_rows(), &mut buf).expect("in-memory csv");
        h.update(buf);
        for s in &self.stream_hashes {
            h.update(s.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn table_csv<'a>(rows: impl Iterator<Item = &'a SummaryRow>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "arm", "subset", "map_mean", "map_std", "eds_mean", "eds_std", "recall_mean", "recall_std", "post_miss_recall",
    ])?;
    for r in rows {
        w.write_record([
            r.arm.clone(),
            r.subset.clone(),
            r.map.mean.to_string(),
            r.map.std.to_string(),
            r.eds.mean.to_string(),
            r.eds.std.to_string(),
            r.recall.mean.to_string(),
            r.recall.std.to_string(),
            r.post_miss_recall.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| HarnessError::Parse(e.to_string()))?).expect("csv is utf-8"))
}

/// Aggregates episode records: per arm and seed the scenarios are pooled
/// into one evaluation, then seeds give mean and spread.
pub fn aggregate(spec: &ExperimentSpec, records: &[EpisodeRecord]) -> Result<ExperimentReport> {
    let mut per_seed = Vec::new();
    for arm in &spec.arms {
        for &seed in &spec.seeds {
            let mine: Vec<&EpisodeRecord> = records.iter().filter(|r| r.arm == arm.name && r.seed == seed).collect();
            if mine.len() != spec.scenarios {
                return Err(HarnessError::Invalid(format!(
                    "arm {} seed {seed}: {} of {} episodes",
                    arm.name,
                    mine.len(),
                    spec.scenarios
                )));
            }
            let feedback_events = mine.iter().map(|r| r.log.feedback.len()).sum();
            for subset in &spec.subsets {
                let mut recs = Vec::new();
                let mut dets = Vec::new();
                let mut post_miss = RecallCount::default();
                for r in &mine {
                    let (rs, ds) = (r.log.records(), r.log.detections());
                    post_miss.add(recall_after_first_miss(subset, &rs, &ds, spec.miss_distance));
                    recs.extend(rs);
                    dets.extend(ds);
                }
                per_seed.push(SeedResult {
                    arm: arm.name.clone(),
                    subset: subset.name(),
                    seed,
                    report: evaluate_subset(subset, &recs, &dets),
                    post_miss,
                    feedback_events,
                });
            }
        }
    }
    let pick = |arm: &str, subset: &str| -> Vec<&SeedResult> {
        per_seed.iter().filter(|r| r.arm == arm && r.subset == subset).collect()
    };
    let mut rows = Vec::new();
    let mut deltas = Vec::new();
    let first = &spec.arms[0].name;
    for arm in &spec.arms {
        for subset in &spec.subsets {
            let name = subset.name();
            let mine = pick(&arm.name, &name);
            let col = |f: &dyn Fn(&SeedResult) -> f64| MeanStd::of(&mine.iter().map(|r| f(r)).collect::<Vec<_>>());
            let mut pooled = RecallCount::default();
            for r in &mine {
                pooled.add(r.post_miss);
            }
            rows.push(SummaryRow {
                arm: arm.name.clone(),
                subset: name.clone(),
                map: col(&|r| r.report.map),
                eds: col(&|r| r.report.eds),
                recall: col(&|r| r.report.recall),
                post_miss_recall: pooled.rate(),
            });
            if arm.name != *first {
                let base = pick(first, &name);
                let diff = |f: &dyn Fn(&SeedResult) -> f64| {
                    MeanStd::of(&mine.iter().zip(&base).map(|(a, b)| f(a) - f(b)).collect::<Vec<_>>())
                };
                let mut base_pooled = RecallCount::default();
                for r in &base {
                    base_pooled.add(r.post_miss);
                }
                deltas.push(SummaryRow {
                    arm: format!("{}-{}", arm.name, first),
                    subset: name,
                    map: diff(&|r| r.report.map),
                    eds: diff(&|r| r.report.eds),
                    recall: diff(&|r| r.report.recall),
                    post_miss_recall: pooled.rate().zip(base_pooled.rate()).map(|(a, b)| a - b),
                });
            }
        }
    }
    let mut stream_hashes = Vec::new();
    for &seed in &spec.seeds {
        for i in 0..spec.scenarios {
            stream_hashes.push(base_stream_hash(spec, seed, i)?);
        }
    }
    Ok(ExperimentReport {
        name: spec.name.clone(),
        rows,
        deltas,
        per_seed,
        stream_hashes,
    })
}

pub struct ExperimentRun {
    pub report: ExperimentReport,
    pub episodes: Vec<EpisodeRecord>,
}

/// Runs all arms over all seeds and aggregates. Checkpoints are only read.
pub fn run_experiment(spec: &ExperimentSpec, params: Option<Arc<OaParams>>, jobs: usize) -> Result<ExperimentRun> {
    let params = match (params, &spec.checkpoint) {
        (Some(p), _) => Some(p),
        (None, Some(path)) => Some(load_params(path)?),
        (None, None) => None,
    };
    let episodes = run_episodes(spec, params, jobs)?;
    Ok(ExperimentRun {
        report: aggregate(spec, &episodes)?,
        episodes,
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

/// Two-column numeric series.
pub fn write_series(path: &Path, points: impl IntoIterator<Item = (f64, f64)>) -> Result<()> {
    let mut s = String::new();
    for (x, y) in points {
        s.push_str(&format!("{x} {y}\n"));
    }
    write_file(path, s)
}

/// Writes spec, tables, buffer traces, and episode logs under `dir`.
pub fn write_bundle(dir: &Path, spec: &ExperimentSpec, run: &ExperimentRun) -> Result<()> {
    write_file(&dir.join("spec.toml"), spec.to_toml_string())?;
    write_file(&dir.join("summary.csv"), run.report.summary_csv()?)?;
    let mut buf = Vec::new();
    crate::metrics::write_csv(&run.report.per_seed_rows(), &mut buf)?;
    write_file(&dir.join("per_seed.csv"), buf)?;
    write_file(&dir.join("report.json"), serde_json::to_string_pretty(&run.report)?)?;
    write_file(&dir.join("digest.txt"), format!("{}\n", run.report.digest()))?;
    for e in &run.episodes {
        let stem = format!("{}_s{}_{}", e.arm, e.seed, e.index);
        write_series(
            &dir.join("traces").join(format!("{stem}.dat")),
            e.log.buffer_trace().iter().enumerate().map(|(i, &n)| (i as f64, n as f64)),
        )?;
        write_file(&dir.join("logs").join(format!("{stem}.json")), serde_json::to_string(e)?)?;
    }
    Ok(())
}

/// Re-reads a bundle written by [`write_bundle`] and recomputes its report.
pub fn report_from_bundle(dir: &Path) -> Result<ExperimentReport> {
    let spec = ExperimentSpec::load(&dir.join("spec.toml"))?;
    let logs = dir.join("logs");
    let mut paths: Vec<PathBuf> = fs::read_dir(&logs)
        .map_err(io_err(&logs))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut records = Vec::new();
    for p in paths {
        let rec: EpisodeRecord = serde_json::from_str(&fs::read_to_string(&p).map_err(io_err(&p))?)?;
        if rec.log.version != crate::engine::EPISODE_LOG_VERSION {
            return Err(EngineError::LogVersion(rec.log.version).into());
        }
        records.push(rec);
    }
    aggregate(&spec, &records)
}

pub const SWEEP_KEYS: [&str; 9] = [
    "feedback.interval",
    "feedback.perturb_ratio",
    "buffer.capacity",
    "buffer.conf_floor",
    "buffer.k",
    "buffer.iou_dup",
    "scenario.eps_style",
    "policy.base_miss",
    "checkpoint",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| HarnessError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

/// Copy of `spec` with `key` set to `value`. Feedback and checkpoint keys
/// touch only the arms that run the adapter.
pub fn apply_override(spec: &ExperimentSpec, key: &str, value: &str) -> Result<ExperimentSpec> {
    let mut s = spec.clone();
    let ttc_arms = s.arms.iter_mut().filter(|a| a.uses_adapter());
    match key {
        "feedback.interval" => {
            let v: usize = parse(key, value)?;
            ttc_arms.filter_map(|a| a.feedback.as_mut()).for_each(|f| f.interval = v);
        }
        "feedback.perturb_ratio" => {
            let v: f64 = parse(key, value)?;
            for f in ttc_arms.filter_map(|a| a.feedback.as_mut()) {
                f.perturb_ratio = v;
                f.validate().map_err(|e| HarnessError::BadValue {
                    key: key.into(),
                    value: value.into(),
                    reason: e.to_string(),
                })?;
            }
        }
        "buffer.capacity" => {
            let v: usize = parse(key, value)?;
            s.arms.iter_mut().for_each(|a| a.buffer.capacity = v);
        }
        "buffer.conf_floor" => {
            let v: f64 = parse(key, value)?;
            s.arms.iter_mut().for_each(|a| a.buffer.conf_floor = v);
        }
        "buffer.k" => {
            let v: usize = parse(key, value)?;
            s.arms.iter_mut().for_each(|a| a.buffer.k = v);
        }
        "buffer.iou_dup" => {
            let v: f64 = parse(key, value)?;
            s.arms.iter_mut().for_each(|a| a.buffer.iou_dup = v);
        }
        "scenario.eps_style" => s.scenario.eps_style = parse(key, value)?,
        "policy.base_miss" => s.policy.base_miss = parse(key, value)?,
        "checkpoint" => ttc_arms.for_each(|a| a.checkpoint = Some(PathBuf::from(value))),
        other => return Err(HarnessError::UnknownParameter(other.into())),
    }
    s.name = format!("{}_{}={}", spec.name, key, value);
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: String,
    pub report: ExperimentReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub parameter: String,
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    /// Mean EDS of `arm` on `subset` at each value.
    pub fn eds_series(&self, arm: &str, subset: &Subset) -> Vec<f64> {
        self.points
            .iter()
            .map(|p| p.report.row(arm, subset).map_or(f64::NAN, |r| r.eds.mean))
            .collect()
    }

    pub fn map_series(&self, arm: &str, subset: &Subset) -> Vec<f64> {
        self.points
            .iter()
            .map(|p| p.report.row(arm, subset).map_or(f64::NAN, |r| r.map.mean))
            .collect()
    }

    pub fn post_miss_series(&self, arm: &str, subset: &Subset) -> Vec<Option<f64>> {
        self.points
            .iter()
            .map(|p| p.report.row(arm, subset).and_then(|r| r.post_miss_recall))
            .collect()
    }

    /// One table over all values.
    pub fn comparison_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([self.parameter.as_str(), "arm", "subset", "map_mean", "eds_mean", "post_miss_recall"])?;
        for p in &self.points {
            for r in &p.report.rows {
                w.write_record([
                    p.value.clone(),
                    r.arm.clone(),
                    r.subset.clone(),
                    r.map.mean.to_string(),
                    r.eds.mean.to_string(),
                    r.post_miss_recall.map(|v| v.to_string()).unwrap_or_default(),
                ])?;
            }
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| HarnessError::Parse(e.to_string()))?).expect("csv is utf-8"))
    }
}

pub fn sweep(
    spec: &ExperimentSpec,
    params: Option<Arc<OaParams>>,
    parameter: &str,
    values: &[String],
    jobs: usize,
) -> Result<SweepReport> {
    if !SWEEP_KEYS.contains(&parameter) {
        return Err(HarnessError::UnknownParameter(parameter.into()));
    }
    let mut points = Vec::new();
    for v in values {
        let s = apply_override(spec, parameter, v)?;
        points.push(SweepPoint {
            value: v.clone(),
            report: run_experiment(&s, params.clone(), jobs)?.report,
        });
    }
    Ok(SweepReport {
        parameter: parameter.into(),
        points,
    })
}

fn default_heldout_scenes() -> usize {
    8
}
fn default_heldout_frames() -> usize {
    4
}
fn default_heldout_eps() -> f64 {
    0.2
}

/// Everything needed to reproduce a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    #[serde(default)]
    pub oa: OaConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default = "default_heldout_scenes")]
    pub heldout_scenes: usize,
    #[serde(default = "default_heldout_frames")]
    pub heldout_frames: usize,
    #[serde(default = "default_heldout_eps")]
    pub heldout_eps: f64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            oa: OaConfig::default(),
            train: TrainConfig::default(),
            init_seed: 0,
            heldout_scenes: default_heldout_scenes(),
            heldout_frames: default_heldout_frames(),
            heldout_eps: default_heldout_eps(),
        }
    }
}

impl TrainSpec {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| HarnessError::Parse(e.to_string()))
    }

    /// Held-out scenarios, seeded apart from the training set.
    pub fn heldout(&self) -> Result<Vec<Scenario>> {
        (0..self.heldout_scenes)
            .map(|k| {
                generate_scenario(&ScenarioConfig {
                    name: format!("heldout-{k}"),
                    seed: derive_seed(self.train.seed, &[tag("heldout"), k as u64]),
                    eps_style: self.heldout_eps,
                    ..self.train.template.clone()
                })
                .map_err(Into::into)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub manifest: OaManifest,
    pub report: TrainReport,
    pub heldout: AlignEval,
}

pub const CHECKPOINT_FILE: &str = "oa.ckpt";

/// Trains, evaluates on held-out scenes, and writes the checkpoint,
/// manifest, `curve.csv`, and `heldout.json` into `out_dir`.
pub fn train(spec: &TrainSpec, out_dir: &Path, progress: impl FnMut(&CurvePoint)) -> Result<(OaParams, TrainOutcome)> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let init = OaParams::init(spec.oa.clone(), spec.init_seed)?;
    let (params, report) = train_oa(&init, &spec.train, progress)?;
    let heldout = evaluate_alignment(
        &params,
        &spec.heldout()?,
        spec.heldout_frames,
        spec.train.prompt_offset,
        spec.train.seed,
    )?;
    let manifest = save_checkpoint(&out_dir.join(CHECKPOINT_FILE), &params)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in &report.curve {
        w.serialize(p)?;
    }
    write_file(&out_dir.join("curve.csv"), w.into_inner().map_err(|e| HarnessError::Parse(e.to_string()))?)?;
    write_file(&out_dir.join("heldout.json"), serde_json::to_string_pretty(&heldout)?)?;
    write_file(
        &out_dir.join("train.toml"),
        toml::to_string(spec).map_err(|e| HarnessError::Parse(e.to_string()))?,
    )?;
    Ok((
        params,
        TrainOutcome {
            manifest,
            report,
            heldout,
        },
    ))
}

/// Buffer size after every frame of one episode.
pub fn trace_buffer(
    scenario: &ScenarioConfig,
    policy: &MissPolicy,
    params: Option<Arc<OaParams>>,
    engine: &EngineConfig,
) -> Result<Vec<usize>> {
    let s = generate_scenario(scenario)?;
    Ok(crate::engine::run_episode(&s, policy, params, engine)?.buffer_trace())
}

/// Rise, plateau, and drain boundaries of a buffer-size trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferPhases {
    pub peak: usize,
    /// First frame of the plateau.
    pub plateau_start: usize,
    /// Last frame of the plateau.
    pub plateau_end: usize,
}

impl BufferPhases {
    /// Splits `trace` into a nondecreasing rise, a plateau held within one
    /// of its level, and a nonincreasing drain that ends empty. `None` when
    /// the trace does not have that shape or the plateau is shorter than
    /// `min_plateau` frames.
    pub fn detect(trace: &[usize], min_plateau: usize) -> Option<Self> {
        let peak = *trace.iter().max()?;
        if peak < 2 || *trace.last()? != 0 || trace[0] + 1 >= peak {
            return None;
        }
        let band = peak - 2;
        let start = trace.iter().position(|&v| v > band)?;
        let end = trace.iter().rposition(|&v| v > band)?;
        let rise = trace[..=start].windows(2).all(|w| w[0] <= w[1]);
        let flat = trace[start..=end].iter().all(|&v| v >= band);
        let drain = trace[end..].windows(2).all(|w| w[0] >= w[1]);
        (rise && flat && drain && end + 1 - start >= min_plateau).then_some(Self {
            peak,
            plateau_start: start,
            plateau_end: end,
        })
    }
}

/// First-frame protocol: every entity visible at frame 0 is prompted with
/// its frame-0 crop, the buffer is frozen, and prompt-provenance recall is
/// tallied by frame offset.
pub fn view_robustness(
    scenarios: &[ScenarioConfig],
    policy: &MissPolicy,
    params: Arc<OaParams>,
    buffer: &BufferConfig,
) -> Result<OffsetCurve> {
    let mut curve = OffsetCurve::default();
    for cfg in scenarios {
        let s = generate_scenario(cfg)?;
        let f0 = render_frame(&s, 0)?;
        let engine = EngineConfig {
            feedback: None,
            buffer: buffer.clone(),
            buffer_mode: BufferMode::Frozen,
            ..EngineConfig::default()
        };
        let mut ep = Episode::new(s, policy.clone(), Some(params.clone()), engine)?;
        let mut targets = Vec::new();
        for t in f0.visible_truths().take(buffer.capacity) {
            let d = crop_descriptor(&f0, &t.box2d.expanded_to(1.0))?;
            let origin = PromptOrigin::Frame {
                scenario: cfg.name.clone(),
                frame: 0,
            };
            targets.push((t.entity_id, ep.preload(d, origin)));
        }
        let log = ep.run_to_end()?;
        curve.add_episode(&log.records(), &log.detections(), &targets);
    }
    Ok(curve)
}

/// Convenience for writing any serializable result.
pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut f = Vec::new();
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n").map_err(io_err(path))?;
    write_file(path, f)
}
