//! Benchmark harness: many-task evaluation with confidence intervals,
//! hyper-parameter sweeps, presets and synthetic data.
//!
//! Per-task results are collected in task order before aggregation, so the
//! reported numbers do not depend on the worker count.

pub mod synth;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::featurestore::{self, BundleError, FeatureBundle, SplitTag};
use crate::numerics::RNG_ALGORITHM;
use crate::pipeline::{self, Bavardage, BavardageConfig, PipelineError};
use crate::preproc::{self, PreprocConfig, PreprocError};
use crate::sampler::{self, SamplerError, Setting, TaskConfig};

pub use synth::{synth_generate, SynthConfig};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Preproc(#[from] PreprocError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("unknown sweep axis {0:?}")]
    UnknownAxis(String),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("task {index}: {source}")]
    Task {
        index: u64,
        #[source]
        source: Box<HarnessError>,
    },
    #[error("cannot write {path}: {message}")]
    Output { path: PathBuf, message: String },
}

impl HarnessError {
    /// Short stable identifier for machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Bundle(_) => "bundle",
            HarnessError::Sampler(_) => "sampler",
            HarnessError::Pipeline(_) => "pipeline",
            HarnessError::Preproc(_) => "preproc",
            HarnessError::InvalidConfig(_) => "invalid_config",
            HarnessError::UnknownAxis(_) => "unknown_axis",
            HarnessError::UnknownPreset(_) => "unknown_preset",
            HarnessError::Task { source, .. } => source.kind(),
            HarnessError::Output { .. } => "output",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Bavardage,
    SoftKmeans,
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bavardage" => Ok(Method::Bavardage),
            "soft_kmeans" | "soft-kmeans" => Ok(Method::SoftKmeans),
            other => Err(format!("unknown method {other:?}")),
        }
    }
}

/// Everything that determines an evaluation's numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub base: PathBuf,
    pub novel: PathBuf,
    pub task: TaskConfig,
    pub model: BavardageConfig,
    pub preproc: PreprocConfig,
    pub method: Method,
    pub tasks: usize,
    /// Keep per-task accuracies in the result (for paired tests).
    #[serde(default)]
    pub per_task: bool,
    /// Execution-only settings, excluded from the config echo.
    #[serde(skip)]
    pub workers: usize,
    #[serde(skip)]
    pub output: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(base: impl Into<PathBuf>, novel: impl Into<PathBuf>, setting: Setting) -> Self {
        Self {
            base: base.into(),
            novel: novel.into(),
            task: TaskConfig { setting, ..TaskConfig::default() },
            model: default_model(setting),
            preproc: PreprocConfig::default(),
            method: Method::Bavardage,
            tasks: 10_000,
            per_task: false,
            workers: 1,
            output: None,
        }
    }
}

/// Setting-dependent defaults: balanced → (10, 50, 2), unbalanced → (50, 50, 1)
/// for (t_km, t_vb, s_max).
pub fn default_model(setting: Setting) -> BavardageConfig {
    match setting {
        Setting::Balanced => BavardageConfig::default(),
        Setting::Dirichlet => BavardageConfig::unbalanced(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Preset {
    pub name: String,
    pub setting: Setting,
    pub t_km: f64,
    pub t_vb: f64,
    pub s_max: f64,
}

const PRESET_TABLE: &[(&str, [f64; 3], [f64; 3])] = &[
    // dataset, balanced (t_km, t_vb, s_max), unbalanced (t_km, t_vb, s_max)
    ("mini", [10.0, 50.0, 2.0], [50.0, 50.0, 1.0]),
    ("tiered", [10.0, 100.0, 2.0], [100.0, 100.0, 1.0]),
    ("cub", [10.0, 4.0, 5.0], [10.0, 4.0, 5.0]),
    ("fc100", [10.0, 50.0, 2.0], [50.0, 50.0, 1.0]),
    ("cifar-fs", [10.0, 50.0, 2.0], [50.0, 50.0, 1.0]),
];

const BACKBONES: &[&str] = &["", "-wrn", "-rn18", "-rn12"];

/// Every accepted preset name, e.g. `mini-wrn-unbalanced` or `cub-balanced`.
pub fn preset_names() -> Vec<String> {
    let mut out = Vec::new();
    for (dataset, _, _) in PRESET_TABLE {
        for backbone in BACKBONES {
            for setting in ["balanced", "unbalanced"] {
                out.push(format!("{dataset}{backbone}-{setting}"));
            }
        }
    }
    out
}

pub fn preset(name: &str) -> Result<Preset, HarnessError> {
    let unknown = || HarnessError::UnknownPreset(name.to_string());
    let (rest, setting) = if let Some(r) = name.strip_suffix("-unbalanced") {
        (r, Setting::Dirichlet)
    } else if let Some(r) = name.strip_suffix("-balanced") {
        (r, Setting::Balanced)
    } else {
        return Err(unknown());
    };
    for (dataset, balanced, unbalanced) in PRESET_TABLE {
        for backbone in BACKBONES {
            if rest == format!("{dataset}{backbone}") {
                let p = if setting == Setting::Balanced { balanced } else { unbalanced };
                return Ok(Preset {
                    name: name.to_string(),
                    setting,
                    t_km: p[0],
                    t_vb: p[1],
                    s_max: p[2],
                });
            }
        }
    }
    Err(unknown())
}

impl Preset {
    pub fn apply(&self, cfg: &mut RunConfig) {
        cfg.task.setting = self.setting;
        cfg.model.t_km = self.t_km;
        cfg.model.t_vb = self.t_vb;
        cfg.model.s_max = self.s_max;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Execution {
    pub workers: usize,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationResult {
    pub mean_accuracy: f64,
    /// 1.96 · sample std / √tasks.
    pub ci95: f64,
    pub tasks: usize,
    /// SHA-256 over the classes and rows drawn by every task, in task order.
    pub task_checksum: String,
    pub rng_algorithm: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_task_accuracies: Option<Vec<f64>>,
    pub config_echo: RunConfig,
    /// Runtime facts that vary between identical runs.
    pub execution: Execution,
}

impl EvaluationResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }
}

/// Mean and 95% half-width (normal approximation, n−1 sample std).
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

/// Bundles after preprocessing, plus the base statistics in that space.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub novel: FeatureBundle,
    pub stats: featurestore::BaseStatistics,
}

pub fn prepare(base: &FeatureBundle, novel: &FeatureBundle, cfg: &PreprocConfig) -> Result<PreparedData, HarnessError> {
    if base.dim() != novel.dim() {
        return Err(HarnessError::InvalidConfig(format!(
            "base dimension {} differs from novel dimension {}",
            base.dim(),
            novel.dim()
        )));
    }
    let overlap = base
        .class_names()
        .iter()
        .filter(|c| novel.class_names().contains(c))
        .count();
    if overlap > 0 {
        log::warn!("{overlap} class names appear in both the base and novel bundles");
    }
    cfg.validate()?;
    let mean = preproc::fit_base_mean(base.features(), cfg)?;
    let base_pp = preproc::preprocess(base.features(), &mean, cfg)?;
    let novel_pp = preproc::preprocess(novel.features(), &mean, cfg)?;
    if !novel_pp.zero_norm_rows.is_empty() {
        log::warn!("{} novel rows had zero norm after centering", novel_pp.zero_norm_rows.len());
    }
    let base_bundle = base.map_features(base_pp.features)?.with_split(SplitTag::Base);
    let stats = featurestore::compute_base_statistics(&base_bundle)?;
    Ok(PreparedData {
        novel: novel.map_features(novel_pp.features)?.with_split(SplitTag::Novel),
        stats,
    })
}

struct TaskOutcome {
    accuracy: f64,
    digest: [u8; 32],
}

fn task_digest(task: &sampler::TaskInstance) -> [u8; 32] {
    let mut h = Sha256::new();
    for list in [&task.class_map, &task.support_rows, &task.query_rows] {
        h.update((list.len() as u64).to_le_bytes());
        for &v in list.iter() {
            h.update((v as u64).to_le_bytes());
        }
    }
    h.finalize().into()
}

/// Loads the bundles named in `cfg` and evaluates.
pub fn evaluate(cfg: &RunConfig) -> Result<EvaluationResult, HarnessError> {
    let base = featurestore::load_bundle(&cfg.base)?.with_split(SplitTag::Base);
    let novel = featurestore::load_bundle(&cfg.novel)?.with_split(SplitTag::Novel);
    let prepared = prepare(&base, &novel, &cfg.preproc)?;
    evaluate_prepared(cfg, &prepared)
}

/// Evaluates on already prepared data; paths in `cfg` are only echoed.
pub fn evaluate_prepared(cfg: &RunConfig, data: &PreparedData) -> Result<EvaluationResult, HarnessError> {
    if cfg.tasks < 1 {
        return Err(HarnessError::InvalidConfig("tasks must be at least 1".into()));
    }
    cfg.task.validate()?;
    cfg.model.validate()?;
    let start = Instant::now();
    let model = match cfg.method {
        Method::Bavardage => Some(Bavardage::new(&data.stats, cfg.model.clone())?),
        Method::SoftKmeans => None,
    };

    let run_one = |index: u64| -> Result<TaskOutcome, HarnessError> {
        let task = sampler::sample_task(&data.novel, &cfg.task, index)?;
        let prediction = match &model {
            Some(m) => m.predict(&task)?,
            None => pipeline::run_soft_kmeans_baseline(&task, &data.stats, &cfg.model)?,
        };
        Ok(TaskOutcome {
            accuracy: prediction.accuracy(&task.query_labels_hidden),
            digest: task_digest(&task),
        })
    };
    let wrap = |index: u64, r: Result<TaskOutcome, HarnessError>| {
        r.map_err(|e| HarnessError::Task { index, source: Box::new(e) })
    };

    let workers = cfg.workers.max(1);
    let outcomes: Vec<TaskOutcome> = if workers == 1 {
        (0..cfg.tasks as u64).map(|i| wrap(i, run_one(i))).collect::<Result<_, _>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| HarnessError::InvalidConfig(format!("thread pool: {e}")))?;
        pool.install(|| {
            (0..cfg.tasks as u64)
                .into_par_iter()
                .map(|i| wrap(i, run_one(i)))
                .collect::<Result<Vec<_>, _>>()
        })?
    };

    let accuracies: Vec<f64> = outcomes.iter().map(|o| o.accuracy).collect();
    let (mean_accuracy, ci95) = mean_ci95(&accuracies);
    let mut checksum = Sha256::new();
    for o in &outcomes {
        checksum.update(o.digest);
    }
    let result = EvaluationResult {
        mean_accuracy,
        ci95,
        tasks: cfg.tasks,
        task_checksum: hex::encode(checksum.finalize()),
        rng_algorithm: RNG_ALGORITHM.to_string(),
        per_task_accuracies: cfg.per_task.then_some(accuracies),
        config_echo: cfg.clone(),
        execution: Execution {
            workers,
            wall_time_secs: start.elapsed().as_secs_f64(),
        },
    };
    if let Some(path) = &cfg.output {
        write_text(path, &result.to_json())?;
    }
    Ok(result)
}

fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    std::fs::write(path, text).map_err(|e| HarnessError::Output {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    TKm,
    TVb,
    SMax,
    BetaO,
    AlphaO,
    AlphaStar,
    Shots,
    QueryTotal,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 8] = [
        SweepAxis::TKm,
        SweepAxis::TVb,
        SweepAxis::SMax,
        SweepAxis::BetaO,
        SweepAxis::AlphaO,
        SweepAxis::AlphaStar,
        SweepAxis::Shots,
        SweepAxis::QueryTotal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::TKm => "t_km",
            SweepAxis::TVb => "t_vb",
            SweepAxis::SMax => "s_max",
            SweepAxis::BetaO => "beta_o",
            SweepAxis::AlphaO => "alpha_o",
            SweepAxis::AlphaStar => "alpha_star",
            SweepAxis::Shots => "shots",
            SweepAxis::QueryTotal => "query_total",
        }
    }

    /// Whether changing this axis changes the sampled tasks.
    pub fn alters_tasks(self) -> bool {
        matches!(self, SweepAxis::AlphaStar | SweepAxis::Shots | SweepAxis::QueryTotal)
    }

    pub fn apply(self, cfg: &mut RunConfig, value: f64) -> Result<(), HarnessError> {
        let count = || {
            if value >= 0.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(HarnessError::InvalidConfig(format!("{} needs an integer, got {value}", self.name())))
            }
        };
        match self {
            SweepAxis::TKm => cfg.model.t_km = value,
            SweepAxis::TVb => cfg.model.t_vb = value,
            SweepAxis::SMax => cfg.model.s_max = value,
            SweepAxis::BetaO => cfg.model.beta_o = value,
            SweepAxis::AlphaO => cfg.model.alpha_o = value,
            SweepAxis::AlphaStar => cfg.task.alpha_star = value,
            SweepAxis::Shots => cfg.task.shots = count()?,
            SweepAxis::QueryTotal => cfg.task.query_total = count()?,
        }
        Ok(())
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.replace('-', "_");
        SweepAxis::ALL
            .into_iter()
            .find(|a| a.name() == norm)
            .ok_or_else(|| HarnessError::UnknownAxis(s.to_string()))
    }
}

/// One evaluation per value along `axis`, all from the same seed.
pub fn sweep(cfg: &RunConfig, axis: &str, values: &[f64]) -> Result<Vec<EvaluationResult>, HarnessError> {
    let axis: SweepAxis = axis.parse()?;
    let base = featurestore::load_bundle(&cfg.base)?.with_split(SplitTag::Base);
    let novel = featurestore::load_bundle(&cfg.novel)?.with_split(SplitTag::Novel);
    let prepared = prepare(&base, &novel, &cfg.preproc)?;
    sweep_prepared(cfg, axis, values, &prepared)
}

pub fn sweep_prepared(
    cfg: &RunConfig,
    axis: SweepAxis,
    values: &[f64],
    data: &PreparedData,
) -> Result<Vec<EvaluationResult>, HarnessError> {
    values
        .iter()
        .map(|&v| {
            let mut c = cfg.clone();
            c.output = None;
            axis.apply(&mut c, v)?;
            evaluate_prepared(&c, data)
        })
        .collect()
}

/// CSV table `axis,value,mean_accuracy,ci95,tasks,task_checksum`.
pub fn sweep_table(axis: SweepAxis, values: &[f64], results: &[EvaluationResult]) -> String {
    let mut out = String::from("axis,value,mean_accuracy,ci95,tasks,task_checksum\n");
    for (v, r) in values.iter().zip(results) {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            axis.name(),
            v,
            r.mean_accuracy,
            r.ci95,
            r.tasks,
            r.task_checksum
        );
    }
    out
}

pub fn write_sweep_table(path: &Path, axis: SweepAxis, values: &[f64], results: &[EvaluationResult]) -> Result<(), HarnessError> {
    write_text(path, &sweep_table(axis, values, results))
}
