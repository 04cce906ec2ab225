//! The full classifier: Soft-KMEANS initialization, then `n_step` rounds of
//! {PLDA projection, VB M-step, VB E-step}, then argmax labels.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featurestore::BaseStatistics;
use crate::plda::{self, PldaError, Sphering};
use crate::sampler::TaskInstance;
use crate::softkmeans::{self, SoftAssignments, SoftKmeansError};
use crate::vb::{self, VBPriors, VbError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("task dimension {task} does not match base statistics dimension {stats}")]
    DimensionMismatch { task: usize, stats: usize },
    #[error(transparent)]
    SoftKmeans(#[from] SoftKmeansError),
    #[error(transparent)]
    Plda(#[from] PldaError),
    #[error(transparent)]
    Vb(#[from] VbError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BavardageConfig {
    /// Soft-KMEANS precision (covariance I / t_km).
    pub t_km: f64,
    /// VB shared precision Λ = t_vb·I.
    pub t_vb: f64,
    /// Upper bound on the sphering scale λ^{-1/2}.
    pub s_max: f64,
    pub alpha_o: f64,
    pub beta_o: f64,
    /// Offset pulling PLDA centroids toward the origin.
    pub gamma: f64,
    pub n_step: usize,
    pub softkmeans_max_iter: usize,
    pub softkmeans_tol: f64,
    /// Stop the VB loop once no responsibility moves by this much.
    #[serde(default)]
    pub early_stop: Option<f64>,
}

impl Default for BavardageConfig {
    /// Balanced-setting defaults.
    fn default() -> Self {
        Self {
            t_km: 10.0,
            t_vb: 50.0,
            s_max: 2.0,
            alpha_o: 2.0,
            beta_o: 10.0,
            gamma: 10.0,
            n_step: 20,
            softkmeans_max_iter: softkmeans::DEFAULT_MAX_ITER,
            softkmeans_tol: softkmeans::DEFAULT_TOL,
            early_stop: None,
        }
    }
}

impl BavardageConfig {
    /// Unbalanced-setting defaults.
    pub fn unbalanced() -> Self {
        Self {
            t_km: 50.0,
            t_vb: 50.0,
            s_max: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let positive = [
            ("t_km", self.t_km),
            ("t_vb", self.t_vb),
            ("s_max", self.s_max),
            ("alpha_o", self.alpha_o),
            ("beta_o", self.beta_o),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || v.is_nan() {
                return Err(PipelineError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.gamma >= 0.0) {
            return Err(PipelineError::InvalidConfig(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        if self.n_step < 1 {
            return Err(PipelineError::InvalidConfig("n_step must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub elbo: f64,
    pub max_change: f64,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    /// Predicted local class per query row.
    pub labels: Vec<usize>,
    pub assignments: SoftAssignments,
    pub trace: Vec<IterationRecord>,
}

impl Prediction {
    fn from_assignments(assignments: SoftAssignments, trace: Vec<IterationRecord>) -> Self {
        Self {
            labels: assignments.free_labels(),
            assignments,
            trace,
        }
    }

    /// Fraction of query rows labeled correctly.
    pub fn accuracy(&self, truth: &[usize]) -> f64 {
        assert_eq!(truth.len(), self.labels.len());
        if truth.is_empty() {
            return 0.0;
        }
        let correct = self.labels.iter().zip(truth).filter(|(a, b)| a == b).count();
        correct as f64 / truth.len() as f64
    }
}

/// A classifier bound to one set of base statistics.
///
/// The sphering depends only on the base scatter and `s_max`, so it is
/// computed once here and shared by every task.
#[derive(Debug, Clone)]
pub struct Bavardage {
    cfg: BavardageConfig,
    sphering: Sphering,
}

impl Bavardage {
    pub fn new(stats: &BaseStatistics, cfg: BavardageConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let sphering = plda::build_sphering(stats, cfg.s_max)?;
        Ok(Self { cfg, sphering })
    }

    pub fn config(&self) -> &BavardageConfig {
        &self.cfg
    }

    pub fn sphering(&self) -> &Sphering {
        &self.sphering
    }

    pub fn initial_assignments(&self, task: &TaskInstance) -> Result<SoftAssignments, PipelineError> {
        Ok(softkmeans::soft_kmeans_init(
            task,
            self.cfg.t_km,
            self.cfg.softkmeans_max_iter,
            self.cfg.softkmeans_tol,
        )?)
    }

    pub fn predict(&self, task: &TaskInstance) -> Result<Prediction, PipelineError> {
        if task.dim() != self.sphering.dim() {
            return Err(PipelineError::DimensionMismatch {
                task: task.dim(),
                stats: self.sphering.dim(),
            });
        }
        let init = self.initial_assignments(task)?;
        let sphered = self.sphering.sphere(&task.stacked_features())?;
        self.iterate(&sphered, init)
    }

    /// The VB loop on already sphered task rows.
    pub fn iterate(&self, sphered: &DMatrix<f64>, init: SoftAssignments) -> Result<Prediction, PipelineError> {
        let cfg = &self.cfg;
        let priors = VBPriors::new(cfg.alpha_o, cfg.beta_o, cfg.t_vb, init.ways() - 1);
        let mut current = init;
        let mut trace = Vec::with_capacity(cfg.n_step);
        for _ in 0..cfg.n_step {
            let (_, reduced) = plda::reduce(sphered, &current, cfg.gamma)?;
            let posterior = vb::m_step(&reduced, &current, &priors)?;
            let next = vb::e_step(&reduced, &posterior, &priors, current.clamp())?;
            let elbo = vb::compute_elbo(&reduced, &next, &posterior, &priors)?;
            let max_change = next.max_abs_change(&current);
            trace.push(IterationRecord { elbo, max_change });
            current = next;
            if cfg.early_stop.is_some_and(|th| max_change < th) {
                break;
            }
        }
        Ok(Prediction::from_assignments(current, trace))
    }
}

pub fn run_bavardage(
    task: &TaskInstance,
    stats: &BaseStatistics,
    cfg: &BavardageConfig,
) -> Result<Prediction, PipelineError> {
    Bavardage::new(stats, cfg.clone())?.predict(task)
}

/// Soft-KMEANS alone, with no projection and no VB refinement.
pub fn run_soft_kmeans_baseline(
    task: &TaskInstance,
    _stats: &BaseStatistics,
    cfg: &BavardageConfig,
) -> Result<Prediction, PipelineError> {
    cfg.validate()?;
    let o = softkmeans::soft_kmeans_init(task, cfg.t_km, cfg.softkmeans_max_iter, cfg.softkmeans_tol)?;
    Ok(Prediction::from_assignments(o, Vec::new()))
}
