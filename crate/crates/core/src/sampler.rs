//! Few-shot task sampling under balanced and Dirichlet-unbalanced query
//! distributions.
//!
//! Every task draws from its own random stream keyed by `(seed, task_index)`,
//! so tasks can be generated in any order or in parallel.

use nalgebra::DMatrix;
use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featurestore::FeatureBundle;
use crate::numerics::{sample_dirichlet, task_rng};

/// Number of Dirichlet redraws attempted before a class is declared exhausted.
pub const MAX_REDRAWS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("invalid task config: {0}")]
    InvalidConfig(String),
    #[error("balanced setting needs ways ({ways}) to divide query_total ({query_total})")]
    Indivisible { ways: usize, query_total: usize },
    #[error("bundle has {available} classes, task needs {ways}")]
    NotEnoughClasses { available: usize, ways: usize },
    #[error("class {class:?} has {available} samples, task needs {needed}")]
    ClassExhausted {
        class: String,
        available: usize,
        needed: usize,
    },
    #[error("proportions must be non-negative and sum to 1 (sum = {sum})")]
    NotASimplex { sum: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Balanced,
    Dirichlet,
}

impl std::str::FromStr for Setting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "balanced" => Ok(Setting::Balanced),
            "dirichlet" | "unbalanced" => Ok(Setting::Dirichlet),
            other => Err(format!("unknown setting {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    /// K
    pub ways: usize,
    /// L, labeled samples per class
    pub shots: usize,
    /// Q, unlabeled samples per task
    pub query_total: usize,
    pub setting: Setting,
    /// Dirichlet concentration for the unbalanced query split.
    pub alpha_star: f64,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            ways: 5,
            shots: 1,
            query_total: 75,
            setting: Setting::Balanced,
            alpha_star: 2.0,
            seed: 0,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.ways < 2 {
            return Err(SamplerError::InvalidConfig("ways must be at least 2".into()));
        }
        if self.shots < 1 {
            return Err(SamplerError::InvalidConfig("shots must be at least 1".into()));
        }
        if self.query_total < 1 {
            return Err(SamplerError::InvalidConfig("query_total must be at least 1".into()));
        }
        if !(self.alpha_star > 0.0 && self.alpha_star.is_finite()) {
            return Err(SamplerError::InvalidConfig("alpha_star must be positive".into()));
        }
        if self.setting == Setting::Balanced && !self.query_total.is_multiple_of(self.ways) {
            return Err(SamplerError::Indivisible {
                ways: self.ways,
                query_total: self.query_total,
            });
        }
        Ok(())
    }
}

/// One few-shot episode. Local class ids run over `0..ways`.
#[derive(Debug, Clone)]
pub struct TaskInstance {
    pub support_features: DMatrix<f64>,
    pub support_labels: Vec<usize>,
    pub query_features: DMatrix<f64>,
    /// Ground truth for scoring only; never read by the classifiers.
    pub query_labels_hidden: Vec<usize>,
    /// `class_map[k]` is the bundle's dense class id of local class `k`.
    pub class_map: Vec<usize>,
    /// Bundle rows drawn for the support set, aligned with `support_labels`.
    pub support_rows: Vec<usize>,
    /// Bundle rows drawn for the query set, aligned with `query_labels_hidden`.
    pub query_rows: Vec<usize>,
}

impl TaskInstance {
    pub fn ways(&self) -> usize {
        self.class_map.len()
    }

    pub fn num_support(&self) -> usize {
        self.support_labels.len()
    }

    pub fn num_query(&self) -> usize {
        self.query_labels_hidden.len()
    }

    pub fn dim(&self) -> usize {
        self.support_features.ncols()
    }

    /// Support rows stacked over query rows: the N×D task matrix.
    pub fn stacked_features(&self) -> DMatrix<f64> {
        let (ns, nq, d) = (self.num_support(), self.num_query(), self.dim());
        let mut x = DMatrix::zeros(ns + nq, d);
        x.rows_mut(0, ns).copy_from(&self.support_features);
        x.rows_mut(ns, nq).copy_from(&self.query_features);
        x
    }

    /// Query counts per local class.
    pub fn query_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.ways()];
        for &k in &self.query_labels_hidden {
            counts[k] += 1;
        }
        counts
    }

    /// The same task with local class ids relabeled by `perm` (old id `k`
    /// becomes `perm[k]`). Row order is unchanged.
    pub fn permute_classes(&self, perm: &[usize]) -> TaskInstance {
        let mut class_map = vec![0; perm.len()];
        for (old, &new) in perm.iter().enumerate() {
            class_map[new] = self.class_map[old];
        }
        TaskInstance {
            support_labels: self.support_labels.iter().map(|&k| perm[k]).collect(),
            query_labels_hidden: self.query_labels_hidden.iter().map(|&k| perm[k]).collect(),
            class_map,
            ..self.clone()
        }
    }
}

/// Largest-remainder apportionment of `total` items by `proportions`.
///
/// Each class first receives ⌊total·p_k⌋; the leftover items go to the
/// largest fractional remainders, ties broken toward the lower index.
pub fn apportion_counts(proportions: &[f64], total: usize) -> Result<Vec<usize>, SamplerError> {
    let sum: f64 = proportions.iter().sum();
    if proportions.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) || (sum - 1.0).abs() > 1e-9 {
        return Err(SamplerError::NotASimplex { sum });
    }
    let q = total as f64;
    let mut counts = Vec::with_capacity(proportions.len());
    let mut remainders = Vec::with_capacity(proportions.len());
    for &p in proportions {
        let raw = q * p;
        // absorb round-off such as 14.999999999999998
        let floor = (raw + 1e-9).floor();
        counts.push(floor as usize);
        remainders.push((raw - floor).max(0.0));
    }
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    // quantized so that remainders equal up to round-off compare as ties
    order.sort_by_key(|&k| (std::cmp::Reverse((remainders[k] * 1e9).round() as i64), k));
    if assigned <= total {
        for &k in order.iter().cycle().take(total - assigned) {
            counts[k] += 1;
        }
    } else {
        // only reachable through the 1e-9 slack above; take back from the smallest remainders
        for &k in order.iter().rev().cycle().take(assigned - total) {
            counts[k] -= 1;
        }
    }
    Ok(counts)
}

/// Draws task `task_index` of the stream defined by `cfg.seed`.
pub fn sample_task(
    bundle: &FeatureBundle,
    cfg: &TaskConfig,
    task_index: u64,
) -> Result<TaskInstance, SamplerError> {
    cfg.validate()?;
    let ways = cfg.ways;
    if bundle.num_classes() < ways {
        return Err(SamplerError::NotEnoughClasses {
            available: bundle.num_classes(),
            ways,
        });
    }
    let mut rng = task_rng(cfg.seed, task_index);
    let class_map = index::sample(&mut rng, bundle.num_classes(), ways).into_vec();
    let sizes: Vec<usize> = class_map.iter().map(|&c| bundle.class_index()[c].len()).collect();

    let shortfall = |counts: &[usize]| {
        (0..ways).find(|&k| sizes[k] < cfg.shots + counts[k])
    };
    let exhausted = |k: usize, counts: &[usize]| SamplerError::ClassExhausted {
        class: bundle.class_names()[class_map[k]].clone(),
        available: sizes[k],
        needed: cfg.shots + counts[k],
    };

    let counts = match cfg.setting {
        Setting::Balanced => {
            let counts = vec![cfg.query_total / ways; ways];
            if let Some(k) = shortfall(&counts) {
                return Err(exhausted(k, &counts));
            }
            counts
        }
        Setting::Dirichlet => {
            let alpha = vec![cfg.alpha_star; ways];
            let mut attempt = 0;
            loop {
                let p = sample_dirichlet(&mut rng, &alpha);
                let counts = apportion_counts(&p, cfg.query_total)?;
                match shortfall(&counts) {
                    None => break counts,
                    Some(k) if attempt + 1 >= MAX_REDRAWS => return Err(exhausted(k, &counts)),
                    Some(_) => attempt += 1,
                }
            }
        }
    };

    let mut support_rows = Vec::with_capacity(ways * cfg.shots);
    let mut support_labels = Vec::with_capacity(ways * cfg.shots);
    let mut query_rows = Vec::with_capacity(cfg.query_total);
    let mut query_labels = Vec::with_capacity(cfg.query_total);
    for (k, &c) in class_map.iter().enumerate() {
        let members = &bundle.class_index()[c];
        let picked = index::sample(&mut rng, members.len(), cfg.shots + counts[k]);
        for (j, i) in picked.into_iter().enumerate() {
            if j < cfg.shots {
                support_rows.push(members[i]);
                support_labels.push(k);
            } else {
                query_rows.push(members[i]);
                query_labels.push(k);
            }
        }
    }

    let x = bundle.features();
    let gather = |rows: &[usize]| DMatrix::from_fn(rows.len(), x.ncols(), |r, j| x[(rows[r], j)]);
    Ok(TaskInstance {
        support_features: gather(&support_rows),
        support_labels,
        query_features: gather(&query_rows),
        query_labels_hidden: query_labels,
        class_map,
        support_rows,
        query_rows,
    })
}
