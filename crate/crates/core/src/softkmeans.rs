//! Soft assignments and the temperature-scaled Soft-KMEANS initializer.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::numerics::normalize_log_rows_in_place;
use crate::sampler::TaskInstance;

pub const DEFAULT_MAX_ITER: usize = 20;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SoftKmeansError {
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("class {0} received zero total responsibility")]
    EmptyClass(usize),
    #[error("support label {label} out of range for {ways} classes")]
    LabelOutOfRange { label: usize, ways: usize },
}

/// N×K row-stochastic responsibilities with labeled rows clamped one-hot.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftAssignments {
    matrix: DMatrix<f64>,
    clamp: Vec<Option<usize>>,
}

impl SoftAssignments {
    /// Uniform responsibilities for free rows, one-hot rows where `clamp[n]` is set.
    pub fn new(clamp: Vec<Option<usize>>, ways: usize) -> Result<Self, SoftKmeansError> {
        if let Some(&label) = clamp.iter().flatten().find(|&&l| l >= ways) {
            return Err(SoftKmeansError::LabelOutOfRange { label, ways });
        }
        let matrix = DMatrix::from_element(clamp.len(), ways, 1.0 / ways as f64);
        let mut out = Self { matrix, clamp };
        out.reclamp();
        Ok(out)
    }

    /// Wraps a row-stochastic matrix, overwriting clamped rows.
    pub fn from_matrix(matrix: DMatrix<f64>, clamp: Vec<Option<usize>>) -> Self {
        assert_eq!(matrix.nrows(), clamp.len(), "clamp length must match rows");
        let mut out = Self { matrix, clamp };
        out.reclamp();
        out
    }

    /// Task layout: the first `support_labels.len()` rows are clamped,
    /// the following `num_query` rows are free.
    pub fn for_task(support_labels: &[usize], num_query: usize, ways: usize) -> Result<Self, SoftKmeansError> {
        let clamp = support_labels
            .iter()
            .map(|&l| Some(l))
            .chain(std::iter::repeat_n(None, num_query))
            .collect();
        Self::new(clamp, ways)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn clamp(&self) -> &[Option<usize>] {
        &self.clamp
    }

    pub fn support_mask(&self) -> Vec<bool> {
        self.clamp.iter().map(Option::is_some).collect()
    }

    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn ways(&self) -> usize {
        self.matrix.ncols()
    }

    /// Replaces the responsibilities (e.g. after an E-step) and re-clamps.
    pub fn set_matrix(&mut self, matrix: DMatrix<f64>) {
        assert_eq!(matrix.shape(), self.matrix.shape());
        self.matrix = matrix;
        self.reclamp();
    }

    pub fn reclamp(&mut self) {
        for (n, c) in self.clamp.iter().enumerate() {
            if let Some(label) = *c {
                for k in 0..self.matrix.ncols() {
                    self.matrix[(n, k)] = if k == label { 1.0 } else { 0.0 };
                }
            }
        }
    }

    /// N_k = Σ_n o_nk.
    pub fn class_totals(&self) -> Vec<f64> {
        (0..self.ways()).map(|k| self.matrix.column(k).sum()).collect()
    }

    /// Largest absolute entry-wise difference to `other`.
    pub fn max_abs_change(&self, other: &SoftAssignments) -> f64 {
        (&self.matrix - &other.matrix).amax()
    }

    /// Argmax per row, lowest index on ties.
    pub fn hard_labels(&self) -> Vec<usize> {
        self.matrix
            .row_iter()
            .map(|row| {
                let mut best = 0;
                for k in 1..row.len() {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    /// Argmax of the free rows only, in row order.
    pub fn free_labels(&self) -> Vec<usize> {
        self.hard_labels()
            .into_iter()
            .zip(&self.clamp)
            .filter(|(_, c)| c.is_none())
            .map(|(l, _)| l)
            .collect()
    }

    /// Weighted centroids Σ_n o_nk x_n / (offset + N_k), one row per class.
    pub(crate) fn weighted_centroids(&self, x: &DMatrix<f64>, offset: f64) -> (DMatrix<f64>, Vec<f64>) {
        let totals = self.class_totals();
        let mut centroids = self.matrix.transpose() * x;
        for (k, mut row) in centroids.row_iter_mut().enumerate() {
            let denom = offset + totals[k];
            if denom > 0.0 {
                row /= denom;
            }
        }
        (centroids, totals)
    }
}

/// Soft-KMEANS on the stacked task features, starting from support class means.
pub fn soft_kmeans_init(
    task: &TaskInstance,
    t_km: f64,
    max_iter: usize,
    tol: f64,
) -> Result<SoftAssignments, SoftKmeansError> {
    let x = task.stacked_features();
    let init = SoftAssignments::for_task(&task.support_labels, task.num_query(), task.ways())?;
    soft_kmeans(&x, init, t_km, max_iter, tol)
}

/// Alternates o_nk ∝ exp(−(t_km/2)‖x_n − μ_k‖²) on free rows with
/// μ_k = Σ_n o_nk x_n / N_k over all rows.
///
/// Centroids start from the clamped rows of `init`. Stops after `max_iter`
/// E-steps (at least one) or once no responsibility moves by `tol` or more.
pub fn soft_kmeans(
    x: &DMatrix<f64>,
    init: SoftAssignments,
    t_km: f64,
    max_iter: usize,
    tol: f64,
) -> Result<SoftAssignments, SoftKmeansError> {
    if !(t_km > 0.0 && t_km.is_finite()) {
        return Err(SoftKmeansError::InvalidTemperature(t_km));
    }
    let ways = init.ways();
    let labeled = SoftAssignments::from_matrix(
        DMatrix::zeros(init.rows(), ways),
        init.clamp().to_vec(),
    );
    let mut centroids = centroids_or_err(&labeled, x)?;
    let mut current = init;
    let sq_norms: Vec<f64> = x.row_iter().map(|r| r.norm_squared()).collect();

    for _ in 0..max_iter.max(1) {
        let cross = x * centroids.transpose();
        let c_norms: Vec<f64> = centroids.row_iter().map(|r| r.norm_squared()).collect();
        let mut logits = DMatrix::from_fn(x.nrows(), ways, |n, k| {
            let dist = (sq_norms[n] - 2.0 * cross[(n, k)] + c_norms[k]).max(0.0);
            -0.5 * t_km * dist
        });
        normalize_log_rows_in_place(&mut logits);
        let next = SoftAssignments::from_matrix(logits, current.clamp().to_vec());
        let change = next.max_abs_change(&current);
        current = next;
        if change < tol {
            break;
        }
        centroids = centroids_or_err(&current, x)?;
    }
    Ok(current)
}

fn centroids_or_err(o: &SoftAssignments, x: &DMatrix<f64>) -> Result<DMatrix<f64>, SoftKmeansError> {
    let (centroids, totals) = o.weighted_centroids(x, 0.0);
    match totals.iter().position(|&t| t <= 0.0) {
        Some(k) => Err(SoftKmeansError::EmptyClass(k)),
        None => Ok(centroids),
    }
}
