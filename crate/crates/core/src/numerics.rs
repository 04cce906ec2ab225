//! Shared numerical kernels: digamma, dense symmetric eigendecomposition,
//! row-wise log-space normalization and the seeded RNG contract.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma};
use thiserror::Error;

/// Absolute tolerance used to decide whether an input matrix is symmetric.
pub const SYMMETRY_TOL: f64 = 1e-6;

/// Human-readable name of the random generator used for every task stream.
///
/// Echoed into evaluation results so a run can be reproduced on another
/// platform.
pub const RNG_ALGORITHM: &str = "ChaCha20 (rand_chacha 0.9): seed_from_u64(seed), stream = task_index";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("digamma domain error: x = {0} must be positive")]
    DigammaDomain(f64),
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric: |A[{row},{col}] - A[{col},{row}]| = {gap:e}")]
    NotSymmetric { row: usize, col: usize, gap: f64 },
    #[error("matrix contains a non-finite entry at ({row},{col})")]
    NonFinite { row: usize, col: usize },
    #[error("symmetric eigensolver did not converge within {max_iter} iterations")]
    NoConvergence { max_iter: usize },
}

// B_{2k} / (2k) for k = 1..7.
const DIGAMMA_ASYMPTOTIC: [f64; 7] = [
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
];

const DIGAMMA_SHIFT: f64 = 10.0;

/// Digamma function ψ(x) = d/dx ln Γ(x) for x > 0.
///
/// Shifts x upward with ψ(x) = ψ(x+1) − 1/x until x ≥ 10, then evaluates
/// the asymptotic expansion ln x − 1/(2x) − Σ B_{2k}/(2k x^{2k}).
pub fn digamma(x: f64) -> Result<f64, NumericsError> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(NumericsError::DigammaDomain(x));
    }
    Ok(digamma_positive(x))
}

/// Digamma for arguments already known to be positive and finite.
pub(crate) fn digamma_positive(x: f64) -> f64 {
    debug_assert!(x > 0.0 && x.is_finite());
    let mut acc = 0.0;
    let mut z = x;
    while z < DIGAMMA_SHIFT {
        acc -= 1.0 / z;
        z += 1.0;
    }
    let inv2 = 1.0 / (z * z);
    let mut series = 0.0;
    let mut pow = inv2;
    for c in DIGAMMA_ASYMPTOTIC {
        series += c * pow;
        pow *= inv2;
    }
    acc + z.ln() - 0.5 / z - series
}

/// Eigenpairs of a real symmetric matrix, sorted by descending eigenvalue.
///
/// Column `i` of `vectors` is the unit eigenvector for `values[i]`; its
/// largest-magnitude entry is positive.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl EigenDecomposition {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// V·diag(λ)·Vᵀ.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let scaled = &self.vectors * DMatrix::from_diagonal(&self.values);
        scaled * self.vectors.transpose()
    }
}

pub fn check_symmetric(a: &DMatrix<f64>, tol: f64) -> Result<(), NumericsError> {
    let (rows, cols) = a.shape();
    if rows != cols {
        return Err(NumericsError::NotSquare { rows, cols });
    }
    for j in 0..cols {
        for i in 0..rows {
            if !a[(i, j)].is_finite() {
                return Err(NumericsError::NonFinite { row: i, col: j });
            }
        }
    }
    for j in 0..cols {
        for i in (j + 1)..rows {
            let gap = (a[(i, j)] - a[(j, i)]).abs();
            if gap > tol {
                return Err(NumericsError::NotSymmetric { row: i, col: j, gap });
            }
        }
    }
    Ok(())
}

/// Dense symmetric eigendecomposition.
///
/// The input is symmetrized as (A + Aᵀ)/2 after the symmetry check, so
/// round-off asymmetry below [`SYMMETRY_TOL`] never leaks into the result.
pub fn sym_eigh(a: &DMatrix<f64>) -> Result<EigenDecomposition, NumericsError> {
    check_symmetric(a, SYMMETRY_TOL)?;
    let n = a.nrows();
    if n == 0 {
        return Ok(EigenDecomposition {
            values: DVector::zeros(0),
            vectors: DMatrix::zeros(0, 0),
        });
    }
    let sym = (a + a.transpose()) * 0.5;
    let max_iter = 1000 * n.max(10);
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, max_iter)
        .ok_or(NumericsError::NoConvergence { max_iter })?;

    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps the solver's order among exactly equal eigenvalues.
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));

    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
        fix_sign(&mut col);
        vectors.set_column(dst, &col);
    }
    Ok(EigenDecomposition { values, vectors })
}

/// Flips `v` so that its largest-magnitude entry (first one on ties) is positive.
pub(crate) fn fix_sign(v: &mut DVector<f64>) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if !v.is_empty() && v[best] < 0.0 {
        v.neg_mut();
    }
}

/// Row-wise softmax of a matrix of log-weights.
///
/// Each row is shifted by its maximum before exponentiation, so large
/// logits never overflow.
pub fn normalize_log_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    normalize_log_rows_in_place(&mut out);
    out
}

pub fn normalize_log_rows_in_place(m: &mut DMatrix<f64>) {
    for mut row in m.row_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Log-sum-exp of a slice, stable for large magnitudes.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Independent random stream for one task: the run seed keys the generator
/// and the task index selects the ChaCha stream.
pub fn task_rng(seed: u64, task_index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(task_index);
    rng
}

/// One draw from Dir(alpha), by normalizing independent Gamma(alpha_k, 1) variates.
pub fn sample_dirichlet<R: Rng + ?Sized>(rng: &mut R, alpha: &[f64]) -> Vec<f64> {
    let mut draws: Vec<f64> = alpha
        .iter()
        .map(|&a| {
            Gamma::new(a, 1.0)
                .expect("Dirichlet concentration must be positive")
                .sample(rng)
        })
        .collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 {
        for d in &mut draws {
            *d /= total;
        }
    } else {
        // Every Gamma draw underflowed (tiny concentrations); fall back to a
        // vertex chosen uniformly.
        let pick = rng.random_range(0..draws.len());
        for (k, d) in draws.iter_mut().enumerate() {
            *d = if k == pick { 1.0 } else { 0.0 };
        }
    }
    draws
}
