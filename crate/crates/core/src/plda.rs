//! PLDA-style dimension reduction.
//!
//! Features are sphered with the base within-class scatter (rotation onto
//! its eigenbasis, then a per-axis scale λ^{-1/2} clamped to `s_max`), soft
//! class centroids are estimated in the sphered space with an offset `γ`
//! pulling them toward the origin, and the data is projected onto the
//! top `K−1` eigendirections of the between-class scatter of those centroids.
//!
//! Conventions: `rotation` holds the eigenvectors of the base scatter as
//! columns, so a row x is sphered as x′ = diag(s)·rotationᵀ·x, and the
//! composite map is W = rotation·diag(s)·V with u = Wᵀx.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::featurestore::BaseStatistics;
use crate::numerics::{fix_sign, sym_eigh, NumericsError};
use crate::softkmeans::SoftAssignments;

/// Eigenvalues of the base scatter are floored here before λ^{-1/2}.
pub const EIGEN_FLOOR: f64 = 1e-12;
/// Between-scatter eigenvalues at or below this fraction of its trace count as zero.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PldaError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("s_max must be positive, got {0}")]
    InvalidClamp(f64),
    #[error("class {0} has zero mass and gamma = 0")]
    EmptyClass(usize),
    #[error("between-class scatter needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("dimension mismatch: expected {expected} columns, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("assignments cover {assignments} rows but features have {features}")]
    RowMismatch { assignments: usize, features: usize },
}

/// Rotation and clamped scaling derived from the base within-class scatter.
#[derive(Debug, Clone)]
pub struct Sphering {
    pub rotation: DMatrix<f64>,
    pub scaling: DVector<f64>,
    /// Scatter eigenvalues, descending, aligned with `rotation` columns.
    pub eigenvalues: DVector<f64>,
}

impl Sphering {
    pub fn dim(&self) -> usize {
        self.scaling.len()
    }

    /// T = diag(s)·rotationᵀ, acting on column vectors.
    pub fn transform_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.scaling) * self.rotation.transpose()
    }

    /// Applies x′ = T·x to every row of `x`.
    pub fn sphere(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, PldaError> {
        if x.ncols() != self.dim() {
            return Err(PldaError::DimensionMismatch {
                expected: self.dim(),
                found: x.ncols(),
            });
        }
        let mut out = x * &self.rotation;
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col *= self.scaling[j];
        }
        Ok(out)
    }
}

pub fn build_sphering(stats: &BaseStatistics, s_max: f64) -> Result<Sphering, PldaError> {
    sphering_from_scatter(&stats.scatter, s_max)
}

/// s_i = min(max(λ_i, 1e-12)^{-1/2}, s_max) over the eigenpairs of `scatter`.
pub fn sphering_from_scatter(scatter: &DMatrix<f64>, s_max: f64) -> Result<Sphering, PldaError> {
    if !(s_max > 0.0) {
        return Err(PldaError::InvalidClamp(s_max));
    }
    let eig = sym_eigh(scatter)?;
    let scaling = eig.values.map(|l| l.max(EIGEN_FLOOR).powf(-0.5).min(s_max));
    Ok(Sphering {
        rotation: eig.vectors,
        scaling,
        eigenvalues: eig.values,
    })
}

/// m′_k = Σ_n o_nk x′_n / (γ + N_k), one row per class.
pub fn estimate_offset_centroids(
    sphered: &DMatrix<f64>,
    assignments: &SoftAssignments,
    gamma: f64,
) -> Result<DMatrix<f64>, PldaError> {
    if assignments.rows() != sphered.nrows() {
        return Err(PldaError::RowMismatch {
            assignments: assignments.rows(),
            features: sphered.nrows(),
        });
    }
    let (centroids, totals) = assignments.weighted_centroids(sphered, gamma);
    if let Some(k) = totals.iter().position(|&t| gamma + t <= 0.0) {
        return Err(PldaError::EmptyClass(k));
    }
    Ok(centroids)
}

/// Ψ = Σ_k (m′_k − m′)(m′_k − m′)ᵀ with m′ the unweighted centroid mean.
pub fn between_scatter(centroids: &DMatrix<f64>) -> Result<DMatrix<f64>, PldaError> {
    let centered = center_rows(centroids)?;
    Ok(centered.transpose() * &centered)
}

fn center_rows(centroids: &DMatrix<f64>) -> Result<DMatrix<f64>, PldaError> {
    let k = centroids.nrows();
    if k < 2 {
        return Err(PldaError::TooFewClasses(k));
    }
    let mean = centroids.row_mean();
    let mut centered = centroids.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    Ok(centered)
}

/// Orthonormal D×d basis whose leading columns span the top eigendirections
/// of the between-class scatter of `centroids`.
///
/// Ψ = CᵀC for the centered K×D centroid matrix C, so its nonzero
/// eigenpairs follow from the K×K Gram matrix CCᵀ: v = Cᵀq/√λ. Directions
/// with λ ≤ 1e-10·tr Ψ are dropped and the basis is completed with standard
/// basis vectors orthogonalized against it. Each column has its
/// largest-magnitude entry positive.
pub fn discriminant_basis(centroids: &DMatrix<f64>, d: usize) -> Result<DMatrix<f64>, PldaError> {
    let centered = center_rows(centroids)?;
    let dim = centered.ncols();
    if d > dim {
        return Err(PldaError::DimensionMismatch { expected: d, found: dim });
    }
    let gram = &centered * centered.transpose();
    let trace = gram.trace();
    let eig = sym_eigh(&gram)?;

    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(d);
    for i in 0..eig.dim() {
        if basis.len() == d {
            break;
        }
        let lambda = eig.values[i];
        if !(lambda > RANK_TOL * trace) {
            break;
        }
        let v = centered.transpose() * eig.vectors.column(i) / lambda.sqrt();
        push_orthonormal(&mut basis, v);
    }
    let mut axis = 0;
    while basis.len() < d && axis < dim {
        let mut e = DVector::zeros(dim);
        e[axis] = 1.0;
        push_orthonormal(&mut basis, e);
        axis += 1;
    }
    let mut out = DMatrix::zeros(dim, d);
    for (j, mut v) in basis.into_iter().enumerate() {
        fix_sign(&mut v);
        out.set_column(j, &v);
    }
    Ok(out)
}

// Two passes of modified Gram-Schmidt; vectors that collapse are skipped.
fn push_orthonormal(basis: &mut Vec<DVector<f64>>, mut v: DVector<f64>) {
    let start = v.norm();
    if start == 0.0 {
        return;
    }
    for _ in 0..2 {
        for b in basis.iter() {
            let proj = b.dot(&v);
            v.axpy(-proj, b, 1.0);
        }
    }
    let norm = v.norm();
    if norm > 1e-8 * start {
        basis.push(v / norm);
    }
}

/// Full projection produced for one set of assignments.
#[derive(Debug, Clone)]
pub struct PldaProjection {
    pub rotation: DMatrix<f64>,
    pub scaling: DVector<f64>,
    /// V: D×(K−1) orthonormal columns.
    pub basis: DMatrix<f64>,
    /// W = rotation·diag(s)·V, so that u = Wᵀx.
    pub composite: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct SpheredTask {
    /// X′, rows x′ = T·x.
    pub sphered: DMatrix<f64>,
    /// U = X′·V.
    pub reduced: DMatrix<f64>,
}

/// Centroids, between-scatter basis and reduced data for already sphered rows.
pub fn reduce(
    sphered: &DMatrix<f64>,
    assignments: &SoftAssignments,
    gamma: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>), PldaError> {
    let ways = assignments.ways();
    let centroids = estimate_offset_centroids(sphered, assignments, gamma)?;
    let basis = discriminant_basis(&centroids, ways - 1)?;
    let reduced = sphered * &basis;
    Ok((basis, reduced))
}

/// Sphering, offset centroids, between-class scatter and projection in one call.
pub fn plda_project(
    task_features: &DMatrix<f64>,
    stats: &BaseStatistics,
    s_max: f64,
    assignments: &SoftAssignments,
    gamma: f64,
) -> Result<(SpheredTask, PldaProjection), PldaError> {
    let sphering = build_sphering(stats, s_max)?;
    project_with(&sphering, task_features, assignments, gamma)
}

pub fn project_with(
    sphering: &Sphering,
    task_features: &DMatrix<f64>,
    assignments: &SoftAssignments,
    gamma: f64,
) -> Result<(SpheredTask, PldaProjection), PldaError> {
    let sphered = sphering.sphere(task_features)?;
    let (basis, reduced) = reduce(&sphered, assignments, gamma)?;
    let mut scaled_rotation = sphering.rotation.clone();
    for (j, mut col) in scaled_rotation.column_iter_mut().enumerate() {
        col *= sphering.scaling[j];
    }
    let composite = scaled_rotation * &basis;
    Ok((
        SpheredTask { sphered, reduced },
        PldaProjection {
            rotation: sphering.rotation.clone(),
            scaling: sphering.scaling.clone(),
            basis,
            composite,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurestore::{scatter_statistics, FeatureBundle, SplitTag};
    use crate::numerics::task_rng;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn stats_from_scatter(scatter: DMatrix<f64>) -> BaseStatistics {
        let d = scatter.nrows();
        BaseStatistics {
            mean: DVector::zeros(d),
            scatter,
            per_class_means: vec![],
            class_names: vec![],
        }
    }

    fn one_hot(labels: &[usize], ways: usize) -> SoftAssignments {
        SoftAssignments::new(labels.iter().map(|&l| Some(l)).collect(), ways).unwrap()
    }

    #[test]
    fn identity_scatter_gives_unit_scaling() {
        let s = build_sphering(&stats_from_scatter(DMatrix::identity(3, 3)), 2.0).unwrap();
        assert!(s.scaling.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn clamp_applies_to_small_eigenvalues() {
        let scatter = DMatrix::from_diagonal(&DVector::from_vec(vec![0.04, 4.0]));
        let s = build_sphering(&stats_from_scatter(scatter), 2.0).unwrap();
        // descending eigenvalue order: 4 then 0.04
        assert_abs_diff_eq!(s.scaling[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(s.scaling[1], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.eigenvalues[0], 4.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_scatter_saturates_the_clamp() {
        let s = build_sphering(&stats_from_scatter(DMatrix::zeros(4, 4)), 1.0).unwrap();
        assert!(s.scaling.iter().all(|&v| v == 1.0));
        assert!(matches!(
            build_sphering(&stats_from_scatter(DMatrix::zeros(2, 2)), 0.0),
            Err(PldaError::InvalidClamp(_))
        ));
    }

    #[test]
    fn offset_centroid_examples() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let hard = estimate_offset_centroids(&x, &one_hot(&[0, 0, 1], 2), 0.0).unwrap();
        assert_eq!(hard.row(0).iter().copied().collect::<Vec<_>>(), vec![2.0, 3.0]);
        assert_eq!(hard.row(1).iter().copied().collect::<Vec<_>>(), vec![5.0, 6.0]);

        let single = DMatrix::from_row_slice(1, 2, &[2.2, -1.1]);
        let m = estimate_offset_centroids(&single, &one_hot(&[1], 2), 10.0).unwrap();
        assert_abs_diff_eq!(m[(1, 0)], 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(m[(1, 1)], -0.1, epsilon = 1e-15);
        // class 0 is empty: zero numerator
        assert_eq!(m[(0, 0)], 0.0);
        assert_eq!(m[(0, 1)], 0.0);

        assert!(matches!(
            estimate_offset_centroids(&single, &one_hot(&[1], 2), 0.0),
            Err(PldaError::EmptyClass(0))
        ));
    }

    #[test]
    fn between_scatter_examples() {
        let same = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(between_scatter(&same).unwrap(), DMatrix::zeros(2, 2));
        let two = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 0.0]);
        let psi = between_scatter(&two).unwrap();
        assert_eq!(psi, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]));
        assert!(matches!(between_scatter(&DMatrix::zeros(1, 2)), Err(PldaError::TooFewClasses(1))));
    }

    fn gaussian(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = task_rng(seed, 11);
        DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn two_separated_classes_keep_their_distance() {
        // identity within-class scatter, classes at ±(3,0,0) plus noise
        let mut x = gaussian(20, 3, 5) * 0.1;
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        for n in 0..20 {
            x[(n, 0)] += if labels[n] == 0 { 3.0 } else { -3.0 };
        }
        let stats = stats_from_scatter(DMatrix::identity(3, 3));
        let (task, proj) = plda_project(&x, &stats, 2.0, &one_hot(&labels, 2), 0.0).unwrap();
        assert_eq!(task.reduced.ncols(), 1);
        let mean_of = |m: &DMatrix<f64>, c: usize| {
            let rows: Vec<usize> = (0..20).filter(|&n| labels[n] == c).collect();
            let mut acc = DVector::zeros(m.ncols());
            for &n in &rows {
                acc += m.row(n).transpose();
            }
            acc / rows.len() as f64
        };
        let gap_reduced = (mean_of(&task.reduced, 0) - mean_of(&task.reduced, 1)).norm();
        let gap_original = (mean_of(&x, 0) - mean_of(&x, 1)).norm();
        assert_abs_diff_eq!(gap_reduced, gap_original, epsilon = 1e-6);
        let v = proj.basis.column(0);
        assert!((v.transpose() * &v)[(0, 0)] - 1.0 < 1e-12);
    }

    #[test]
    fn uniform_assignments_give_a_valid_degenerate_projection() {
        let x = gaussian(12, 4, 2);
        let o = SoftAssignments::new(vec![None; 12], 3).unwrap();
        let centroids = estimate_offset_centroids(&x, &o, 10.0).unwrap();
        let psi = between_scatter(&centroids).unwrap();
        assert!(psi.amax() < 1e-24);
        let stats = stats_from_scatter(DMatrix::identity(4, 4));
        let (task, proj) = plda_project(&x, &stats, 2.0, &o, 10.0).unwrap();
        assert_eq!(task.reduced.shape(), (12, 2));
        let gram = proj.basis.transpose() * &proj.basis;
        assert!((gram - DMatrix::identity(2, 2)).amax() < 1e-12);
        assert!(task.reduced.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn whitening_identity_on_own_scatter() {
        // anisotropic correlated data, 3 classes
        let d = 5;
        let mix = gaussian(d, d, 77) + DMatrix::identity(d, d) * 2.0;
        let z = gaussian(300, d, 78);
        let mut x = z * mix.transpose();
        let labels: Vec<usize> = (0..300).map(|n| n % 3).collect();
        for n in 0..300 {
            x[(n, labels[n])] += 10.0;
        }
        let groups: Vec<Vec<usize>> = (0..3).map(|c| (0..300).filter(|&n| labels[n] == c).collect()).collect();
        let stats = scatter_statistics(&x, &groups, &["a".into(), "b".into(), "c".into()]);
        let sph = build_sphering(&stats, f64::INFINITY).unwrap();
        assert!(sph.eigenvalues.min() >= 1e-6);
        let t = sph.transform_matrix();
        let white = &t * &stats.scatter * t.transpose();
        assert!((white - DMatrix::identity(d, d)).amax() <= 1e-6);
        // same statement computed on the sphered data itself
        let xs = sph.sphere(&x).unwrap();
        let again = scatter_statistics(&xs, &groups, &stats.class_names);
        assert!((again.scatter - DMatrix::identity(d, d)).amax() <= 1e-6);
        let _ = FeatureBundle::new(x, &labels.iter().map(|l| l.to_string()).collect::<Vec<_>>(), SplitTag::Base)
            .unwrap();
    }

    fn random_assignments(n: usize, k: usize, seed: u64) -> SoftAssignments {
        let mut rng = task_rng(seed, 3);
        let m = DMatrix::from_fn(n, k, |_, _| rng.random_range(-3.0..3.0));
        SoftAssignments::from_matrix(crate::numerics::normalize_log_rows(&m), vec![None; n])
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn projection_contracts(seed in 0u64..10_000, ways in 2usize..6, dim in 6usize..12) {
            let n = 3 * ways + 4;
            let x = gaussian(n, dim, seed);
            let a = gaussian(dim, dim, seed + 1);
            let scatter = &a * a.transpose() / dim as f64;
            let stats = stats_from_scatter(scatter);
            let o = random_assignments(n, ways, seed);
            let (task, proj) = plda_project(&x, &stats, 2.0, &o, 10.0).unwrap();

            // d = K − 1 with orthonormal columns
            prop_assert_eq!(task.reduced.ncols(), ways - 1);
            let gram = proj.basis.transpose() * &proj.basis;
            prop_assert!((gram - DMatrix::identity(ways - 1, ways - 1)).amax() <= 1e-8);
            prop_assert!(proj.scaling.iter().all(|&s| s <= 2.0));

            // U = X′V exactly, and U = XW up to round-off
            prop_assert_eq!(&task.reduced, &(&task.sphered * &proj.basis));
            let recomposed = &x * &proj.composite;
            prop_assert!((&task.reduced - recomposed).norm() <= 1e-8 * task.reduced.norm().max(1e-300));

            // Ψ: symmetric PSD with rank ≤ K − 1
            let centroids = estimate_offset_centroids(&task.sphered, &o, 10.0).unwrap();
            let psi = between_scatter(&centroids).unwrap();
            let eig = sym_eigh(&psi).unwrap();
            let tr = psi.trace();
            prop_assert!(eig.values.iter().all(|&l| l >= -1e-10 * tr.max(1e-300)));
            let rank = eig.values.iter().filter(|&&l| l > 1e-10 * tr).count();
            prop_assert!(rank <= ways - 1);

            // the Gram route spans the same subspace as the full eigensolver on Ψ
            let full = eig.vectors.columns(0, rank).into_owned();
            let ours = proj.basis.columns(0, rank).into_owned();
            let p_full = &full * full.transpose();
            let p_ours = &ours * ours.transpose();
            prop_assert!((p_full - p_ours).amax() <= 1e-6);
        }
    }
}
