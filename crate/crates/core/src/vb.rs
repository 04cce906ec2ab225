//! Variational Bayesian Gaussian mixture in the reduced space.
//!
//! Model: π ~ Dir(α_o·1), μ_k ~ N(m_o, (β_o Λ)^{-1}), z_n | π ~ Cat(π),
//! u_n | z_n = k ~ N(μ_k, Λ^{-1}) with a fixed shared precision Λ = t_vb·I.
//! The mean-field posterior q(Z)q(π)q(μ) keeps the conjugate forms
//! q(π) = Dir(α), q(μ_k) = N(m_k, (β_k Λ)^{-1}), q(z_n) = Cat(o_n).

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::numerics::{digamma_positive, normalize_log_rows_in_place};
use crate::softkmeans::SoftAssignments;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VbError {
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VBPriors {
    /// Symmetric Dirichlet concentration on the mixing weights.
    pub alpha_o: f64,
    /// Scales the prior precision of the centroids; larger keeps them near `m_o`.
    pub beta_o: f64,
    pub m_o: DVector<f64>,
    /// Λ = t_vb·I.
    pub t_vb: f64,
}

impl VBPriors {
    pub fn new(alpha_o: f64, beta_o: f64, t_vb: f64, dim: usize) -> Self {
        Self {
            alpha_o,
            beta_o,
            m_o: DVector::zeros(dim),
            t_vb,
        }
    }

    pub fn dim(&self) -> usize {
        self.m_o.len()
    }

    pub fn validate(&self) -> Result<(), VbError> {
        if !(self.alpha_o > 0.0 && self.alpha_o.is_finite()) {
            return Err(VbError::InvalidPrior(format!("alpha_o = {}", self.alpha_o)));
        }
        // β_o = 0 is accepted by the updates (flat centroid prior) but not by the ELBO.
        if !(self.beta_o >= 0.0 && self.beta_o.is_finite()) {
            return Err(VbError::InvalidPrior(format!("beta_o = {}", self.beta_o)));
        }
        if !(self.t_vb > 0.0 && self.t_vb.is_finite()) {
            return Err(VbError::InvalidPrior(format!("t_vb = {}", self.t_vb)));
        }
        if self.m_o.iter().any(|v| !v.is_finite()) {
            return Err(VbError::InvalidPrior("m_o has a non-finite entry".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VBPosterior {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// K×d, row k is m_k.
    pub means: DMatrix<f64>,
}

impl VBPosterior {
    /// The posterior at zero data, i.e. the prior itself.
    pub fn from_prior(priors: &VBPriors, ways: usize) -> Self {
        Self {
            alpha: vec![priors.alpha_o; ways],
            beta: vec![priors.beta_o; ways],
            means: DMatrix::from_fn(ways, priors.dim(), |_, j| priors.m_o[j]),
        }
    }

    pub fn ways(&self) -> usize {
        self.alpha.len()
    }

    /// E_q[log π_k] = ψ(α_k) − ψ(Σ_j α_j).
    pub fn expected_log_weights(&self) -> Vec<f64> {
        let total = digamma_positive(self.alpha.iter().sum());
        self.alpha.iter().map(|&a| digamma_positive(a) - total).collect()
    }
}

fn check_shapes(reduced: &DMatrix<f64>, assignments: &SoftAssignments, priors: &VBPriors) -> Result<(), VbError> {
    if reduced.nrows() != assignments.rows() {
        return Err(VbError::Shape(format!(
            "{} data rows vs {} assignment rows",
            reduced.nrows(),
            assignments.rows()
        )));
    }
    if reduced.ncols() != priors.dim() {
        return Err(VbError::Shape(format!(
            "data dimension {} vs prior dimension {}",
            reduced.ncols(),
            priors.dim()
        )));
    }
    Ok(())
}

/// α_k = α_o + N_k, β_k = β_o + N_k, m_k = (β_o m_o + Σ_n o_nk u_n) / β_k.
pub fn m_step(
    reduced: &DMatrix<f64>,
    assignments: &SoftAssignments,
    priors: &VBPriors,
) -> Result<VBPosterior, VbError> {
    priors.validate()?;
    check_shapes(reduced, assignments, priors)?;
    let totals = assignments.class_totals();
    let sums = assignments.matrix().transpose() * reduced;
    let ways = assignments.ways();
    let mut means = DMatrix::zeros(ways, priors.dim());
    let mut alpha = Vec::with_capacity(ways);
    let mut beta = Vec::with_capacity(ways);
    for k in 0..ways {
        let b = priors.beta_o + totals[k];
        alpha.push(priors.alpha_o + totals[k]);
        beta.push(b);
        for j in 0..priors.dim() {
            means[(k, j)] = if b > 0.0 {
                (priors.beta_o * priors.m_o[j] + sums[(k, j)]) / b
            } else {
                priors.m_o[j]
            };
        }
    }
    Ok(VBPosterior { alpha, beta, means })
}

/// log ρ_nk = E[log π_k] + ½log|Λ| − (d/2)log 2π − ½[d/β_k + (u_n − m_k)ᵀΛ(u_n − m_k)].
pub fn log_rho(reduced: &DMatrix<f64>, posterior: &VBPosterior, priors: &VBPriors) -> DMatrix<f64> {
    let d = reduced.ncols() as f64;
    let t = priors.t_vb;
    let elog_pi = posterior.expected_log_weights();
    let constant = 0.5 * d * t.ln() - 0.5 * d * LN_2PI;
    DMatrix::from_fn(reduced.nrows(), posterior.ways(), |n, k| {
        let sq = (reduced.row(n) - posterior.means.row(k)).norm_squared();
        elog_pi[k] + constant - 0.5 * (d / posterior.beta[k] + t * sq)
    })
}

/// Responsibilities from the current posterior; clamped rows stay one-hot.
pub fn e_step(
    reduced: &DMatrix<f64>,
    posterior: &VBPosterior,
    priors: &VBPriors,
    clamp: &[Option<usize>],
) -> Result<SoftAssignments, VbError> {
    if reduced.nrows() != clamp.len() {
        return Err(VbError::Shape(format!(
            "{} data rows vs {} clamp entries",
            reduced.nrows(),
            clamp.len()
        )));
    }
    if posterior.means.ncols() != reduced.ncols() {
        return Err(VbError::Shape(format!(
            "posterior dimension {} vs data dimension {}",
            posterior.means.ncols(),
            reduced.ncols()
        )));
    }
    let mut logits = log_rho(reduced, posterior, priors);
    normalize_log_rows_in_place(&mut logits);
    Ok(SoftAssignments::from_matrix(logits, clamp.to_vec()))
}

/// Evidence lower bound E_q[log p(U, Z, π, μ)] − E_q[log q(Z, π, μ)].
///
/// Clamped rows are one-hot and contribute no entropy, which is the bound
/// for a model where those labels are observed.
pub fn compute_elbo(
    reduced: &DMatrix<f64>,
    assignments: &SoftAssignments,
    posterior: &VBPosterior,
    priors: &VBPriors,
) -> Result<f64, VbError> {
    priors.validate()?;
    if !(priors.beta_o > 0.0) {
        return Err(VbError::InvalidPrior("the ELBO needs beta_o > 0".into()));
    }
    check_shapes(reduced, assignments, priors)?;
    let ways = posterior.ways();
    let d = priors.dim() as f64;
    let t = priors.t_vb;
    let o = assignments.matrix();
    let elog_pi = posterior.expected_log_weights();

    // E[log p(U | Z, μ)] + E[log p(Z | π)]
    let log_rho = log_rho(reduced, posterior, priors);
    let mut expected_joint = 0.0;
    for n in 0..o.nrows() {
        for k in 0..ways {
            let w = o[(n, k)];
            if w > 0.0 {
                expected_joint += w * log_rho[(n, k)];
            }
        }
    }

    // E[log p(π)] − E[log q(π)]
    let alpha_sum: f64 = posterior.alpha.iter().sum();
    let mut dirichlet = ln_gamma(ways as f64 * priors.alpha_o) - ways as f64 * ln_gamma(priors.alpha_o)
        - ln_gamma(alpha_sum);
    for k in 0..ways {
        dirichlet += ln_gamma(posterior.alpha[k]) + (priors.alpha_o - posterior.alpha[k]) * elog_pi[k];
    }

    // E[log p(μ)] − E[log q(μ)]
    let mut gaussian = 0.0;
    for k in 0..ways {
        let bk = posterior.beta[k];
        let dev = (posterior.means.row(k) - priors.m_o.transpose()).norm_squared();
        gaussian += 0.5 * d * (priors.beta_o / bk).ln()
            - 0.5 * priors.beta_o * t * dev
            - 0.5 * d * priors.beta_o / bk
            + 0.5 * d;
    }

    // −E[log q(Z)]
    let mut entropy = 0.0;
    for v in o.iter() {
        if *v > 0.0 {
            entropy -= v * v.ln();
        }
    }
    Ok(expected_joint + dirichlet + gaussian + entropy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{normalize_log_rows, task_rng};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn one_hot(labels: &[usize], ways: usize) -> SoftAssignments {
        SoftAssignments::new(labels.iter().map(|&l| Some(l)).collect(), ways).unwrap()
    }

    #[test]
    fn empty_class_keeps_prior() {
        let u = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let priors = VBPriors { m_o: DVector::from_vec(vec![0.5, -0.5]), ..VBPriors::new(2.0, 10.0, 50.0, 2) };
        let post = m_step(&u, &one_hot(&[0, 0], 3), &priors).unwrap();
        for k in 1..3 {
            assert_eq!(post.alpha[k], 2.0);
            assert_eq!(post.beta[k], 10.0);
            assert_eq!(post.means.row(k).iter().copied().collect::<Vec<_>>(), vec![0.5, -0.5]);
        }
    }

    #[test]
    fn flat_centroid_prior_gives_hard_means() {
        let u = DMatrix::from_row_slice(3, 1, &[1.0, 3.0, 10.0]);
        let priors = VBPriors::new(2.0, 0.0, 50.0, 1);
        let post = m_step(&u, &one_hot(&[0, 0, 1], 2), &priors).unwrap();
        assert_eq!(post.means[(0, 0)], 2.0);
        assert_eq!(post.means[(1, 0)], 10.0);
    }

    #[test]
    fn single_point_update() {
        let u = DMatrix::from_row_slice(1, 2, &[2.0, 0.0]);
        let priors = VBPriors::new(2.0, 10.0, 50.0, 2);
        let post = m_step(&u, &one_hot(&[1], 2), &priors).unwrap();
        assert_eq!(post.beta[1], 11.0);
        assert_eq!(post.alpha[1], 3.0);
        assert_abs_diff_eq!(post.means[(1, 0)], 2.0 / 11.0, epsilon = 1e-15);
        assert_eq!(post.means[(1, 1)], 0.0);
    }

    #[test]
    fn identical_classes_give_uniform_rows() {
        let u = DMatrix::from_row_slice(3, 2, &[0.1, 0.2, -1.0, 0.5, 3.0, 3.0]);
        let priors = VBPriors::new(2.0, 10.0, 50.0, 2);
        let post = VBPosterior::from_prior(&priors, 4);
        let o = e_step(&u, &post, &priors, &[None; 3]).unwrap();
        assert!((o.matrix() - DMatrix::from_element(3, 4, 0.25)).amax() < 1e-15);
    }

    #[test]
    fn query_at_a_centroid_prefers_it() {
        let priors = VBPriors::new(2.0, 10.0, 5.0, 2);
        let post = VBPosterior {
            alpha: vec![5.0; 3],
            beta: vec![12.0; 3],
            means: DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 4.0, 0.0, 0.0, 4.0]),
        };
        let u = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.1, 3.9]);
        let o = e_step(&u, &post, &priors, &[None, Some(0)]).unwrap();
        assert_eq!(o.hard_labels(), vec![1, 0]);
        assert_eq!(o.matrix()[(1, 0)], 1.0);
    }

    #[test]
    fn elbo_is_zero_without_data() {
        let priors = VBPriors::new(2.0, 10.0, 50.0, 3);
        let u = DMatrix::<f64>::zeros(0, 3);
        let o = SoftAssignments::new(vec![], 4).unwrap();
        let post = m_step(&u, &o, &priors).unwrap();
        assert_eq!(post, VBPosterior::from_prior(&priors, 4));
        assert_abs_diff_eq!(compute_elbo(&u, &o, &post, &priors).unwrap(), 0.0, epsilon = 1e-12);
    }

    /// Exact log marginal of the conjugate single-Gaussian model, dimension by
    /// dimension: y ~ N(m_o·1, t⁻¹I + (β_o t)⁻¹ 11ᵀ).
    fn conjugate_log_marginal(u: &DMatrix<f64>, priors: &VBPriors) -> f64 {
        let n = u.nrows();
        let t = priors.t_vb;
        let cov = DMatrix::identity(n, n) / t + DMatrix::from_element(n, n, 1.0 / (priors.beta_o * t));
        let chol = cov.clone().cholesky().unwrap();
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let mut total = 0.0;
        for j in 0..u.ncols() {
            let r = u.column(j).map(|v| v - priors.m_o[j]);
            let sol = chol.solve(&r);
            total += -0.5 * n as f64 * LN_2PI - 0.5 * log_det - 0.5 * r.dot(&sol);
        }
        total
    }

    #[test]
    fn single_class_elbo_is_the_exact_evidence() {
        let mut rng = task_rng(4, 4);
        let u = DMatrix::from_fn(9, 3, |_, _| rng.sample::<f64, _>(StandardNormal) + 0.7);
        let priors = VBPriors { m_o: DVector::from_vec(vec![0.1, 0.0, -0.3]), ..VBPriors::new(2.0, 10.0, 3.0, 3) };
        let o = SoftAssignments::new(vec![None; 9], 1).unwrap();
        let post = m_step(&u, &o, &priors).unwrap();
        let elbo = compute_elbo(&u, &o, &post, &priors).unwrap();
        assert_abs_diff_eq!(elbo, conjugate_log_marginal(&u, &priors), epsilon = 1e-6);
    }

    #[test]
    fn log_rho_matches_monte_carlo_expectation() {
        let priors = VBPriors::new(2.0, 10.0, 4.0, 2);
        let post = VBPosterior {
            alpha: vec![3.5, 6.0, 2.5],
            beta: vec![13.0, 16.0, 11.0],
            means: DMatrix::from_row_slice(3, 2, &[0.3, -0.1, -0.4, 0.2, 0.0, 0.6]),
        };
        let u = DMatrix::from_row_slice(1, 2, &[0.25, 0.1]);
        let analytic = log_rho(&u, &post, &priors);
        let mut rng = task_rng(21, 0);
        let samples = 200_000;
        for k in 0..3 {
            let (mut sum, mut sum_sq) = (0.0, 0.0);
            let sd = 1.0 / (post.beta[k] * priors.t_vb).sqrt();
            for _ in 0..samples {
                let pi = crate::numerics::sample_dirichlet(&mut rng, &post.alpha);
                let mut sq = 0.0;
                for j in 0..2 {
                    let mu = post.means[(k, j)] + sd * rng.sample::<f64, _>(StandardNormal);
                    sq += (u[(0, j)] - mu).powi(2);
                }
                let v = pi[k].ln() + priors.t_vb.ln() - LN_2PI - 0.5 * priors.t_vb * sq;
                sum += v;
                sum_sq += v * v;
            }
            let mean = sum / samples as f64;
            let se = ((sum_sq / samples as f64 - mean * mean) / samples as f64).sqrt();
            assert!((mean - analytic[(0, k)]).abs() <= 4.0 * se, "k={k}: {mean} vs {}", analytic[(0, k)]);
        }
    }

    fn random_problem(seed: u64, n: usize, ways: usize, d: usize) -> (DMatrix<f64>, SoftAssignments) {
        let mut rng = task_rng(seed, 9);
        let u = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let logits = DMatrix::from_fn(n, ways, |_, _| rng.random_range(-2.0..2.0));
        let clamp: Vec<Option<usize>> = (0..n).map(|i| if i < ways { Some(i) } else { None }).collect();
        (u, SoftAssignments::from_matrix(normalize_log_rows(&logits), clamp))
    }

    proptest! {
        #[test]
        fn posterior_counts_and_monotone_elbo(seed in 0u64..100_000, ways in 2usize..6, t in 0.5f64..80.0) {
            let d = ways - 1;
            let (u, mut o) = random_problem(seed, 20, ways, d);
            let priors = VBPriors::new(2.0, 10.0, t, d);
            let mut post = m_step(&u, &o, &priors).unwrap();
            let excess: f64 = post.alpha.iter().map(|a| a - priors.alpha_o).sum();
            prop_assert!((excess - 20.0).abs() <= 1e-9);
            prop_assert!(post.alpha.iter().all(|&a| a >= priors.alpha_o));
            prop_assert!(post.beta.iter().all(|&b| b >= priors.beta_o));

            let mut prev = compute_elbo(&u, &o, &post, &priors).unwrap();
            for _ in 0..5 {
                o = e_step(&u, &post, &priors, o.clamp()).unwrap();
                post = m_step(&u, &o, &priors).unwrap();
                let next = compute_elbo(&u, &o, &post, &priors).unwrap();
                prop_assert!(next >= prev - 1e-8, "{} -> {}", prev, next);
                prev = next;
            }
        }

        #[test]
        fn e_step_ignores_row_constants(seed in 0u64..1000, shift in -100.0f64..100.0) {
            let (u, o) = random_problem(seed, 8, 3, 2);
            let priors = VBPriors::new(2.0, 10.0, 7.0, 2);
            let post = m_step(&u, &o, &priors).unwrap();
            let logits = log_rho(&u, &post, &priors);
            let shifted = logits.map(|v| v + shift);
            prop_assert!((normalize_log_rows(&logits) - normalize_log_rows(&shifted)).amax() <= 1e-12);
        }
    }
}
