//! Row-wise feature preprocessing: optional power transform, centering on
//! the base mean, then L2 normalization (CL2N by default).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreprocError {
    #[error("dimension mismatch: features have {features} columns, base mean has {mean}")]
    DimensionMismatch { features: usize, mean: usize },
    #[error("power_beta must lie in (0, 1], got {0}")]
    InvalidBeta(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocConfig {
    pub center: bool,
    pub l2_normalize: bool,
    /// Element-wise sign(x)·|x|^β applied before centering.
    pub power_beta: Option<f64>,
}

impl Default for PreprocConfig {
    fn default() -> Self {
        Self {
            center: true,
            l2_normalize: true,
            power_beta: None,
        }
    }
}

impl PreprocConfig {
    pub fn identity() -> Self {
        Self {
            center: false,
            l2_normalize: false,
            power_beta: None,
        }
    }

    pub fn validate(&self) -> Result<(), PreprocError> {
        match self.power_beta {
            Some(b) if !(b > 0.0 && b <= 1.0) => Err(PreprocError::InvalidBeta(b)),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub features: DMatrix<f64>,
    /// Rows whose norm was zero after centering; left unnormalized.
    pub zero_norm_rows: Vec<usize>,
}

fn power(x: f64, beta: f64) -> f64 {
    x.signum() * x.abs().powf(beta)
}

/// Mean of the base features after the configured power step, which is the
/// centering vector [`preprocess`] expects.
pub fn fit_base_mean(base: &DMatrix<f64>, cfg: &PreprocConfig) -> Result<DVector<f64>, PreprocError> {
    cfg.validate()?;
    let n = base.nrows().max(1) as f64;
    let mean = match cfg.power_beta {
        Some(b) => base.map(|v| power(v, b)).row_sum().transpose() / n,
        None => base.row_sum().transpose() / n,
    };
    Ok(mean)
}

pub fn preprocess(
    features: &DMatrix<f64>,
    base_mean: &DVector<f64>,
    cfg: &PreprocConfig,
) -> Result<Preprocessed, PreprocError> {
    cfg.validate()?;
    if features.ncols() != base_mean.len() {
        return Err(PreprocError::DimensionMismatch {
            features: features.ncols(),
            mean: base_mean.len(),
        });
    }
    let mut out = match cfg.power_beta {
        Some(b) => features.map(|v| power(v, b)),
        None => features.clone(),
    };
    let mut zero_norm_rows = Vec::new();
    for (r, mut row) in out.row_iter_mut().enumerate() {
        if cfg.center {
            row -= base_mean.transpose();
        }
        if cfg.l2_normalize {
            let norm = row.norm();
            if norm > 0.0 {
                row /= norm;
            } else {
                zero_norm_rows.push(r);
            }
        }
    }
    Ok(Preprocessed {
        features: out,
        zero_norm_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn identity_config_is_a_no_op() {
        let x = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 3.0, 0.0, 0.5, -0.25]);
        let out = preprocess(&x, &DVector::from_element(3, 7.0), &PreprocConfig::identity()).unwrap();
        assert_eq!(out.features, x);
        assert!(out.zero_norm_rows.is_empty());
    }

    #[test]
    fn row_at_base_mean_is_flagged() {
        let mean = DVector::from_vec(vec![1.0, 2.0]);
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 4.0, 6.0]);
        let out = preprocess(&x, &mean, &PreprocConfig::default()).unwrap();
        assert_eq!(out.zero_norm_rows, vec![0]);
        assert_eq!(out.features.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0]);
        assert_abs_diff_eq!(out.features[(1, 0)], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(out.features[(1, 1)], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn three_four_five() {
        let x = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        let out = preprocess(&x, &DVector::zeros(2), &PreprocConfig::default()).unwrap();
        assert_abs_diff_eq!(out.features[(0, 0)], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(out.features[(0, 1)], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn power_transform_precedes_centering() {
        let cfg = PreprocConfig { center: true, l2_normalize: false, power_beta: Some(0.5) };
        let base = DMatrix::from_row_slice(2, 1, &[4.0, 16.0]);
        let mean = fit_base_mean(&base, &cfg).unwrap();
        assert_abs_diff_eq!(mean[0], 3.0);
        let out = preprocess(&DMatrix::from_row_slice(1, 1, &[-9.0]), &mean, &cfg).unwrap();
        assert_abs_diff_eq!(out.features[(0, 0)], -6.0);
    }

    #[test]
    fn errors() {
        let x = DMatrix::<f64>::zeros(1, 3);
        assert!(matches!(
            preprocess(&x, &DVector::zeros(2), &PreprocConfig::default()),
            Err(PreprocError::DimensionMismatch { features: 3, mean: 2 })
        ));
        let cfg = PreprocConfig { power_beta: Some(1.5), ..Default::default() };
        assert!(matches!(preprocess(&x, &DVector::zeros(3), &cfg), Err(PreprocError::InvalidBeta(_))));
    }

    proptest! {
        #[test]
        fn unit_rows_and_row_independence(
            values in proptest::collection::vec(-10.0f64..10.0, 4 * 6),
            shift in 1usize..6,
        ) {
            let x = DMatrix::from_row_slice(6, 4, &values);
            let mean = DVector::from_vec(vec![0.5, -0.5, 1.0, 0.0]);
            let cfg = PreprocConfig::default();
            let out = preprocess(&x, &mean, &cfg).unwrap();
            for r in 0..6 {
                if !out.zero_norm_rows.contains(&r) {
                    prop_assert!((out.features.row(r).norm() - 1.0).abs() <= 1e-12);
                }
            }
            let perm: Vec<usize> = (0..6).map(|i| (i + shift) % 6).collect();
            let xp = DMatrix::from_fn(6, 4, |r, j| x[(perm[r], j)]);
            let outp = preprocess(&xp, &mean, &cfg).unwrap();
            for r in 0..6 {
                prop_assert_eq!(outp.features.row(r), out.features.row(perm[r]));
            }
        }
    }
}
