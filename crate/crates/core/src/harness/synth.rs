//! Synthetic feature bundles with a shared anisotropic within-class covariance.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::featurestore::{FeatureBundle, SplitTag};
use crate::numerics::task_rng;

// Stream reserved for the generator so it never overlaps task streams.
const SYNTH_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    /// Root-mean-square per-axis within-class standard deviation.
    pub cluster_std: f64,
    /// Distance of every class mean from the origin.
    pub separation: f64,
    /// Log-spread of the within-class variances across axes; 0 is isotropic.
    pub within_cov_skew: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 20,
            dim: 32,
            samples_per_class: 200,
            cluster_std: 1.0,
            separation: 10.0,
            within_cov_skew: 0.0,
            seed: 0,
        }
    }
}

/// Random orthonormal columns (rows × cols, cols ≤ rows) from the QR of a Gaussian matrix.
fn orthonormal_frame<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    // fix column signs so the frame is Haar-distributed and deterministic
    let mut q = q.columns(0, cols).into_owned();
    for j in 0..cols {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Per-axis variance multipliers exp(skew·z), z spread evenly on [−1, 1],
/// rescaled to average 1.
pub fn axis_variances(dim: usize, skew: f64) -> DVector<f64> {
    let raw = DVector::from_fn(dim, |i, _| {
        let z = if dim > 1 { -1.0 + 2.0 * i as f64 / (dim - 1) as f64 } else { 0.0 };
        (skew * z).exp()
    });
    let mean = raw.mean();
    raw / mean
}

/// Class means sit on a sphere of radius `separation` (mutually orthogonal
/// when `dim ≥ classes`); samples are N(mean, Σ_w) with one Σ_w shared by
/// every class. The first `classes / 2` classes form the base split, the
/// rest the novel split.
pub fn synth_generate(cfg: &SynthConfig) -> Result<(FeatureBundle, FeatureBundle), HarnessError> {
    let bad = |m: &str| Err(HarnessError::InvalidConfig(m.to_string()));
    if cfg.classes < 4 {
        return bad("synth needs at least 4 classes");
    }
    if cfg.dim < 1 || cfg.samples_per_class < 1 {
        return bad("synth needs dim >= 1 and samples_per_class >= 1");
    }
    if !(cfg.cluster_std > 0.0 && cfg.cluster_std.is_finite()) {
        return bad("cluster_std must be positive");
    }
    if !(cfg.separation >= 0.0 && cfg.separation.is_finite()) {
        return bad("separation must be non-negative");
    }
    if !(cfg.within_cov_skew >= 0.0 && cfg.within_cov_skew.is_finite()) {
        return bad("within_cov_skew must be non-negative");
    }

    let mut rng = task_rng(cfg.seed, SYNTH_STREAM);
    let means: Vec<DVector<f64>> = if cfg.dim >= cfg.classes {
        let frame = orthonormal_frame(&mut rng, cfg.dim, cfg.classes);
        frame.column_iter().map(|c| c * cfg.separation).collect()
    } else {
        (0..cfg.classes)
            .map(|_| {
                let g = DVector::from_fn(cfg.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
                g.normalize() * cfg.separation
            })
            .collect()
    };
    let rotation = orthonormal_frame(&mut rng, cfg.dim, cfg.dim);
    let scales = axis_variances(cfg.dim, cfg.within_cov_skew).map(|v| v.sqrt() * cfg.cluster_std);
    // x = mean + rotation·diag(scales)·g
    let mut mixing = rotation;
    for (j, mut col) in mixing.column_iter_mut().enumerate() {
        col *= scales[j];
    }

    let n_base = cfg.classes / 2;
    let mut splits = [(Vec::new(), Vec::new()), (Vec::new(), Vec::new())];
    for (c, mean) in means.iter().enumerate() {
        let split = usize::from(c >= n_base);
        for _ in 0..cfg.samples_per_class {
            let g = DVector::from_fn(cfg.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = mean + &mixing * g;
            splits[split].0.extend(x.iter().copied());
            splits[split].1.push(format!("class{c:03}"));
        }
    }
    let build = |(values, labels): &(Vec<f64>, Vec<String>), tag| {
        let m = DMatrix::from_row_slice(labels.len(), cfg.dim, values);
        FeatureBundle::new(m, labels, tag).map_err(HarnessError::from)
    };
    Ok((build(&splits[0], SplitTag::Base)?, build(&splits[1], SplitTag::Novel)?))
}
