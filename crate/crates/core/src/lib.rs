//! Transductive few-shot classification by semi-supervised clustering.
//!
//! Precomputed feature vectors are loaded from disk ([`featurestore`]),
//! few-shot tasks are drawn under balanced or Dirichlet-unbalanced query
//! distributions ([`sampler`]) and each task is labeled by a Soft-KMEANS
//! initialization ([`softkmeans`]) followed by alternating PLDA dimension
//! reduction ([`plda`]) and variational Bayesian Gaussian-mixture updates
//! ([`vb`]), orchestrated in [`pipeline`]. [`harness`] runs whole
//! benchmarks and sweeps.

pub mod featurestore;
pub mod harness;
pub mod numerics;
pub mod pipeline;
pub mod plda;
pub mod preproc;
pub mod sampler;
pub mod softkmeans;
pub mod vb;

pub use featurestore::{BaseStatistics, FeatureBundle, SplitTag};
pub use pipeline::{run_bavardage, run_soft_kmeans_baseline, BavardageConfig, Prediction};
pub use sampler::{sample_task, TaskConfig, TaskInstance};
pub use softkmeans::SoftAssignments;
