//! Desk-scale federated learning with representation-space backdoor
//! detection.
//!
//! Clients train small MLPs on label-skewed partitions of a dataset; some
//! of them poison their data or rewrite their updates. Each round the
//! server probes every submitted model on a small root set, scores the
//! clients in representation and parameter space, flags suspects with a
//! rank-based consistency filter and a MAD-based norm-inflation filter, and
//! aggregates with flagged deltas scaled down rather than dropped.
//!
//! | module        | contents                                                   |
//! |---------------|------------------------------------------------------------|
//! | [`linalg`]    | matrices, covariance, power iteration, robust statistics   |
//! | [`nn`]        | MLP forward/backward and SGD                               |
//! | [`data`]      | synthetic and IDX datasets, Dirichlet splits, triggers     |
//! | [`attacks`]   | BadNet, scaling, DBA and adaptive attackers                |
//! | [`fera`]      | round metrics, filters, graduated aggregation              |
//! | [`baselines`] | FedAvg, Multi-Krum, coordinate-wise median                 |
//! | [`harness`]   | experiment config, round loop, CSV/JSON reports, sweeps    |
//! | [`oracle`]    | slow reference implementation of the round metrics         |
//!
//! See `examples/` for one runnable program per capability.

pub mod attacks;
pub mod baselines;
pub mod data;
pub mod error;
pub mod fera;
pub mod harness;
pub mod linalg;
pub mod nn;
pub mod oracle;

pub use error::{Error, Result};
pub use fera::{ClientUpdate, DetectionResult, FilterConfig, MetricSet};
pub use harness::{ExperimentConfig, Simulation};
pub use linalg::Matrix;
pub use nn::{FlatParams, MlpModel};
