//! Adaptive target-oriented pseudo-labeling for domain adaptation.
//!
//! A small MLP feature extractor and linear head are trained on labeled data
//! while an auxiliary, non-parametric classifier built on a memory bank of
//! target samples supplies pseudo-labels for the unlabeled target data:
//!
//! * nearest-centroid (NC): cosine distance to EMA class centroids;
//! * neighborhood aggregation (NA): average of class-balanced, sharpened
//!   predictions of the `m` nearest bank entries, with the aggregated
//!   maximum used as a per-sample confidence weight.
//!
//! Baselines (source only, entropy minimization, plain and weighted
//! pseudo-labeling) share the same training loop.

pub mod autonet;
pub mod banks;
pub mod data;
pub mod error;
pub mod evalkit;
pub mod io;
pub mod labelers;
pub mod losses;
pub mod ndmath;
pub mod trainer;

pub use autonet::{ForwardCache, NetGrads, NetParams, NetSpec};
pub use banks::{CentroidBank, InstanceBank};
pub use data::{DomainDataset, Sample, SplitSpec, Task};
pub use error::{Error, Result};
pub use evalkit::RunResult;
pub use labelers::PseudoLabel;
pub use losses::LossOutput;
pub use ndmath::Matrix;
pub use trainer::{Method, TrainConfig};
