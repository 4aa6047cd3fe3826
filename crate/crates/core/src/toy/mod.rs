//! Unit-sphere distillation toy: a small MLP learns to map uniform points on
//! S² onto a clustered target set under one of the distillation losses.

pub mod adam;
pub mod mlp;
pub mod run;
pub mod sphere;

pub use adam::adam_step;
pub use mlp::{mlp_backward, mlp_forward, ForwardCache, MlpParams, MlpTensors};
pub use run::{run_toy, run_toy_with, Snapshot, ToyConfig, ToyOutcome};
pub use sphere::{
    calibrate_concentration, cluster_centers, make_cluster_targets, sample_uniform_sphere,
    Calibration, SphereDataset, DEFAULT_CLUSTER_CONCENTRATION,
};
