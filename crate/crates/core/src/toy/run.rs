use serde::{Deserialize, Serialize};

use super::adam::adam_step;
use super::mlp::{mlp_backward, mlp_forward, MlpParams, DEFAULT_HIDDEN};
use super::sphere::{rng_for, SphereDataset, DEFAULT_CLUSTER_CONCENTRATION, STREAM_INIT};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::metrics::{modality_gap, tolerance, uniformity, UniformityParams, DEFAULT_UNIFORMITY_T};
use crate::numerics::FeatureMatrix;
use crate::record::{Checkpoint, RunRecord, SourceMetrics, Summary, GAP_CONVENTION, RUN_RECORD_FORMAT_VERSION};

/// Fully resolved settings of one toy run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub n_points: usize,
    pub clusters: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub loss: LossKind,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub cluster_concentration: f64,
    pub hidden: usize,
    pub uniformity_t: f64,
}

impl ToyConfig {
    /// Defaults of the one- and three-cluster settings: 1000 points for 50k
    /// steps, or 1500 points for 100k steps; Adam at 1e-4, full batch.
    pub fn defaults_for(clusters: usize, loss: LossKind) -> Self {
        let (n_points, iterations) = if clusters == 3 { (1500, 100_000) } else { (1000, 50_000) };
        Self {
            n_points,
            clusters,
            iterations,
            learning_rate: 1e-4,
            loss,
            seed: 0,
            checkpoint_every: 1000,
            cluster_concentration: DEFAULT_CLUSTER_CONCENTRATION,
            hidden: DEFAULT_HIDDEN,
            uniformity_t: DEFAULT_UNIFORMITY_T,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.clusters == 0 {
            return Err(Error::InvalidConfig("clusters must be at least 1".into()));
        }
        if self.n_points < self.loss.min_rows().max(2) {
            return Err(Error::BatchTooSmall {
                required: self.loss.min_rows().max(2),
                found: self.n_points,
            });
        }
        if self.n_points % self.clusters != 0 {
            return Err(Error::IndivisibleClusterCount {
                n: self.n_points,
                clusters: self.clusters,
            });
        }
        if self.n_points / self.clusters < 2 {
            return Err(Error::InvalidConfig("each cluster needs at least two points".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::InvalidConfig("checkpoint_every must be at least 1".into()));
        }
        if !(self.cluster_concentration > 0.0) || !self.cluster_concentration.is_finite() {
            return Err(Error::InvalidConfig("cluster concentration must be positive".into()));
        }
        if self.hidden == 0 {
            return Err(Error::InvalidConfig("hidden width must be at least 1".into()));
        }
        UniformityParams::new(self.uniformity_t)?;
        Ok(())
    }
}

/// Predictions recorded at one checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub iteration: u64,
    pub points: FeatureMatrix,
}

#[derive(Debug, Clone)]
pub struct ToyOutcome {
    pub record: RunRecord,
    pub snapshots: Vec<Snapshot>,
}

pub fn run_toy(config: &ToyConfig) -> Result<RunRecord> {
    Ok(run_toy_with(config, false, |_| {})?.record)
}

/// Full-batch training of the toy student. Checkpoints are taken at iteration
/// 0, every `checkpoint_every` steps, and after the last step. `on_checkpoint`
/// sees each checkpoint as it is recorded.
pub fn run_toy_with(
    config: &ToyConfig,
    snapshots: bool,
    mut on_checkpoint: impl FnMut(&Checkpoint),
) -> Result<ToyOutcome> {
    config.validate()?;
    let params_u = UniformityParams::new(config.uniformity_t)?;
    let data = SphereDataset::generate(
        config.n_points,
        config.clusters,
        config.cluster_concentration,
        config.seed,
        params_u,
    )?;
    let source = SourceMetrics {
        uniformity: data.source_uniformity,
        tolerance: data.source_tolerance,
    };
    let mut params = MlpParams::init_uniform(3, config.hidden, 3, &mut rng_for(config.seed, STREAM_INIT));

    let mut checkpoints = Vec::new();
    let mut shots = Vec::new();
    for step in 0..=config.iterations {
        let (pred, cache) = mlp_forward(&params, &data.inputs)?;
        let loss = config.loss.evaluate(&pred, &data.targets)?;
        if !loss.value.is_finite() || loss.grad_k.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { iteration: step });
        }
        if step % config.checkpoint_every == 0 || step == config.iterations {
            let cp = Checkpoint {
                iteration: step as u64,
                loss: loss.value,
                uniformity: uniformity(&pred, params_u)?,
                tolerance: tolerance(&pred, &data.labels)?,
                modality_gap: modality_gap(&pred, &data.targets)?.norm,
            };
            on_checkpoint(&cp);
            checkpoints.push(cp);
            if snapshots {
                shots.push(Snapshot {
                    iteration: step as u64,
                    points: pred.clone(),
                });
            }
        }
        if step == config.iterations {
            break;
        }
        let grads = mlp_backward(&params, &cache, &loss.grad_k)?;
        adam_step(&mut params, &grads, config.learning_rate)?;
        if !params.weights.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: step + 1 });
        }
    }

    let summary = Summary::from_last(&source, checkpoints.last().expect("at least one checkpoint"));
    let record = RunRecord {
        format_version: RUN_RECORD_FORMAT_VERSION,
        config: config.clone(),
        seed: config.seed,
        cluster_centers: data.centers,
        gap_convention: GAP_CONVENTION.to_string(),
        source,
        checkpoints,
        summary,
    };
    Ok(ToyOutcome {
        record,
        snapshots: shots,
    })
}
