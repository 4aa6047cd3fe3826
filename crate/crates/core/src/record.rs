//! Archived outcome of one toy run.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toy::ToyConfig;

pub const RUN_RECORD_FORMAT_VERSION: u32 = 1;

/// Sign convention of the stored modality gap.
pub const GAP_CONVENTION: &str = "mean(predictions) - mean(targets)";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceMetrics {
    pub uniformity: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iteration: u64,
    pub loss: f64,
    pub uniformity: f64,
    pub tolerance: f64,
    pub modality_gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub delta_uniformity: f64,
    pub delta_tolerance: f64,
    pub final_modality_gap: f64,
}

impl Summary {
    pub fn from_last(source: &SourceMetrics, last: &Checkpoint) -> Self {
        Self {
            delta_uniformity: (last.uniformity - source.uniformity).abs(),
            delta_tolerance: (last.tolerance - source.tolerance).abs(),
            final_modality_gap: last.modality_gap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub format_version: u32,
    pub config: ToyConfig,
    pub seed: u64,
    pub cluster_centers: Vec<[f64; 3]>,
    pub gap_convention: String,
    pub source: SourceMetrics,
    pub checkpoints: Vec<Checkpoint>,
    pub summary: Summary,
}

impl RunRecord {
    /// Checks the ordering and summary invariants.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != RUN_RECORD_FORMAT_VERSION {
            return Err(Error::SchemaMismatch(format!(
                "format_version {} (supported: {RUN_RECORD_FORMAT_VERSION})",
                self.format_version
            )));
        }
        let last = self
            .checkpoints
            .last()
            .ok_or_else(|| Error::InvariantViolation("record has no checkpoints".into()))?;
        if let Some(w) = self.checkpoints.windows(2).find(|w| w[0].iteration >= w[1].iteration) {
            return Err(Error::InvariantViolation(format!(
                "checkpoint iterations not strictly increasing: {} then {}",
                w[0].iteration, w[1].iteration
            )));
        }
        let expected = Summary::from_last(&self.source, last);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
        if !(close(expected.delta_uniformity, self.summary.delta_uniformity)
            && close(expected.delta_tolerance, self.summary.delta_tolerance)
            && close(expected.final_modality_gap, self.summary.final_modality_gap))
        {
            return Err(Error::InvariantViolation(
                "summary disagrees with the last checkpoint".into(),
            ));
        }
        Ok(())
    }

    pub fn last(&self) -> &Checkpoint {
        self.checkpoints.last().expect("validated records have checkpoints")
    }

    /// Stable one-line summary for scripts.
    pub fn summary_line(&self) -> String {
        format!(
            "dU={:.6} dT={:.6} G={:.6}",
            self.summary.delta_uniformity,
            self.summary.delta_tolerance,
            self.summary.final_modality_gap
        )
    }
}
