//! Uniformity, tolerance and modality gap of feature sets on the unit hypersphere.
//!
//! Expectations over pairs are taken over unordered distinct pairs `i < j`.
//! Above [`PairwiseOptions::max_exact_rows`] rows, a seeded uniform subsample
//! of rows is used so audits of large dumps terminate.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelVector;
use crate::numerics::{column_mean, dot, l2_norm, FeatureMatrix};

pub const DEFAULT_UNIFORMITY_T: f64 = 2.0;
pub const DEFAULT_MAX_EXACT_ROWS: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformityParams {
    t: f64,
}

impl UniformityParams {
    pub fn new(t: f64) -> Result<Self> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::InvalidConfig(format!("uniformity t must be positive, got {t}")));
        }
        Ok(Self { t })
    }

    pub fn t(&self) -> f64 {
        self.t
    }
}

impl Default for UniformityParams {
    fn default() -> Self {
        Self {
            t: DEFAULT_UNIFORMITY_T,
        }
    }
}

/// Controls the exact-versus-subsampled switch for O(N²) metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairwiseOptions {
    pub max_exact_rows: usize,
    pub subsample_seed: u64,
}

impl Default for PairwiseOptions {
    fn default() -> Self {
        Self {
            max_exact_rows: DEFAULT_MAX_EXACT_ROWS,
            subsample_seed: 0,
        }
    }
}

impl PairwiseOptions {
    /// Row indices to evaluate: all rows, or a sorted seeded subsample.
    fn rows_for(&self, n: usize) -> Option<Vec<usize>> {
        if n <= self.max_exact_rows || self.max_exact_rows < 2 {
            return None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.subsample_seed);
        let mut idx = sample(&mut rng, n, self.max_exact_rows).into_vec();
        idx.sort_unstable();
        Some(idx)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityGap {
    /// `mean(k) − mean(q)`, i.e. student mean minus teacher mean.
    pub vector: Vec<f64>,
    pub norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub uniformity: f64,
    pub tolerance: Option<f64>,
    pub modality_gap_norm: Option<f64>,
    pub modality_gap_vector: Option<Vec<f64>>,
}

/// `−log` of the mean Gaussian potential `exp(−t‖fᵢ − fⱼ‖²)` over distinct pairs.
pub fn uniformity(f: &FeatureMatrix, params: UniformityParams) -> Result<f64> {
    uniformity_with(f, params, PairwiseOptions::default())
}

pub fn uniformity_with(
    f: &FeatureMatrix,
    params: UniformityParams,
    opts: PairwiseOptions,
) -> Result<f64> {
    let n = f.rows();
    if n < 2 {
        return Err(Error::BatchTooSmall {
            required: 2,
            found: n,
        });
    }
    let rows = opts.rows_for(n);
    let idx = |a: usize| rows.as_ref().map_or(a, |r| r[a]);
    let m = rows.as_ref().map_or(n, Vec::len);
    let t = params.t;
    let mut acc = 0.0;
    for a in 0..m {
        let fa = f.row(idx(a));
        for b in (a + 1)..m {
            let d2 = 2.0 - 2.0 * dot(fa, f.row(idx(b)));
            acc += (-t * d2).exp();
        }
    }
    let pairs = (m * (m - 1) / 2) as f64;
    Ok(-(acc / pairs).ln())
}

/// Mean cosine similarity over distinct pairs that share a label.
pub fn tolerance(f: &FeatureMatrix, labels: &LabelVector) -> Result<f64> {
    tolerance_with(f, labels, PairwiseOptions::default())
}

pub fn tolerance_with(
    f: &FeatureMatrix,
    labels: &LabelVector,
    opts: PairwiseOptions,
) -> Result<f64> {
    let n = f.rows();
    if labels.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            found: labels.len(),
        });
    }
    let rows = opts.rows_for(n);
    let idx = |a: usize| rows.as_ref().map_or(a, |r| r[a]);
    let m = rows.as_ref().map_or(n, Vec::len);
    let l = labels.as_slice();
    let mut acc = 0.0;
    let mut count = 0usize;
    for a in 0..m {
        let ia = idx(a);
        let fa = f.row(ia);
        for b in (a + 1)..m {
            let ib = idx(b);
            if l[ia] == l[ib] {
                acc += dot(fa, f.row(ib));
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::NoSameLabelPairs);
    }
    Ok(acc / count as f64)
}

/// Difference of column means `mean(k) − mean(q)` and its ℓ2 norm.
/// Row counts may differ.
pub fn modality_gap(k: &FeatureMatrix, q: &FeatureMatrix) -> Result<ModalityGap> {
    if k.cols() != q.cols() {
        return Err(Error::shape(
            format!("{} columns", k.cols()),
            format!("{} columns", q.cols()),
        ));
    }
    let vector: Vec<f64> = column_mean(k)
        .into_iter()
        .zip(column_mean(q))
        .map(|(a, b)| a - b)
        .collect();
    let norm = l2_norm(&vector);
    Ok(ModalityGap { vector, norm })
}

/// Uniformity always; tolerance when labels are given (`None` when no pair
/// shares a label); gap when a teacher matrix is given.
pub fn report(
    k: &FeatureMatrix,
    q: Option<&FeatureMatrix>,
    labels: Option<&LabelVector>,
    params: UniformityParams,
    opts: PairwiseOptions,
) -> Result<MetricReport> {
    let uniformity = uniformity_with(k, params, opts)?;
    let tolerance = match labels {
        Some(l) => match tolerance_with(k, l, opts) {
            Ok(t) => Some(t),
            Err(Error::NoSameLabelPairs) => None,
            Err(e) => return Err(e),
        },
        None => None,
    };
    let gap = q.map(|q| modality_gap(k, q)).transpose()?;
    Ok(MetricReport {
        uniformity,
        tolerance,
        modality_gap_norm: gap.as_ref().map(|g| g.norm),
        modality_gap_vector: gap.map(|g| g.vector),
    })
}
