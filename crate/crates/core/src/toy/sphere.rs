//! Point sets on the unit sphere S² for the toy distillation experiment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelVector;
use crate::metrics::{tolerance, uniformity, UniformityParams};
use crate::numerics::{FeatureMatrix, EPSILON_NORM};

/// Noise scale divisor for cluster targets. With `t = 2` a single cluster of
/// 1000 points measures U ≈ 0.89 and T ≈ 0.66 at this value.
pub const DEFAULT_CLUSTER_CONCENTRATION: f64 = 2.2;

// Independent RNG streams derived from one run seed.
pub(crate) const STREAM_INPUTS: u64 = 1;
pub(crate) const STREAM_TARGETS: u64 = 2;
pub(crate) const STREAM_INIT: u64 = 3;

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn unit_gaussian_direction<R: Rng>(rng: &mut R, center: [f64; 3], spread: f64) -> [f64; 3] {
    loop {
        let mut v = [0.0; 3];
        for (vk, ck) in v.iter_mut().zip(center) {
            let g: f64 = rng.sample(StandardNormal);
            *vk = ck + g * spread;
        }
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm >= EPSILON_NORM {
            return [v[0] / norm, v[1] / norm, v[2] / norm];
        }
    }
}

fn sample_uniform_with<R: Rng>(rng: &mut R, n: usize) -> Result<FeatureMatrix> {
    let mut data = Vec::with_capacity(n * 3);
    for _ in 0..n {
        data.extend_from_slice(&unit_gaussian_direction(rng, [0.0; 3], 1.0));
    }
    FeatureMatrix::new_normalized(n, 3, data)
}

/// `n` independent uniform draws on S² (normalized standard Gaussians).
pub fn sample_uniform_sphere(n: usize, seed: u64) -> Result<FeatureMatrix> {
    if n == 0 {
        return Err(Error::InvalidConfig("need at least one point".into()));
    }
    sample_uniform_with(&mut rng_for(seed, STREAM_INPUTS), n)
}

/// Cluster centers at equal pairwise angles: the north pole for one cluster,
/// otherwise evenly spaced on the equator (120° apart for three).
pub fn cluster_centers(clusters: usize) -> Result<Vec<[f64; 3]>> {
    match clusters {
        0 => Err(Error::InvalidConfig("need at least one cluster".into())),
        1 => Ok(vec![[0.0, 0.0, 1.0]]),
        2 => Ok(vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]),
        k => Ok((0..k)
            .map(|c| {
                let a = std::f64::consts::TAU * c as f64 / k as f64;
                [a.cos(), a.sin(), 0.0]
            })
            .collect()),
    }
}

/// Clustered unit vectors: `normalize(center + g / concentration)` with
/// `g ~ N(0, I)`. Cluster `c` owns the contiguous rows `c·n/k .. (c+1)·n/k`.
pub fn make_cluster_targets(
    n: usize,
    clusters: usize,
    concentration: f64,
    seed: u64,
) -> Result<(FeatureMatrix, LabelVector)> {
    make_cluster_targets_with(&mut rng_for(seed, STREAM_TARGETS), n, clusters, concentration)
}

fn make_cluster_targets_with<R: Rng>(
    rng: &mut R,
    n: usize,
    clusters: usize,
    concentration: f64,
) -> Result<(FeatureMatrix, LabelVector)> {
    if !(concentration > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "cluster concentration must be positive, got {concentration}"
        )));
    }
    let centers = cluster_centers(clusters)?;
    if n == 0 || n % clusters != 0 {
        return Err(Error::IndivisibleClusterCount { n, clusters });
    }
    let per = n / clusters;
    let spread = 1.0 / concentration;
    let mut data = Vec::with_capacity(n * 3);
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per {
            data.extend_from_slice(&unit_gaussian_direction(rng, *center, spread));
            labels.push(c as u32);
        }
    }
    Ok((FeatureMatrix::new_normalized(n, 3, data)?, labels.into()))
}

/// Inputs, paired targets and the measured structure of the target space.
#[derive(Debug, Clone)]
pub struct SphereDataset {
    pub inputs: FeatureMatrix,
    pub targets: FeatureMatrix,
    pub labels: LabelVector,
    pub centers: Vec<[f64; 3]>,
    pub source_uniformity: f64,
    pub source_tolerance: f64,
}

impl SphereDataset {
    /// Input row `i` is paired with target row `i`.
    pub fn generate(
        n: usize,
        clusters: usize,
        concentration: f64,
        seed: u64,
        params: UniformityParams,
    ) -> Result<Self> {
        let inputs = sample_uniform_sphere(n, seed)?;
        let (targets, labels) = make_cluster_targets(n, clusters, concentration, seed)?;
        let source_uniformity = uniformity(&targets, params)?;
        let source_tolerance = tolerance(&targets, &labels)?;
        Ok(Self {
            inputs,
            targets,
            labels,
            centers: cluster_centers(clusters)?,
            source_uniformity,
            source_tolerance,
        })
    }
}

/// Result of a concentration sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub concentration: f64,
    pub uniformity: f64,
    pub tolerance: f64,
}

/// Picks the candidate concentration whose single-cluster target set, averaged
/// over `seeds`, lands closest (Euclidean in (U, T)) to `(target_u, target_t)`.
pub fn calibrate_concentration(
    n: usize,
    target_u: f64,
    target_t: f64,
    candidates: &[f64],
    seeds: &[u64],
    params: UniformityParams,
) -> Result<Calibration> {
    if candidates.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidConfig("calibration needs candidates and seeds".into()));
    }
    let mut best: Option<(f64, Calibration)> = None;
    for &kappa in candidates {
        let (mut u, mut t) = (0.0, 0.0);
        for &seed in seeds {
            let (targets, labels) = make_cluster_targets(n, 1, kappa, seed)?;
            u += uniformity(&targets, params)?;
            t += tolerance(&targets, &labels)?;
        }
        let s = seeds.len() as f64;
        let cal = Calibration {
            concentration: kappa,
            uniformity: u / s,
            tolerance: t / s,
        };
        let err = (cal.uniformity - target_u).powi(2) + (cal.tolerance - target_t).powi(2);
        if best.as_ref().map_or(true, |(e, _)| err < *e) {
            best = Some((err, cal));
        }
    }
    Ok(best.map(|(_, c)| c).expect("non-empty candidates"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{column_mean, l2_norm};

    #[test]
    fn single_uniform_point_is_unit() {
        let m = sample_uniform_sphere(1, 42).unwrap();
        assert!((l2_norm(m.row(0)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_sample_is_centered() {
        // 3σ of ‖mean‖ for n = 10⁴ uniform points is about 3·sqrt(3·(1/3)/n) = 0.03
        let m = sample_uniform_sphere(10_000, 7).unwrap();
        assert!(l2_norm(&column_mean(&m)) < 0.05);
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        assert_eq!(sample_uniform_sphere(50, 1).unwrap(), sample_uniform_sphere(50, 1).unwrap());
        assert_ne!(sample_uniform_sphere(50, 1).unwrap(), sample_uniform_sphere(50, 2).unwrap());
    }

    #[test]
    fn clusters_have_equal_sizes() {
        let (t, l) = make_cluster_targets(30, 3, 2.0, 0).unwrap();
        assert_eq!(t.rows(), 30);
        for c in 0..3 {
            assert_eq!(l.as_slice().iter().filter(|&&x| x == c).count(), 10);
        }
        assert!(matches!(
            make_cluster_targets(10, 3, 2.0, 0),
            Err(Error::IndivisibleClusterCount { n: 10, clusters: 3 })
        ));
    }

    #[test]
    fn huge_concentration_collapses_to_centers() {
        let (t, l) = make_cluster_targets(20, 1, 1e9, 5).unwrap();
        assert!((tolerance(&t, &l).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn three_centers_are_equiangular() {
        let c = cluster_centers(3).unwrap();
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            let d: f64 = (0..3).map(|k| c[a][k] * c[b][k]).sum();
            assert!((d + 0.5).abs() < 1e-12);
        }
    }
}
