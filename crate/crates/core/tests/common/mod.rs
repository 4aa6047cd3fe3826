//! Naive reference implementations and random instance generators shared by
//! the integration tests. The oracles follow the textbook formulas with plain
//! nested loops and no numerical tricks.

#![allow(dead_code)]

pub mod props;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use reldistill::{FeatureMatrix, LabelVector};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_rows(rng: &mut ChaCha8Rng, n: usize, c: usize) -> FeatureMatrix {
    let mut data = Vec::with_capacity(n * c);
    for _ in 0..n {
        let row: Vec<f64> = (0..c).map(|_| StandardNormal.sample(rng)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        data.extend(row.iter().map(|v| v / norm));
    }
    FeatureMatrix::new(n, c, data).unwrap()
}

pub fn raw_rows(rng: &mut ChaCha8Rng, n: usize, c: usize) -> FeatureMatrix {
    let data = (0..n * c).map(|_| rng.random_range(-3.0..3.0)).collect();
    FeatureMatrix::new(n, c, data).unwrap()
}

pub fn labels(rng: &mut ChaCha8Rng, n: usize, classes: u32) -> LabelVector {
    (0..n).map(|_| rng.random_range(0..classes)).collect::<Vec<_>>().into()
}

fn ip(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn contrastive(k: &FeatureMatrix, q: &FeatureMatrix, tau: f64) -> f64 {
    let n = k.rows();
    let mut total = 0.0;
    for i in 0..n {
        let mut denom = 0.0;
        for j in 0..n {
            denom += (ip(k.row(i), q.row(j)) / tau).exp();
        }
        let num = (ip(k.row(i), q.row(i)) / tau).exp();
        total += -(num / denom).ln();
    }
    total / n as f64
}

pub fn similarity(k: &FeatureMatrix, q: &FeatureMatrix) -> f64 {
    let n = k.rows();
    let mut total = 0.0;
    for i in 0..n {
        total += 1.0 - ip(k.row(i), q.row(i));
    }
    total / n as f64
}

pub fn cross(k: &FeatureMatrix, q: &FeatureMatrix) -> f64 {
    let n = k.rows();
    let mut off = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                off += (ip(k.row(i), q.row(j)) - ip(q.row(i), q.row(j))).abs();
            }
        }
    }
    similarity(k, q) + off / (n * n - n) as f64
}

pub fn intra(k: &FeatureMatrix, q: &FeatureMatrix) -> f64 {
    let n = k.rows();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += (ip(k.row(i), k.row(j)) - ip(q.row(i), q.row(j))).abs();
            }
        }
    }
    total / (n * n - n) as f64
}

pub fn uniformity(f: &FeatureMatrix, t: f64) -> f64 {
    let n = f.rows();
    let mut total = 0.0;
    let mut pairs = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let mut d2 = 0.0;
            for c in 0..f.cols() {
                let d = f.get(i, c) - f.get(j, c);
                d2 += d * d;
            }
            total += (-t * d2).exp();
            pairs += 1.0;
        }
    }
    -(total / pairs).ln()
}

pub fn tolerance(f: &FeatureMatrix, labels: &LabelVector) -> Option<f64> {
    let l = labels.as_slice();
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..f.rows() {
        for j in (i + 1)..f.rows() {
            if l[i] == l[j] {
                total += ip(f.row(i), f.row(j));
                count += 1;
            }
        }
    }
    (count > 0).then(|| total / count as f64)
}

pub fn gap(k: &FeatureMatrix, q: &FeatureMatrix) -> (Vec<f64>, f64) {
    let c = k.cols();
    let mut v = vec![0.0; c];
    for col in 0..c {
        let mk: f64 = (0..k.rows()).map(|r| k.get(r, col)).sum::<f64>() / k.rows() as f64;
        let mq: f64 = (0..q.rows()).map(|r| q.get(r, col)).sum::<f64>() / q.rows() as f64;
        v[col] = mk - mq;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (v, norm)
}

pub fn superpool(f: &FeatureMatrix, groups: &LabelVector) -> Vec<Vec<f64>> {
    let m = groups.as_slice().iter().max().map_or(0, |&g| g as usize + 1);
    let mut out = Vec::new();
    for g in 0..m {
        let members: Vec<usize> = (0..f.rows()).filter(|&r| groups.as_slice()[r] as usize == g).collect();
        let mut mean = vec![0.0; f.cols()];
        for &r in &members {
            for c in 0..f.cols() {
                mean[c] += f.get(r, c);
            }
        }
        for v in &mut mean {
            *v /= members.len() as f64;
        }
        out.push(mean);
    }
    out
}

/// Largest absolute difference, for reporting.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Random grouping of `n` rows into `1..=n` non-empty groups.
pub fn groups(rng: &mut ChaCha8Rng, n: usize) -> LabelVector {
    let m = rng.random_range(1..=n);
    let mut ids: Vec<u32> = (0..n).map(|r| if r < m { r as u32 } else { rng.random_range(0..m as u32) }).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        ids.swap(i, j);
    }
    ids.into()
}

/// Every oracle comparison on one random instance, as (name, error) pairs.
pub fn oracle_errors(seed: u64) -> Vec<(&'static str, f64)> {
    use reldistill::losses::{contrastive_loss, cross_modal_loss, intra_modal_loss, similarity_loss, ContrastiveConfig};
    use reldistill::metrics::{modality_gap, tolerance as lib_tol, uniformity as lib_u, UniformityParams};

    let mut r = rng(seed);
    let n = r.random_range(2..=10);
    let c = r.random_range(1..=6);
    let k = unit_rows(&mut r, n, c);
    let q = unit_rows(&mut r, n, c);
    let tau = [0.05, 0.1, 0.5, 1.0][r.random_range(0..4)];
    let t = [0.5, 1.0, 2.0, 3.0][r.random_range(0..4)];
    let l = labels(&mut r, n, 3);
    let raw = raw_rows(&mut r, n, c);
    let g = groups(&mut r, n);

    let mut out = vec![
        (
            "contrastive",
            (contrastive_loss(&k, &q, ContrastiveConfig::new(tau).unwrap()).unwrap().value - contrastive(&k, &q, tau)).abs(),
        ),
        ("similarity", (similarity_loss(&k, &q).unwrap().value - similarity(&k, &q)).abs()),
        ("cross", (cross_modal_loss(&k, &q).unwrap().value - cross(&k, &q)).abs()),
        ("intra", (intra_modal_loss(&k, &q).unwrap().value - intra(&k, &q)).abs()),
        ("uniformity", (lib_u(&k, UniformityParams::new(t).unwrap()).unwrap() - uniformity(&k, t)).abs()),
    ];
    let tol = match (lib_tol(&k, &l), tolerance(&k, &l)) {
        (Ok(a), Some(b)) => (a - b).abs(),
        (Err(reldistill::Error::NoSameLabelPairs), None) => 0.0,
        _ => f64::INFINITY,
    };
    out.push(("tolerance", tol));
    let lib_gap = modality_gap(&k, &q).unwrap();
    let (v, norm) = gap(&k, &q);
    out.push(("modality_gap", max_abs_diff(&lib_gap.vector, &v).max((lib_gap.norm - norm).abs())));
    let pooled = reldistill::losses::superpool(&raw, &g).unwrap();
    let expected: Vec<f64> = superpool(&raw, &g).concat();
    out.push(("superpool", max_abs_diff(pooled.as_slice(), &expected)));
    out
}
