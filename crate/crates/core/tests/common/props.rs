//! Seed-driven property checks. Each draws its own instance from the seed and
//! returns a description of the first violation.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use reldistill::embed_io::{
    decode_embeddings, decode_labels, decode_run_record, encode_binary_labels, encode_embeddings,
    encode_run_record, Dtype,
};
use reldistill::losses::{LossKind, LossResult};
use reldistill::metrics::{modality_gap, tolerance, uniformity, UniformityParams};
use reldistill::record::{Checkpoint, RunRecord, SourceMetrics, Summary, GAP_CONVENTION, RUN_RECORD_FORMAT_VERSION};
use reldistill::toy::{run_toy, run_toy_with, ToyConfig};
use reldistill::{Error, FeatureMatrix, LabelVector};

use super::{labels, rng, unit_rows};

pub type Check = fn(u64) -> Result<(), String>;

pub const ALL_LOSSES: [LossKind; 5] = [
    LossKind::Contrastive { temperature: 0.1 },
    LossKind::Similarity,
    LossKind::Relational,
    LossKind::CrossOnly,
    LossKind::IntraOnly,
];

pub fn all() -> Vec<(&'static str, Check)> {
    vec![
        ("joint rotation invariance", rotation_invariance as Check),
        ("pair permutation invariance", permutation_invariance),
        ("loss bounds", loss_bounds),
        ("metric bounds", metric_bounds),
        ("relational additivity", relational_additivity),
        ("EMB1 round trip", emb_round_trip),
        ("label round trip", label_round_trip),
        ("run record round trip", record_round_trip),
        ("truncated input safety", corrupt_input_safety),
        ("run determinism", run_determinism),
    ]
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn eval(kind: LossKind, k: &FeatureMatrix, q: &FeatureMatrix) -> LossResult {
    kind.evaluate(k, q).expect("valid instance")
}

/// Haar-ish random orthogonal matrix by Gram–Schmidt on a Gaussian matrix.
pub fn random_orthogonal(r: &mut rand_chacha::ChaCha8Rng, c: usize) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    while rows.len() < c {
        let mut v: Vec<f64> = (0..c).map(|_| StandardNormal.sample(&mut *r)).collect();
        for u in &rows {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            rows.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    rows.concat()
}

fn instance(seed: u64) -> (rand_chacha::ChaCha8Rng, FeatureMatrix, FeatureMatrix, LabelVector) {
    let mut r = rng(seed);
    let n = r.random_range(2..=24);
    let c = r.random_range(1..=8);
    let k = unit_rows(&mut r, n, c);
    let q = unit_rows(&mut r, n, c);
    let l = labels(&mut r, n, 4);
    (r, k, q, l)
}

const INV_TOL: f64 = 1e-10;

pub fn rotation_invariance(seed: u64) -> Result<(), String> {
    let (mut r, k, q, l) = instance(seed);
    let rot = random_orthogonal(&mut r, k.cols());
    let (kr, qr) = (k.transform(&rot).unwrap(), q.transform(&rot).unwrap());
    for kind in ALL_LOSSES {
        let (a, b) = (eval(kind, &k, &q).value, eval(kind, &kr, &qr).value);
        ensure((a - b).abs() < INV_TOL, || format!("{kind}: {a} vs {b}"))?;
    }
    let p = UniformityParams::default();
    let (a, b) = (uniformity(&k, p).unwrap(), uniformity(&kr, p).unwrap());
    ensure((a - b).abs() < INV_TOL, || format!("uniformity {a} vs {b}"))?;
    if let (Ok(a), Ok(b)) = (tolerance(&k, &l), tolerance(&kr, &l)) {
        ensure((a - b).abs() < INV_TOL, || format!("tolerance {a} vs {b}"))?;
    }
    let (a, b) = (modality_gap(&k, &q).unwrap().norm, modality_gap(&kr, &qr).unwrap().norm);
    ensure((a - b).abs() < INV_TOL, || format!("gap {a} vs {b}"))
}

pub fn permutation_invariance(seed: u64) -> Result<(), String> {
    let (mut r, k, q, l) = instance(seed);
    let mut perm: Vec<usize> = (0..k.rows()).collect();
    perm.shuffle(&mut r);
    let (kp, qp, lp) = (k.permute_rows(&perm).unwrap(), q.permute_rows(&perm).unwrap(), l.permute(&perm));
    for kind in ALL_LOSSES {
        let (a, b) = (eval(kind, &k, &q), eval(kind, &kp, &qp));
        ensure((a.value - b.value).abs() < INV_TOL, || format!("{kind}: {} vs {}", a.value, b.value))?;
        // gradient rows move with their pairs
        let c = k.cols();
        for (i, &p) in perm.iter().enumerate() {
            for j in 0..c {
                let (x, y) = (b.grad_k[i * c + j], a.grad_k[p * c + j]);
                ensure((x - y).abs() < INV_TOL, || format!("{kind} grad row {i}: {x} vs {y}"))?;
            }
        }
    }
    let p = UniformityParams::default();
    let (a, b) = (uniformity(&k, p).unwrap(), uniformity(&kp, p).unwrap());
    ensure((a - b).abs() < INV_TOL, || format!("uniformity {a} vs {b}"))?;
    if let (Ok(a), Ok(b)) = (tolerance(&k, &l), tolerance(&kp, &lp)) {
        ensure((a - b).abs() < INV_TOL, || format!("tolerance {a} vs {b}"))?;
    }
    Ok(())
}

pub fn loss_bounds(seed: u64) -> Result<(), String> {
    let (_, k, q, _) = instance(seed);
    const SLACK: f64 = 1e-12;
    let con = eval(LossKind::Contrastive { temperature: 0.1 }, &k, &q).value;
    ensure(con >= -SLACK, || format!("contrastive {con} < 0"))?;
    let sim = eval(LossKind::Similarity, &k, &q).value;
    ensure((-SLACK..=2.0 + SLACK).contains(&sim), || format!("similarity {sim}"))?;
    let cross = eval(LossKind::CrossOnly, &k, &q).value;
    ensure(cross >= sim - SLACK, || format!("cross {cross} < similarity {sim}"))?;
    let intra = eval(LossKind::IntraOnly, &k, &q).value;
    ensure((-SLACK..=2.0 + SLACK).contains(&intra), || format!("intra {intra}"))
}

pub fn metric_bounds(seed: u64) -> Result<(), String> {
    let (mut r, k, _, l) = instance(seed);
    let t = r.random_range(0.1..5.0);
    let u = uniformity(&k, UniformityParams::new(t).unwrap()).unwrap();
    ensure((-1e-12..=4.0 * t + 1e-12).contains(&u), || format!("U={u} outside [0, {}]", 4.0 * t))?;
    match tolerance(&k, &l) {
        Ok(v) => ensure((-1.0 - 1e-12..=1.0 + 1e-12).contains(&v), || format!("T={v}")),
        Err(Error::NoSameLabelPairs) => Ok(()),
        Err(e) => Err(e.to_string()),
    }
}

pub fn relational_additivity(seed: u64) -> Result<(), String> {
    let (_, k, q, _) = instance(seed);
    let rel = eval(LossKind::Relational, &k, &q).value;
    let sum = eval(LossKind::IntraOnly, &k, &q).value + eval(LossKind::CrossOnly, &k, &q).value;
    ensure(rel == sum, || format!("relational {rel} != intra + cross {sum}"))
}

fn bits(m: &FeatureMatrix) -> Vec<u64> {
    m.as_slice().iter().map(|v| v.to_bits()).collect()
}

pub fn emb_round_trip(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let (n, c) = (r.random_range(1..=30), r.random_range(1..=9));
    let scale = 10f64.powi(r.random_range(-30..30));
    let m = FeatureMatrix::new(n, c, (0..n * c).map(|_| r.random_range(-1.0..1.0) * scale).collect()).unwrap();
    let back = decode_embeddings(&encode_embeddings(&m, Dtype::F64).unwrap()).map_err(|e| e.to_string())?;
    ensure(bits(&back) == bits(&m) && back.shape() == m.shape(), || "f64 payload changed".into())?;
    let narrow = m.map(|v| v as f32 as f64).unwrap();
    let back = decode_embeddings(&encode_embeddings(&narrow, Dtype::F32).unwrap()).map_err(|e| e.to_string())?;
    ensure(bits(&back) == bits(&narrow), || "f32 payload changed".into())
}

pub fn label_round_trip(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let n = r.random_range(0..=40);
    let l: LabelVector = (0..n).map(|_| r.random::<u32>() >> r.random_range(0..32)).collect::<Vec<_>>().into();
    let bin = decode_labels(&encode_binary_labels(&l).unwrap()).map_err(|e| e.to_string())?;
    ensure(bin == l, || "binary labels changed".into())?;
    let text: String = l.as_slice().iter().map(|v| format!("{v}\n")).collect();
    let back = decode_labels(text.as_bytes()).map_err(|e| e.to_string())?;
    ensure(back == l, || "text labels changed".into())
}

pub fn random_record(r: &mut rand_chacha::ChaCha8Rng) -> RunRecord {
    let mut f = || r.random_range(-2.0..2.0) * 10f64.powi(r.random_range(-8..3));
    let source = SourceMetrics { uniformity: f(), tolerance: f() };
    let mut checkpoints = Vec::new();
    let mut it = 0u64;
    for _ in 0..(1 + (f().abs() * 7.0) as usize % 6) {
        checkpoints.push(Checkpoint { iteration: it, loss: f(), uniformity: f(), tolerance: f(), modality_gap: f().abs() });
        it += 1 + (f().abs() * 1000.0) as u64;
    }
    let summary = Summary::from_last(&source, checkpoints.last().unwrap());
    let mut config = ToyConfig::defaults_for(3, ALL_LOSSES[(f().abs() * 10.0) as usize % 5]);
    config.learning_rate = f().abs() + 1e-9;
    RunRecord {
        format_version: RUN_RECORD_FORMAT_VERSION,
        seed: config.seed,
        config,
        cluster_centers: vec![[f(), f(), f()]],
        gap_convention: GAP_CONVENTION.into(),
        source,
        checkpoints,
        summary,
    }
}

pub fn record_round_trip(seed: u64) -> Result<(), String> {
    let rec = random_record(&mut rng(seed));
    let text = encode_run_record(&rec).map_err(|e| e.to_string())?;
    let back = decode_run_record(&text).map_err(|e| e.to_string())?;
    ensure(back == rec, || "record changed".into())?;
    ensure(encode_run_record(&back).unwrap() == text, || "re-encoding differs".into())
}

/// Truncated, extended and bit-flipped files must error, never panic or
/// allocate beyond what the bytes can hold.
pub fn corrupt_input_safety(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let n = r.random_range(1..6);
    let m = unit_rows(&mut r, n, 3);
    let mut bytes = encode_embeddings(&m, Dtype::F64).unwrap();
    match r.random_range(0..3) {
        0 => bytes.truncate(r.random_range(0..bytes.len())),
        1 => bytes.extend((0..r.random_range(1..9)).map(|_| r.random::<u8>())),
        _ => {
            let i = r.random_range(4..13);
            bytes[i] ^= 1 << r.random_range(0..8);
        }
    }
    let _ = decode_embeddings(&bytes);
    let _ = decode_labels(&bytes);
    Ok(())
}

pub fn tiny_config(seed: u64) -> ToyConfig {
    let mut r = rng(seed);
    let clusters = [1, 2, 3][r.random_range(0..3)];
    let mut cfg = ToyConfig::defaults_for(clusters, ALL_LOSSES[r.random_range(0..5)]);
    cfg.n_points = clusters * r.random_range(2..=6);
    cfg.iterations = r.random_range(0..=12);
    cfg.checkpoint_every = r.random_range(1..=5);
    cfg.hidden = r.random_range(1..=8);
    cfg.learning_rate = 10f64.powf(r.random_range(-4.0..-1.0));
    cfg.seed = r.random();
    cfg
}

pub fn run_determinism(seed: u64) -> Result<(), String> {
    let cfg = tiny_config(seed);
    let a = run_toy(&cfg);
    let b = run_toy_with(&cfg, true, |_| {});
    match (a, b) {
        (Ok(a), Ok(b)) => {
            ensure(encode_run_record(&a).unwrap() == encode_run_record(&b.record).unwrap(), || {
                format!("records differ for {cfg:?}")
            })?;
            for s in &b.snapshots {
                for row in s.points.row_iter() {
                    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    ensure((n - 1.0).abs() <= 1e-9, || format!("snapshot row norm {n}"))?;
                }
            }
            Ok(())
        }
        // a one-unit hidden layer can die or collapse a row; both runs must agree
        (Err(a), Err(b)) => ensure(a.to_string() == b.to_string(), || format!("{a} vs {b}")),
        (a, b) => Err(format!("outcomes differ: {:?} vs {:?}", a.err(), b.err().map(|e| e.to_string()))),
    }
}
