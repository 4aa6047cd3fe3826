//! Central finite-difference checks of the analytic loss gradients and of the
//! full student chain (MLP, row normalization, loss).
//!
//! Each trial draws a fresh instance from `seed + trial`, so a failing trial
//! can be replayed on its own. Instances whose relational `|·|` arguments or
//! ReLU pre-activations lie within the kink margin of zero are skipped and
//! counted, since a finite difference straddling a kink measures nothing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::{kink_distance, LossKind};
use crate::numerics::{normalize_rows, FeatureMatrix};
use crate::toy::{mlp_backward, mlp_forward, MlpParams, MlpTensors};

pub const FD_STEP: f64 = 1e-6;
pub const REL_TOLERANCE: f64 = 1e-5;
/// Must exceed how far one step can move a kink argument (at most `FD_STEP`
/// for unit rows).
pub const KINK_MARGIN: f64 = 1e-5;
/// Parameter steps move normalized outputs by more than `FD_STEP` when the
/// pre-norm output is short, so the chain check keeps a wider berth.
pub const CHAIN_KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckConfig {
    pub loss: LossKind,
    pub n: usize,
    pub c: usize,
    pub trials: usize,
    pub seed: u64,
    /// Hidden width of the student when checking the whole chain; `None`
    /// checks the loss alone.
    pub mlp_hidden: Option<usize>,
}

impl GradCheckConfig {
    pub fn new(loss: LossKind) -> Self {
        Self {
            loss,
            n: 8,
            c: 3,
            trials: 100,
            seed: 0,
            mlp_hidden: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.n < self.loss.min_rows() {
            return Err(Error::BatchTooSmall {
                required: self.loss.min_rows(),
                found: self.n,
            });
        }
        if self.c == 0 {
            return Err(Error::InvalidConfig("c must be at least 1".into()));
        }
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be at least 1".into()));
        }
        if self.mlp_hidden == Some(0) {
            return Err(Error::InvalidConfig("hidden width must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialFailure {
    pub seed: u64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub config: GradCheckConfig,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub worst_seed: Option<u64>,
    pub failures: Vec<TrialFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

/// `max|a − b| / max(|a|∞, |b|∞)`, with the scale floored at 1e-8 so that two
/// vanishing gradients compare equal.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    diff / inf(analytic).max(inf(numeric)).max(1e-8)
}

/// Central differences of `f` around `x`, one coordinate at a time.
pub fn finite_difference(
    x: &[f64],
    step: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let plus = f(&probe)?;
        probe[i] = x[i] - step;
        let minus = f(&probe)?;
        probe[i] = x[i];
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

fn random_unit_rows(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Result<FeatureMatrix> {
    let data = (0..n * c).map(|_| StandardNormal.sample(rng)).collect();
    normalize_rows(&FeatureMatrix::new(n, c, data)?)
}

enum Trial {
    Checked(f64),
    Skipped,
}

fn loss_trial(cfg: &GradCheckConfig, seed: u64) -> Result<Trial> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = random_unit_rows(&mut rng, cfg.n, cfg.c)?;
    let q = random_unit_rows(&mut rng, cfg.n, cfg.c)?;
    if kink_distance(cfg.loss, &k, &q)?.is_some_and(|d| d < KINK_MARGIN) {
        return Ok(Trial::Skipped);
    }
    let analytic = cfg.loss.evaluate(&k, &q)?.grad_k;
    let numeric = finite_difference(k.as_slice(), FD_STEP, |x| {
        cfg.loss.evaluate(&FeatureMatrix::new(cfg.n, cfg.c, x.to_vec())?, &q).map(|r| r.value)
    })?;
    Ok(Trial::Checked(relative_error(&analytic, &numeric)))
}

fn flatten(t: &MlpTensors) -> Vec<f64> {
    t.tensors().concat()
}

fn unflatten(params: &mut MlpParams, flat: &[f64]) {
    let mut rest = flat;
    for t in params.weights.tensors_mut() {
        let (head, tail) = rest.split_at(t.len());
        t.copy_from_slice(head);
        rest = tail;
    }
}

fn chain_trial(cfg: &GradCheckConfig, hidden: usize, seed: u64) -> Result<Trial> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_unit_rows(&mut rng, cfg.n, 3)?;
    let q = random_unit_rows(&mut rng, cfg.n, cfg.c)?;
    let params = MlpParams::init_uniform(3, hidden, cfg.c, &mut rng);

    let w = &params.weights;
    let relu_kink = x.row_iter().any(|xr| {
        (0..hidden).any(|j| {
            let z = w.b1[j] + xr.iter().enumerate().map(|(c, xv)| xv * w.w1[c * hidden + j]).sum::<f64>();
            z.abs() < CHAIN_KINK_MARGIN
        })
    });
    let (pred, cache) = mlp_forward(&params, &x)?;
    let output_kink = kink_distance(cfg.loss, &pred, &q)?.is_some_and(|d| d < CHAIN_KINK_MARGIN);
    if relu_kink || output_kink {
        return Ok(Trial::Skipped);
    }

    let grad_pred = cfg.loss.evaluate(&pred, &q)?.grad_k;
    let analytic = flatten(&mlp_backward(&params, &cache, &grad_pred)?);
    let mut probe = params.clone();
    let numeric = finite_difference(&flatten(&params.weights), FD_STEP, |theta| {
        unflatten(&mut probe, theta);
        let (p, _) = mlp_forward(&probe, &x)?;
        cfg.loss.evaluate(&p, &q).map(|r| r.value)
    })?;
    Ok(Trial::Checked(relative_error(&analytic, &numeric)))
}

/// Runs `cfg.trials` independent instances and collects the worst error.
pub fn run_grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    cfg.validate()?;
    let mut report = GradCheckReport {
        config: cfg.clone(),
        checked: 0,
        skipped_kinks: 0,
        max_rel_error: 0.0,
        worst_seed: None,
        failures: Vec::new(),
    };
    for trial in 0..cfg.trials as u64 {
        let seed = cfg.seed.wrapping_add(trial);
        let outcome = match cfg.mlp_hidden {
            None => loss_trial(cfg, seed)?,
            Some(h) => chain_trial(cfg, h, seed)?,
        };
        match outcome {
            Trial::Skipped => report.skipped_kinks += 1,
            Trial::Checked(err) => {
                report.checked += 1;
                if report.worst_seed.is_none() || err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst_seed = Some(seed);
                }
                if !(err < REL_TOLERANCE) {
                    report.failures.push(TrialFailure { seed, rel_error: err });
                }
            }
        }
    }
    Ok(report)
}
