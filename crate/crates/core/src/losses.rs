//! Cross-modal distillation losses with closed-form gradients.
//!
//! All losses take row-normalized student features `k` and teacher features `q`
//! paired by row index, and return the gradient with respect to the rows of `k`
//! as given (the normalization Jacobian is the caller's job). Row counts play
//! the role of the batch size.
//!
//! | loss       | value                                                                  |
//! |------------|------------------------------------------------------------------------|
//! | contrastive| −(1/N) Σᵢ log softmaxⱼ(⟨kᵢ,qⱼ⟩/τ)ᵢ                                      |
//! | similarity | (1/N) Σᵢ (1 − ⟨kᵢ,qᵢ⟩)                                                 |
//! | cross      | similarity + 1/(N²−N) Σ_{i≠j} \|⟨kᵢ,qⱼ⟩ − ⟨qᵢ,qⱼ⟩\|                    |
//! | intra      | 2/(N²−N) Σ_{i<j} \|⟨kᵢ,kⱼ⟩ − ⟨qᵢ,qⱼ⟩\|                                  |
//! | relational | intra + cross                                                          |
//!
//! The subgradient of `|x|` at `x = 0` is taken as 0.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use wide::f64x8;

use crate::error::{Error, Result};
use crate::labels::LabelVector;
use crate::numerics::{combine_lanes, dot, exp_nonpositive, FeatureMatrix, LANES};

/// Loss value and its gradient with respect to the student rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    /// Row-major, same shape as the student matrix.
    pub grad_k: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    temperature: f64,
}

impl ContrastiveConfig {
    pub fn new(temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::NonPositiveTemperature(temperature));
        }
        Ok(Self { temperature })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { temperature: 0.1 }
    }
}

fn require_rows(k: &FeatureMatrix, min: usize) -> Result<()> {
    if k.rows() < min {
        return Err(Error::BatchTooSmall {
            required: min,
            found: k.rows(),
        });
    }
    Ok(())
}

/// Sign with `sign(0) = 0`, the subgradient used for `|x|` at the kink.
#[inline(always)]
fn sign(x: f64x8) -> f64x8 {
    let one = f64x8::splat(1.0);
    x.simd_gt(f64x8::ZERO).select(one, f64x8::ZERO) - x.simd_lt(f64x8::ZERO).select(one, f64x8::ZERO)
}

/// Row indices covered by block `b`, as floats for lane masks.
#[inline(always)]
fn block_rows(b: usize) -> f64x8 {
    f64x8::new([0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]) + f64x8::splat((b * LANES) as f64)
}

/// One vector per feature column. Narrow widths get a fixed-size array so
/// the per-column accumulators live in registers.
trait Scratch: AsRef<[f64x8]> + AsMut<[f64x8]> {
    fn zeroed(cols: usize) -> Self;

    fn splat_row(row: &[f64]) -> Self
    where
        Self: Sized,
    {
        let mut s = Self::zeroed(row.len());
        for (o, &v) in s.as_mut().iter_mut().zip(row) {
            *o = f64x8::splat(v);
        }
        s
    }
}

impl<const C: usize> Scratch for [f64x8; C] {
    fn zeroed(_: usize) -> Self {
        [f64x8::ZERO; C]
    }
}

impl Scratch for Vec<f64x8> {
    fn zeroed(cols: usize) -> Self {
        vec![f64x8::ZERO; cols]
    }
}

macro_rules! by_width {
    ($cols:expr, $kernel:ident($($arg:expr),* $(,)?)) => {
        match $cols {
            1 => $kernel::<[f64x8; 1]>($($arg),*),
            2 => $kernel::<[f64x8; 2]>($($arg),*),
            3 => $kernel::<[f64x8; 3]>($($arg),*),
            4 => $kernel::<[f64x8; 4]>($($arg),*),
            _ => $kernel::<Vec<f64x8>>($($arg),*),
        }
    };
}

/// Column-major copy of a feature matrix in blocks of `LANES` rows,
/// zero-padded at the end: block `b` of column `c` is `data[c·blocks + b]`.
///
/// The row-wise kernels sweep `j` one block at a time and keep one partial
/// sum per lane, so each long sum runs in the fixed 8-lane order regardless
/// of target features. Padding rows are zero and are either harmless or
/// masked out.
struct Columns {
    blocks: usize,
    data: Vec<f64x8>,
}

impl Columns {
    fn new(m: &FeatureMatrix) -> Self {
        let (n, c) = m.shape();
        let blocks = n.div_ceil(LANES);
        let mut flat = vec![0.0; blocks * LANES * c];
        for (j, row) in m.row_iter().enumerate() {
            for (d, &v) in row.iter().enumerate() {
                flat[d * blocks * LANES + j] = v;
            }
        }
        let data = flat
            .chunks_exact(LANES)
            .map(|ch| f64x8::new(ch.try_into().expect("LANES entries")))
            .collect();
        Self { blocks, data }
    }

    /// `⟨w, row_j⟩` for the rows of block `b`, summed over columns in order.
    #[inline(always)]
    fn block_dots<S: Scratch>(&self, w: &S, b: usize) -> f64x8 {
        let mut d = f64x8::ZERO;
        for (c, &wc) in w.as_ref().iter().enumerate() {
            d += wc * self.data[c * self.blocks + b];
        }
        d
    }

    /// `acc[c] += s·row_j[c]` lane-wise over block `b`.
    #[inline(always)]
    fn accumulate<S: Scratch>(&self, s: f64x8, b: usize, acc: &mut S) {
        for (c, a) in acc.as_mut().iter_mut().enumerate() {
            *a += s * self.data[c * self.blocks + b];
        }
    }
}

/// InfoNCE with the positive pair in the denominator, stabilized by max subtraction.
pub fn contrastive_loss(
    k: &FeatureMatrix,
    q: &FeatureMatrix,
    cfg: ContrastiveConfig,
) -> Result<LossResult> {
    k.check_same_shape(q)?;
    let (n, c) = k.shape();
    let qc = Columns::new(q);
    let mut grad_k = vec![0.0; n * c];
    let total = by_width!(c, contrastive_rows(k, q, &qc, 1.0 / cfg.temperature, &mut grad_k));
    Ok(LossResult {
        value: total / n as f64,
        grad_k,
    })
}

fn contrastive_rows<S: Scratch>(
    k: &FeatureMatrix,
    q: &FeatureMatrix,
    qc: &Columns,
    inv_tau: f64,
    grad_k: &mut [f64],
) -> f64 {
    let (n, c) = k.shape();
    let scale = inv_tau / n as f64;
    let tau_v = f64x8::splat(inv_tau);
    let rows_v = f64x8::splat(n as f64);
    let mut logits = vec![f64x8::ZERO; qc.blocks];
    let mut total = 0.0;
    for i in 0..n {
        let ki = S::splat_row(k.row(i));
        let mut max = f64x8::splat(f64::NEG_INFINITY);
        for (b, slot) in logits.iter_mut().enumerate() {
            let s = qc.block_dots(&ki, b) * tau_v;
            let s = block_rows(b).simd_lt(rows_v).select(s, f64x8::splat(f64::NEG_INFINITY));
            max = max.max(s);
            *slot = s;
        }
        let max = max.to_array().into_iter().fold(f64::NEG_INFINITY, f64::max);
        let max_v = f64x8::splat(max);

        let mut denom = f64x8::ZERO;
        let mut acc = S::zeroed(c);
        for (b, &s) in logits.iter().enumerate() {
            let e = exp_nonpositive(s - max_v);
            denom += e;
            qc.accumulate(e, b, &mut acc);
        }
        let denom = combine_lanes(denom);
        let own = logits[i / LANES].to_array()[i % LANES];
        // loss_i = log Σⱼ exp(sⱼ − max) − (sᵢ − max)
        total += denom.ln() - (own - max);

        let inv_denom = 1.0 / denom;
        for ((g, a), qv) in grad_k[i * c..(i + 1) * c].iter_mut().zip(acc.as_ref()).zip(q.row(i)) {
            *g = (combine_lanes(*a) * inv_denom - qv) * scale;
        }
    }
    total
}

/// Mean of `1 − ⟨kᵢ, qᵢ⟩` over the positive pairs.
pub fn similarity_loss(k: &FeatureMatrix, q: &FeatureMatrix) -> Result<LossResult> {
    k.check_same_shape(q)?;
    let (n, c) = k.shape();
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut grad_k = vec![0.0; n * c];
    for i in 0..n {
        total += 1.0 - dot(k.row(i), q.row(i));
        for (g, qv) in grad_k[i * c..(i + 1) * c].iter_mut().zip(q.row(i)) {
            *g = -qv * inv_n;
        }
    }
    Ok(LossResult {
        value: total * inv_n,
        grad_k,
    })
}

/// Similarity term plus the mean absolute mismatch between student-to-teacher
/// and teacher-to-teacher similarities over off-diagonal pairs.
pub fn cross_modal_loss(k: &FeatureMatrix, q: &FeatureMatrix) -> Result<LossResult> {
    k.check_same_shape(q)?;
    require_rows(k, 2)?;
    let (n, c) = k.shape();
    let qc = Columns::new(q);
    let sim = similarity_loss(k, q)?;
    let off_scale = 1.0 / (n * n - n) as f64;
    let mut grad_k = sim.grad_k;
    let off_total = by_width!(c, cross_rows(k, q, &qc, off_scale, &mut grad_k));
    Ok(LossResult {
        value: sim.value + off_total * off_scale,
        grad_k,
    })
}

// ⟨kᵢ,qⱼ⟩ − ⟨qᵢ,qⱼ⟩ is computed as ⟨kᵢ − qᵢ, qⱼ⟩.
fn cross_rows<S: Scratch>(
    k: &FeatureMatrix,
    q: &FeatureMatrix,
    qc: &Columns,
    off_scale: f64,
    grad_k: &mut [f64],
) -> f64 {
    let (n, c) = k.shape();
    let mut off_total = 0.0;
    let mut diff = vec![0.0; c];
    for i in 0..n {
        for ((d, kv), qv) in diff.iter_mut().zip(k.row(i)).zip(q.row(i)) {
            *d = kv - qv;
        }
        let w = S::splat_row(&diff);
        let own = f64x8::splat(i as f64);
        let mut abs = f64x8::ZERO;
        let mut acc = S::zeroed(c);
        for b in 0..qc.blocks {
            let d = block_rows(b).simd_eq(own).select(f64x8::ZERO, qc.block_dots(&w, b));
            abs += d.abs();
            qc.accumulate(sign(d), b, &mut acc);
        }
        off_total += combine_lanes(abs);
        for (g, a) in grad_k[i * c..(i + 1) * c].iter_mut().zip(acc.as_ref()) {
            *g += combine_lanes(*a) * off_scale;
        }
    }
    off_total
}

/// Mean absolute mismatch between the student and teacher relational graphs
/// over unordered pairs.
pub fn intra_modal_loss(k: &FeatureMatrix, q: &FeatureMatrix) -> Result<LossResult> {
    k.check_same_shape(q)?;
    require_rows(k, 2)?;
    let (n, c) = k.shape();
    let kc = Columns::new(k);
    let qc = Columns::new(q);
    let scale = 2.0 / (n * n - n) as f64;
    // laid out like `kc`; transposed at the end
    let mut grad_cols = vec![f64x8::ZERO; kc.blocks * c];
    let total = by_width!(c, intra_rows(k, q, &kc, &qc, &mut grad_cols));
    let mut grad_k = vec![0.0; n * c];
    for (j, row) in grad_k.chunks_exact_mut(c).enumerate() {
        for (d, g) in row.iter_mut().enumerate() {
            *g = grad_cols[d * kc.blocks + j / LANES].to_array()[j % LANES] * scale;
        }
    }
    Ok(LossResult {
        value: total * scale,
        grad_k,
    })
}

fn intra_rows<S: Scratch>(
    k: &FeatureMatrix,
    q: &FeatureMatrix,
    kc: &Columns,
    qc: &Columns,
    grad_cols: &mut [f64x8],
) -> f64 {
    let (n, c) = k.shape();
    let blocks = kc.blocks;
    let mut total = 0.0;
    for i in 0..n {
        let ki = S::splat_row(k.row(i));
        let qi = S::splat_row(q.row(i));
        let own = f64x8::splat(i as f64);
        let mut abs = f64x8::ZERO;
        let mut acc = S::zeroed(c);
        // pairs j > i only
        for b in (i + 1) / LANES..blocks {
            let d = kc.block_dots(&ki, b) - qc.block_dots(&qi, b);
            let d = block_rows(b).simd_gt(own).select(d, f64x8::ZERO);
            abs += d.abs();
            let s = sign(d);
            kc.accumulate(s, b, &mut acc);
            for (col, &kv) in ki.as_ref().iter().enumerate() {
                grad_cols[col * blocks + b] += s * kv;
            }
        }
        total += combine_lanes(abs);
        for (col, a) in acc.as_ref().iter().enumerate() {
            let slot = &mut grad_cols[col * blocks + i / LANES];
            let mut lanes = slot.to_array();
            lanes[i % LANES] += combine_lanes(*a);
            *slot = f64x8::new(lanes);
        }
    }
    total
}

/// Sum of the intra-modal and cross-modal relational losses.
pub fn relational_loss(k: &FeatureMatrix, q: &FeatureMatrix) -> Result<LossResult> {
    let intra = intra_modal_loss(k, q)?;
    let cross = cross_modal_loss(k, q)?;
    let grad_k = intra
        .grad_k
        .iter()
        .zip(&cross.grad_k)
        .map(|(a, b)| a + b)
        .collect();
    Ok(LossResult {
        value: intra.value + cross.value,
        grad_k,
    })
}

/// Smallest |·| argument among the absolute-value terms of the relational
/// losses, or `None` for losses without kinks. Near zero the loss is not
/// differentiable and finite-difference checks are meaningless.
pub fn kink_distance(kind: LossKind, k: &FeatureMatrix, q: &FeatureMatrix) -> Result<Option<f64>> {
    k.check_same_shape(q)?;
    let n = k.rows();
    let cross = matches!(kind, LossKind::CrossOnly | LossKind::Relational);
    let intra = matches!(kind, LossKind::IntraOnly | LossKind::Relational);
    if !cross && !intra {
        return Ok(None);
    }
    let mut min = f64::INFINITY;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let qq = dot(q.row(i), q.row(j));
            if cross {
                min = min.min((dot(k.row(i), q.row(j)) - qq).abs());
            }
            if intra && j > i {
                min = min.min((dot(k.row(i), k.row(j)) - qq).abs());
            }
        }
    }
    Ok(Some(min))
}

/// Averages the rows of `features` within each group. Group ids must cover
/// `0..M` without gaps; the output has `M` rows and is not normalized.
pub fn superpool(features: &FeatureMatrix, groups: &LabelVector) -> Result<FeatureMatrix> {
    if groups.len() != features.rows() {
        return Err(Error::LengthMismatch {
            expected: features.rows(),
            found: groups.len(),
        });
    }
    let m = groups.id_span();
    let c = features.cols();
    let mut sums = vec![0.0; m * c];
    let mut counts = vec![0usize; m];
    for (row, &g) in features.row_iter().zip(groups.as_slice()) {
        let g = g as usize;
        counts[g] += 1;
        for (s, v) in sums[g * c..(g + 1) * c].iter_mut().zip(row) {
            *s += v;
        }
    }
    if let Some(empty) = counts.iter().position(|&n| n == 0) {
        return Err(Error::EmptyGroup(empty));
    }
    for (chunk, &count) in sums.chunks_exact_mut(c).zip(&counts) {
        chunk.iter_mut().for_each(|s| *s /= count as f64);
    }
    FeatureMatrix::new(m, c, sums)
}

/// The loss families available to the toy trainer and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LossKind {
    Contrastive { temperature: f64 },
    Similarity,
    Relational,
    CrossOnly,
    IntraOnly,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Contrastive { .. } => "contrastive",
            LossKind::Similarity => "similarity",
            LossKind::Relational => "relational",
            LossKind::CrossOnly => "cross_only",
            LossKind::IntraOnly => "intra_only",
        }
    }

    /// Parses a loss name; `temperature` is used only for the contrastive kind.
    pub fn parse(name: &str, temperature: f64) -> Result<Self> {
        let kind = match name {
            "contrastive" => LossKind::Contrastive { temperature },
            "similarity" => LossKind::Similarity,
            "relational" => LossKind::Relational,
            "cross_only" | "cross-only" | "cross" => LossKind::CrossOnly,
            "intra_only" | "intra-only" | "intra" => LossKind::IntraOnly,
            other => return Err(Error::InvalidConfig(format!("unknown loss kind `{other}`"))),
        };
        kind.validate()?;
        Ok(kind)
    }

    pub fn validate(&self) -> Result<()> {
        if let LossKind::Contrastive { temperature } = *self {
            ContrastiveConfig::new(temperature)?;
        }
        Ok(())
    }

    /// Smallest batch the loss is defined for.
    pub fn min_rows(&self) -> usize {
        match self {
            LossKind::Contrastive { .. } | LossKind::Similarity => 1,
            _ => 2,
        }
    }

    pub fn evaluate(&self, k: &FeatureMatrix, q: &FeatureMatrix) -> Result<LossResult> {
        match *self {
            LossKind::Contrastive { temperature } => {
                contrastive_loss(k, q, ContrastiveConfig::new(temperature)?)
            }
            LossKind::Similarity => similarity_loss(k, q),
            LossKind::Relational => relational_loss(k, q),
            LossKind::CrossOnly => cross_modal_loss(k, q),
            LossKind::IntraOnly => intra_modal_loss(k, q),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::Contrastive { temperature } => write!(f, "contrastive(tau={temperature})"),
            other => f.write_str(other.name()),
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    /// Accepts `contrastive` (τ = 0.1), `contrastive:<tau>` or any other loss name.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some(("contrastive", tau)) => {
                let t = tau
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidConfig(format!("bad temperature `{tau}`: {e}")))?;
                LossKind::parse("contrastive", t)
            }
            Some(_) => Err(Error::InvalidConfig(format!("unknown loss kind `{s}`"))),
            None => LossKind::parse(s, ContrastiveConfig::default().temperature()),
        }
    }
}
