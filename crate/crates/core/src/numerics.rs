//! Dense row-major matrix primitives shared by the losses, metrics and the toy trainer.
//!
//! Reductions use a fixed order so results are bit-reproducible across runs
//! on the same platform: plain left-to-right for short vectors, and for the
//! long O(N) inner loops of the pairwise losses an 8-lane strided order
//! (lane `l` sums indices `≡ l mod 8`, lanes combined pairwise) that the
//! compiler can vectorize.

use wide::{f64x8, u64x8};

use crate::error::{Error, Result};

/// Rows with an ℓ2 norm below this value cannot be normalized.
pub const EPSILON_NORM: f64 = 1e-12;

/// Tolerance on |‖row‖ − 1| for a row to count as unit length.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// An N×C matrix of feature vectors stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    normalized: bool,
}

impl FeatureMatrix {
    /// Wraps `data` as a `rows × cols` matrix. Rejects empty shapes and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape("rows >= 1 and cols >= 1", format!("{rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(
                format!("{} values for {rows}x{cols}", rows * cols),
                format!("{} values", data.len()),
            ));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            rows,
            cols,
            data,
            normalized: false,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(
                    format!("{cols} columns"),
                    format!("{} columns in row {i}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    /// Builds a matrix whose rows are already unit length, verifying the claim.
    pub fn new_normalized(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        let mut m = Self::new(rows, cols, data)?;
        for i in 0..m.rows {
            let norm = dot(m.row(i), m.row(i)).sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::InvariantViolation(format!(
                    "row {i} has norm {norm}, expected unit length"
                )));
            }
        }
        m.normalized = true;
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.cols)
    }

    /// Applies `f` to every entry. The result is not flagged as normalized.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Right-multiplies every row by the `cols × cols` matrix `r` (row-major).
    pub fn transform(&self, r: &[f64]) -> Result<Self> {
        let c = self.cols;
        if r.len() != c * c {
            return Err(Error::shape(format!("{c}x{c} transform"), format!("{} values", r.len())));
        }
        let mut out = vec![0.0; self.data.len()];
        for (src, dst) in self.data.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            for (j, d) in dst.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (k, &s) in src.iter().enumerate() {
                    acc += s * r[k * c + j];
                }
                *d = acc;
            }
        }
        Self::new(self.rows, c, out)
    }

    /// Reorders rows so that output row `i` is input row `perm[i]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.rows {
            return Err(Error::LengthMismatch {
                expected: self.rows,
                found: perm.len(),
            });
        }
        let mut data = Vec::with_capacity(self.data.len());
        for &p in perm {
            if p >= self.rows {
                return Err(Error::InvariantViolation(format!("permutation index {p} out of range")));
            }
            data.extend_from_slice(self.row(p));
        }
        let mut out = Self::new(self.rows, self.cols, data)?;
        out.normalized = self.normalized;
        Ok(out)
    }

    pub(crate) fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        Ok(())
    }
}

/// An N×N matrix of inner products between the rows of two feature matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl GramMatrix {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Self {
        let n = self.dim;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                data[j * n + i] = self.data[i * n + j];
            }
        }
        Self { dim: n, data }
    }
}

/// Inner product accumulated strictly left to right.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Sum accumulated strictly left to right.
pub fn sequential_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().fold(0.0, |acc, v| acc + v)
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn row_norm_checked(row: &[f64], index: usize) -> Result<f64> {
    let norm = l2_norm(row);
    if !(norm >= EPSILON_NORM) {
        return Err(Error::ZeroNormRow {
            row: index,
            epsilon: EPSILON_NORM,
        });
    }
    Ok(norm)
}

/// Scales every row to unit ℓ2 norm.
pub fn normalize_rows(m: &FeatureMatrix) -> Result<FeatureMatrix> {
    let mut data = m.data.clone();
    normalize_rows_in_place(&mut data, m.cols)?;
    Ok(FeatureMatrix {
        rows: m.rows,
        cols: m.cols,
        data,
        normalized: true,
    })
}

/// Normalizes the rows of a raw row-major buffer, returning the per-row norms.
pub(crate) fn normalize_rows_in_place(data: &mut [f64], cols: usize) -> Result<Vec<f64>> {
    let mut norms = Vec::with_capacity(data.len() / cols);
    for (i, row) in data.chunks_exact_mut(cols).enumerate() {
        let norm = row_norm_checked(row, i)?;
        for v in row.iter_mut() {
            *v /= norm;
        }
        norms.push(norm);
    }
    Ok(norms)
}

/// Pulls a gradient taken w.r.t. `normalize_rows(m)` back to `m`.
///
/// For a row `v` with norm `r` and direction `u = v / r` the Jacobian is
/// `(I − u uᵀ) / r`, so the radial part of the upstream gradient is dropped.
pub fn normalize_rows_backward(m: &FeatureMatrix, upstream: &[f64]) -> Result<Vec<f64>> {
    if upstream.len() != m.data.len() {
        return Err(Error::shape(
            format!("{} gradient values", m.data.len()),
            format!("{}", upstream.len()),
        ));
    }
    if let Some(index) = upstream.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let mut out = vec![0.0; upstream.len()];
    normalize_rows_backward_raw(&m.data, m.cols, upstream, &mut out)?;
    Ok(out)
}

pub(crate) fn normalize_rows_backward_raw(
    raw: &[f64],
    cols: usize,
    upstream: &[f64],
    out: &mut [f64],
) -> Result<()> {
    let rows = raw
        .chunks_exact(cols)
        .zip(upstream.chunks_exact(cols))
        .zip(out.chunks_exact_mut(cols));
    for (i, ((v, g), o)) in rows.enumerate() {
        let r = row_norm_checked(v, i)?;
        let mut radial = 0.0;
        for (gk, vk) in g.iter().zip(v) {
            radial += gk * (vk / r);
        }
        for ((ok, gk), vk) in o.iter_mut().zip(g).zip(v) {
            *ok = (gk - radial * (vk / r)) / r;
        }
    }
    Ok(())
}

/// Entry `(i, j)` is `⟨row_i(a), row_j(b)⟩`.
pub fn gram(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<GramMatrix> {
    a.check_same_shape(b)?;
    let n = a.rows;
    let mut data = Vec::with_capacity(n * n);
    for ra in a.row_iter() {
        for rb in b.row_iter() {
            data.push(dot(ra, rb));
        }
    }
    Ok(GramMatrix { dim: n, data })
}

pub(crate) const LANES: usize = 8;

/// Pairwise combination of the lane partial sums, in a fixed order.
#[inline(always)]
pub(crate) fn combine_lanes(acc: f64x8) -> f64 {
    let a = acc.to_array();
    ((a[0] + a[1]) + (a[2] + a[3])) + ((a[4] + a[5]) + (a[6] + a[7]))
}

const LOG2_E: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = 6.931_471_803_691_238_164_9e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
// 1.5·2⁵²: adding it rounds to an integer and leaves that integer in the low mantissa bits
const ROUND_MAGIC: f64 = 6_755_399_441_055_744.0;

/// Lane-wise `exp(x)` for `x ≤ 0`.
///
/// Cody–Waite reduction `x = k·ln2 + r` with `|r| ≤ ln2/2`, then a degree-13
/// Taylor polynomial for `eʳ`. Relative error stays within a few ulp of
/// `f64::exp`; inputs below −708 flush to 0.
#[inline(always)]
pub(crate) fn exp_nonpositive(x: f64x8) -> f64x8 {
    const COEFFS: [f64; 13] = [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ];
    let floor = f64x8::splat(-708.0);
    let underflow = x.simd_le(floor);
    let x = x.max(floor);
    let magic = f64x8::splat(ROUND_MAGIC);
    let shifted = x * f64x8::splat(LOG2_E) + magic;
    let k = shifted - magic;
    let r = (x - k * f64x8::splat(LN2_HI)) - k * f64x8::splat(LN2_LO);
    let mut p = f64x8::splat(1.0 / 6_227_020_800.0);
    for c in COEFFS {
        p = p * r + f64x8::splat(c);
    }
    let ki = shifted.to_bits() - u64x8::splat(ROUND_MAGIC.to_bits());
    let scale = f64x8::from_bits((ki + u64x8::splat(1023)) << 52u32);
    underflow.select(f64x8::ZERO, p * scale)
}

/// Column-wise mean of the rows.
pub fn column_mean(m: &FeatureMatrix) -> Vec<f64> {
    let mut acc = vec![0.0; m.cols];
    for row in m.row_iter() {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    let n = m.rows as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}
