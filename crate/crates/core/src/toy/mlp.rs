//! The toy student: `in → hidden (ReLU) → out` followed by row normalization,
//! with hand-written reverse mode and Adam state.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{normalize_rows_backward_raw, normalize_rows_in_place, FeatureMatrix};

pub const DEFAULT_HIDDEN: usize = 512;

/// One tensor per layer parameter, all flat row-major.
/// `w1` is `in × hidden`, `w2` is `hidden × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpTensors {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl MlpTensors {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: vec![0.0; input * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * output],
            b2: vec![0.0; output],
        }
    }

    pub fn tensors(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Network weights plus Adam moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub weights: MlpTensors,
    pub adam_m: MlpTensors,
    pub adam_v: MlpTensors,
    pub step_count: u64,
}

impl MlpParams {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            input,
            hidden,
            output,
            weights: MlpTensors::zeros(input, hidden, output),
            adam_m: MlpTensors::zeros(input, hidden, output),
            adam_v: MlpTensors::zeros(input, hidden, output),
            step_count: 0,
        }
    }

    /// Weights and biases uniform in `±1/√fan_in` of their layer.
    pub fn init_uniform<R: Rng>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(input, hidden, output);
        let b1 = 1.0 / (input as f64).sqrt();
        let b2 = 1.0 / (hidden as f64).sqrt();
        let w = &mut p.weights;
        for v in w.w1.iter_mut().chain(w.b1.iter_mut()) {
            *v = rng.random_range(-b1..b1);
        }
        for v in w.w2.iter_mut().chain(w.b2.iter_mut()) {
            *v = rng.random_range(-b2..b2);
        }
        p
    }
}

/// What the backward pass needs from the forward pass. Hidden activations are
/// recomputed from the inputs rather than stored.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<f64>,
    /// Output before normalization, `rows × output`.
    pre_norm: Vec<f64>,
    rows: usize,
}

impl ForwardCache {
    pub fn pre_norm(&self) -> &[f64] {
        &self.pre_norm
    }
}

const ROW_BLOCK: usize = 4;

/// Hidden pre-activations `b1 + x·w1` for one input row, summed in input order.
#[inline]
fn hidden_pre(w1: &[f64], b1: &[f64], x: &[f64], out: &mut [f64]) {
    let h = b1.len();
    out.copy_from_slice(b1);
    for (c, &xv) in x.iter().enumerate() {
        for (z, wv) in out.iter_mut().zip(&w1[c * h..(c + 1) * h]) {
            *z += xv * wv;
        }
    }
}

/// Returns the normalized predictions together with the cache for [`mlp_backward`].
pub fn mlp_forward(params: &MlpParams, x: &FeatureMatrix) -> Result<(FeatureMatrix, ForwardCache)> {
    let (n, c_in) = x.shape();
    if c_in != params.input {
        return Err(Error::shape(format!("{} input columns", params.input), format!("{c_in}")));
    }
    let (h, c_out) = (params.hidden, params.output);
    let w = &params.weights;
    let mut pre_norm = vec![0.0; n * c_out];
    let mut act = vec![0.0; ROW_BLOCK * h];

    // Each output entry is b2 + Σⱼ relu(zⱼ)·w2[j] summed in j order; rows go
    // through in small blocks so their independent sums overlap.
    let blocks = x
        .as_slice()
        .chunks(ROW_BLOCK * c_in)
        .zip(pre_norm.chunks_mut(ROW_BLOCK * c_out));
    for (xb, ob) in blocks {
        let rows = xb.len() / c_in;
        for r in 0..rows {
            let a = &mut act[r * h..(r + 1) * h];
            hidden_pre(&w.w1, &w.b1, &xb[r * c_in..(r + 1) * c_in], a);
            a.iter_mut().for_each(|v| *v = v.max(0.0));
            ob[r * c_out..(r + 1) * c_out].copy_from_slice(&w.b2);
        }
        if rows == ROW_BLOCK && c_out == 3 {
            let b2 = [w.b2[0], w.b2[1], w.b2[2]];
            let mut acc = [b2; ROW_BLOCK];
            for (j, w2j) in w.w2.chunks_exact(3).enumerate() {
                for (r, o) in acc.iter_mut().enumerate() {
                    let a = act[r * h + j];
                    o[0] += a * w2j[0];
                    o[1] += a * w2j[1];
                    o[2] += a * w2j[2];
                }
            }
            for (r, o) in acc.iter().enumerate() {
                ob[r * 3..(r + 1) * 3].copy_from_slice(o);
            }
        } else {
            for (j, w2j) in w.w2.chunks_exact(c_out).enumerate() {
                for r in 0..rows {
                    let a = act[r * h + j];
                    for (o, wv) in ob[r * c_out..(r + 1) * c_out].iter_mut().zip(w2j) {
                        *o += a * wv;
                    }
                }
            }
        }
    }

    let mut normalized = pre_norm.clone();
    normalize_rows_in_place(&mut normalized, c_out)?;
    let predictions = FeatureMatrix::new_normalized(n, c_out, normalized)?;
    let cache = ForwardCache {
        inputs: x.as_slice().to_vec(),
        pre_norm,
        rows: n,
    };
    Ok((predictions, cache))
}

/// Parameter gradients given the gradient w.r.t. the normalized predictions.
pub fn mlp_backward(
    params: &MlpParams,
    cache: &ForwardCache,
    grad_predictions: &[f64],
) -> Result<MlpTensors> {
    let (c_in, h, c_out) = (params.input, params.hidden, params.output);
    let n = cache.rows;
    if grad_predictions.len() != n * c_out {
        return Err(Error::shape(
            format!("{} gradient values", n * c_out),
            format!("{}", grad_predictions.len()),
        ));
    }
    let mut grad_out = vec![0.0; n * c_out];
    normalize_rows_backward_raw(&cache.pre_norm, c_out, grad_predictions, &mut grad_out)?;

    let w = &params.weights;
    // column-major views of w2 and its gradient: w2_cols[c·h + j] = w2[j·out + c]
    let mut w2_cols = vec![0.0; h * c_out];
    for (j, w2j) in w.w2.chunks_exact(c_out).enumerate() {
        for (c, &v) in w2j.iter().enumerate() {
            w2_cols[c * h + j] = v;
        }
    }
    let mut gw2_cols = vec![0.0; h * c_out];
    let mut g = MlpTensors::zeros(c_in, h, c_out);
    let mut pre = vec![0.0; h];
    let mut grad_hidden = vec![0.0; h];

    let rows = cache.inputs.chunks_exact(c_in).zip(grad_out.chunks_exact(c_out));
    for (xr, dout) in rows {
        hidden_pre(&w.w1, &w.b1, xr, &mut pre);
        for (b, d) in g.b2.iter_mut().zip(dout) {
            *b += d;
        }
        grad_hidden.iter_mut().for_each(|v| *v = 0.0);
        for (c, &d) in dout.iter().enumerate() {
            let gw = &mut gw2_cols[c * h..(c + 1) * h];
            for (gwj, z) in gw.iter_mut().zip(&pre) {
                *gwj += z.max(0.0) * d;
            }
            for (gh, wv) in grad_hidden.iter_mut().zip(&w2_cols[c * h..(c + 1) * h]) {
                *gh += d * wv;
            }
        }
        // ReLU subgradient at 0 is 0
        for (gh, &z) in grad_hidden.iter_mut().zip(&pre) {
            *gh = if z > 0.0 { *gh } else { 0.0 };
        }
        for (b, gh) in g.b1.iter_mut().zip(&grad_hidden) {
            *b += gh;
        }
        for (c, &xv) in xr.iter().enumerate() {
            for (gw, gh) in g.w1[c * h..(c + 1) * h].iter_mut().zip(&grad_hidden) {
                *gw += xv * gh;
            }
        }
    }
    for (j, gj) in g.w2.chunks_exact_mut(c_out).enumerate() {
        for (c, v) in gj.iter_mut().enumerate() {
            *v = gw2_cols[c * h + j];
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn inputs() -> FeatureMatrix {
        FeatureMatrix::from_rows(&[[0.0, 0.0, 1.0], [0.6, 0.8, 0.0], [-1.0, 0.0, 0.0]]).unwrap()
    }

    #[test]
    fn constant_head_predicts_bias_direction() {
        let mut p = MlpParams::init_uniform(3, 8, 3, &mut ChaCha8Rng::seed_from_u64(0));
        p.weights.w2.iter_mut().for_each(|v| *v = 0.0);
        p.weights.b2 = vec![1.0, 0.0, 0.0];
        let (pred, _) = mlp_forward(&p, &inputs()).unwrap();
        for r in pred.row_iter() {
            assert_eq!(r, &[1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn all_zero_weights_fail_normalization() {
        let p = MlpParams::zeros(3, 8, 3);
        assert!(matches!(mlp_forward(&p, &inputs()), Err(Error::ZeroNormRow { row: 0, .. })));
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let p = MlpParams::zeros(2, 8, 3);
        assert!(matches!(mlp_forward(&p, &inputs()), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let p = MlpParams::init_uniform(3, 16, 3, &mut ChaCha8Rng::seed_from_u64(3));
        let (_, cache) = mlp_forward(&p, &inputs()).unwrap();
        let zero = mlp_backward(&p, &cache, &[0.0; 9]).unwrap();
        assert!(zero.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));

        let up: Vec<f64> = (0..9).map(|i| (i as f64 * 0.7).sin()).collect();
        let g1 = mlp_backward(&p, &cache, &up).unwrap();
        let up3: Vec<f64> = up.iter().map(|v| v * 3.0).collect();
        let g3 = mlp_backward(&p, &cache, &up3).unwrap();
        for (a, b) in g1.tensors().iter().zip(g3.tensors()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((3.0 * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn init_respects_fan_in_bounds() {
        let p = MlpParams::init_uniform(3, 512, 3, &mut ChaCha8Rng::seed_from_u64(9));
        let b1 = 1.0 / 3f64.sqrt();
        let b2 = 1.0 / 512f64.sqrt();
        assert!(p.weights.w1.iter().chain(&p.weights.b1).all(|v| v.abs() < b1));
        assert!(p.weights.w2.iter().chain(&p.weights.b2).all(|v| v.abs() < b2));
        assert_eq!(p.weights.len(), 3 * 512 + 512 + 512 * 3 + 3);
    }
}
