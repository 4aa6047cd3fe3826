use super::mlp::{MlpParams, MlpTensors};
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// One bias-corrected Adam update; moments and the step counter live in `params`.
pub fn adam_step(params: &mut MlpParams, grads: &MlpTensors, lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::InvalidConfig(format!("learning rate must be positive, got {lr}")));
    }
    for (p, g) in params.weights.tensors().iter().zip(grads.tensors()) {
        if p.len() != g.len() {
            return Err(Error::shape(format!("{} gradient values", p.len()), format!("{}", g.len())));
        }
    }
    params.step_count += 1;
    let t = params.step_count as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);

    let MlpParams {
        weights,
        adam_m,
        adam_v,
        ..
    } = params;
    let tensors = weights
        .tensors_mut()
        .into_iter()
        .zip(adam_m.tensors_mut())
        .zip(adam_v.tensors_mut())
        .zip(grads.tensors());
    for (((w, m), v), g) in tensors {
        for (((wi, mi), vi), &gi) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
            *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
            *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *wi -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    Ok(())
}
