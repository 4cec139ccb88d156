//! Adam with bias correction, one state per parameter block.

use serde::{Deserialize, Serialize};

use super::NnError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, alpha: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            alpha,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<(), NnError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NnError::ShapeMismatch {
            context: "adam_step",
            expected: state.m.len(),
            got: params.len().max(grads.len()),
        });
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= state.alpha * m_hat / (v_hat.sqrt() + state.eps);
        debug_assert!(params[i].is_finite(), "non-finite parameter after Adam step");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![1.0, -2.0, 0.5];
        let mut state = AdamState::new(3, 1e-2);
        adam_step(&mut params, &[0.0; 3], &mut state).unwrap();
        assert_eq!(params, vec![1.0, -2.0, 0.5]);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn constant_gradient_update_approaches_alpha() {
        // With a constant gradient the bias-corrected update converges to
        // alpha regardless of the gradient's magnitude.
        let alpha = 1e-2;
        let mut params = vec![0.0];
        let mut state = AdamState::new(1, alpha);
        let mut prev = params[0];
        let mut last_step = 0.0;
        for _ in 0..1000 {
            adam_step(&mut params, &[3.7], &mut state).unwrap();
            last_step = (params[0] - prev).abs();
            prev = params[0];
        }
        assert!((last_step - alpha).abs() / alpha < 0.01, "step {last_step}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = vec![0.0; 2];
        let mut state = AdamState::new(3, 1e-2);
        assert!(adam_step(&mut params, &[0.0; 2], &mut state).is_err());
    }
}
