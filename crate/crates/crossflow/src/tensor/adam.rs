//! Adam optimizer state and in-place update.

use super::Tensor;
use crate::error::{Error, Result};

/// Per-parameter Adam moment buffers.
///
/// Buffers start at zero and the step counter increases by exactly one per
/// update. Defaults follow the fine-tuning convention: beta1 = 0.9,
/// beta2 = 0.999, eps = 1e-8, no weight decay, no gradient clipping.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamState {
    pub fn new(numel: usize) -> AdamState {
        AdamState {
            m: vec![0.0; numel],
            v: vec![0.0; numel],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_param(param: &Tensor) -> AdamState {
        AdamState::new(param.numel())
    }
}

/// Bias-corrected Adam step applied in place; the parameter's gradient is
/// consumed (cleared) by the update.
pub fn adam_update(param: &Tensor, state: &mut AdamState, lr: f32) -> Result<()> {
    let grad = param
        .grad()
        .ok_or_else(|| Error::Contract("adam_update: parameter has no gradient".into()))?;
    if state.m.len() != param.numel() {
        return Err(Error::Contract(format!(
            "adam_update: state sized {} for parameter of {} elements",
            state.m.len(),
            param.numel()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let mut data = param.to_vec();
    for i in 0..data.len() {
        let g = grad[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        data[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    param.set_data(data);
    param.clear_grad();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_leaves_param_unchanged() {
        let p = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        p.set_requires_grad(true);
        p.accumulate_grad(&[0.0, 0.0, 0.0]);
        let mut state = AdamState::for_param(&p);
        adam_update(&p, &mut state, 0.1).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, -2.0, 0.5]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_matches_hand_evaluated_formula() {
        // g = 1, fresh state: m_hat = 1, v_hat = 1, step = lr / (1 + eps)
        let p = Tensor::scalar(5.0);
        p.set_requires_grad(true);
        p.accumulate_grad(&[1.0]);
        let mut state = AdamState::for_param(&p);
        adam_update(&p, &mut state, 0.1).unwrap();
        let expected = 5.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-6, "{} vs {expected}", p.item());
    }

    #[test]
    fn identical_params_update_identically() {
        let mk = || {
            let p = Tensor::from_vec(&[2], vec![0.3, -0.7]).unwrap();
            p.set_requires_grad(true);
            p.accumulate_grad(&[0.2, -0.1]);
            p
        };
        let a = mk();
        let b = mk();
        let mut sa = AdamState::for_param(&a);
        let mut sb = AdamState::for_param(&b);
        adam_update(&a, &mut sa, 0.05).unwrap();
        adam_update(&b, &mut sb, 0.05).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let p = Tensor::scalar(1.0);
        p.set_requires_grad(true);
        let mut state = AdamState::for_param(&p);
        assert!(adam_update(&p, &mut state, 0.1).is_err());
    }

    #[test]
    fn update_clears_grad_and_counts_steps() {
        let p = Tensor::scalar(1.0);
        p.set_requires_grad(true);
        let mut state = AdamState::for_param(&p);
        for expected_step in 1..=3u64 {
            p.accumulate_grad(&[0.5]);
            adam_update(&p, &mut state, 0.01).unwrap();
            assert_eq!(state.step, expected_step);
            assert!(p.grad().is_none());
        }
    }
}
