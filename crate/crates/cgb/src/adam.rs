//! Adam with bias correction.

use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AdamError {
    #[error("param {index}: gradient length {got} vs parameter {want}")]
    GradShape { index: usize, got: usize, want: usize },
    #[error("param {index}: non-finite gradient, step rejected")]
    NonFiniteGrad { index: usize },
    #[error("state tracks {state} params, got {got}")]
    StateMismatch { state: usize, got: usize },
}

pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_BETAS: (f64, f64) = (0.9, 0.999);
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// One Adam update over a parameter list. The whole step is rejected (no
/// mutation at all) if any gradient is non-finite or mis-shaped.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<(), AdamError> {
    if state.m.len() != params.len() || grads.len() != params.len() {
        return Err(AdamError::StateMismatch { state: state.m.len(), got: grads.len() });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if g.len() != p.numel() {
            return Err(AdamError::GradShape { index: i, got: g.len(), want: p.numel() });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(AdamError::NonFiniteGrad { index: i });
        }
    }

    state.t += 1;
    let (b1, b2) = betas;
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let g = &grads[i];
        for j in 0..p.data.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p.data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> Vec<Tensor> {
        vec![Tensor::new(vec![1], vec![v]).unwrap()]
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = one_param(0.7);
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &[vec![0.0]], &mut state, 1e-2, DEFAULT_BETAS, DEFAULT_EPS).unwrap();
        assert_eq!(params[0].data[0], 0.7);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn quadratic_converges() {
        // f(w) = w^2, grad 2w; 500 steps at lr 1e-2 from w0 = 1.
        let mut params = one_param(1.0);
        let mut state = AdamState::new(&params);
        for _ in 0..500 {
            let g = vec![2.0 * params[0].data[0]];
            adam_step(&mut params, &[g], &mut state, 1e-2, DEFAULT_BETAS, DEFAULT_EPS).unwrap();
        }
        assert!(params[0].data[0].abs() < 1e-2, "w = {}", params[0].data[0]);
    }

    #[test]
    fn matches_reference_recurrence() {
        // Independent scalar implementation of the textbook update.
        let (lr, b1, b2, eps) = (3e-3, 0.9, 0.999, 1e-8);
        let mut w_ref = 0.4f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let grad_of = |w: f64| (w - 1.3) * 0.8 + w.sin();
        let mut params = one_param(0.4);
        let mut state = AdamState::new(&params);
        for t in 1..=200u64 {
            let g = grad_of(w_ref);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t as i32));
            let v_hat = v / (1.0 - b2.powi(t as i32));
            w_ref -= lr * m_hat / (v_hat.sqrt() + eps);

            let g2 = vec![grad_of(params[0].data[0])];
            adam_step(&mut params, &[g2], &mut state, lr, (b1, b2), eps).unwrap();
        }
        assert_eq!(params[0].data[0], w_ref);
    }

    #[test]
    fn non_finite_grad_rejects_whole_step() {
        let mut params = vec![
            Tensor::new(vec![1], vec![1.0]).unwrap(),
            Tensor::new(vec![1], vec![2.0]).unwrap(),
        ];
        let mut state = AdamState::new(&params);
        let err = adam_step(
            &mut params,
            &[vec![0.5], vec![f64::NAN]],
            &mut state,
            1e-2,
            DEFAULT_BETAS,
            DEFAULT_EPS,
        )
        .unwrap_err();
        assert_eq!(err, AdamError::NonFiniteGrad { index: 1 });
        // nothing moved, not even the first param
        assert_eq!(params[0].data[0], 1.0);
        assert_eq!(state.t, 0);
    }

    #[test]
    fn deterministic_across_runs() {
        let run = || {
            let mut params = one_param(0.9);
            let mut state = AdamState::new(&params);
            for i in 0..50 {
                let g = vec![(i as f64 * 0.1).cos() * params[0].data[0]];
                adam_step(&mut params, &[g], &mut state, 1e-3, DEFAULT_BETAS, DEFAULT_EPS).unwrap();
            }
            params[0].data[0].to_bits()
        };
        assert_eq!(run(), run());
    }
}
