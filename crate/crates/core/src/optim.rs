//! Adam optimizer with bias correction.

use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("training diverged: non-finite gradient for parameter '{0}'")]
    TrainingDiverged(String),
    #[error("shape mismatch for parameter '{name}': param {param:?} vs grad {grad:?}")]
    ShapeMismatch { name: String, param: Vec<usize>, grad: Vec<usize> },
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub first_moments: Vec<Tensor>,
    pub second_moments: Vec<Tensor>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(param_shapes: &[Vec<usize>], learning_rate: f64) -> Self {
        OptimizerState {
            first_moments: param_shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            second_moments: param_shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One Adam update over a named parameter list. `names` is used only for
/// diagnostics on divergence.
pub fn adam_step(
    state: &mut OptimizerState,
    params: &mut [Tensor],
    grads: &[Tensor],
    names: &[&str],
) -> Result<(), OptimError> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (i, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
        let name = names.get(i).copied().unwrap_or("?");
        if param.shape() != grad.shape() {
            return Err(OptimError::ShapeMismatch {
                name: name.to_string(),
                param: param.shape().to_vec(),
                grad: grad.shape().to_vec(),
            });
        }
        if !grad.is_finite() {
            return Err(OptimError::TrainingDiverged(name.to_string()));
        }
        let m = state.first_moments[i].data_mut();
        let v = state.second_moments[i].data_mut();
        let p = param.data_mut();
        for j in 0..p.len() {
            let g = grad.data()[j];
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_setup(lr: f64) -> (OptimizerState, Vec<Tensor>) {
        (OptimizerState::new(&[vec![1]], lr), vec![Tensor::scalar(1.0)])
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (mut state, mut params) = scalar_setup(1e-2);
        adam_step(&mut state, &mut params, &[Tensor::scalar(0.0)], &["p"]).unwrap();
        assert_eq!(params[0].item(), 1.0);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // bias-corrected step 1: m_hat = g, v_hat = g^2, update = lr*g/(|g|+eps)
        let lr = 2e-4;
        let (mut state, mut params) = scalar_setup(lr);
        adam_step(&mut state, &mut params, &[Tensor::scalar(1.0)], &["p"]).unwrap();
        let moved = 1.0 - params[0].item();
        assert!((moved - lr).abs() < 1e-9, "moved {moved}");
    }

    #[test]
    fn optimizer_is_stateful() {
        // accumulated first moment keeps moving the parameter even after
        // the gradient goes to zero; a fresh optimizer would not move at all
        let (mut s1, mut p1) = scalar_setup(1e-2);
        adam_step(&mut s1, &mut p1, &[Tensor::scalar(1.0)], &["p"]).unwrap();
        let after_one = p1[0].item();
        adam_step(&mut s1, &mut p1, &[Tensor::scalar(0.0)], &["p"]).unwrap();
        assert!(p1[0].item() < after_one);
        assert_eq!(s1.step, 2);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let (mut state, mut params) = scalar_setup(1e-2);
        let err = adam_step(&mut state, &mut params, &[Tensor::scalar(f64::NAN)], &["enc1_w"]).unwrap_err();
        assert!(err.to_string().contains("enc1_w"));
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut state = OptimizerState::new(&[vec![2]], 1e-2);
        let mut params = vec![Tensor::zeros(vec![2])];
        let err = adam_step(&mut state, &mut params, &[Tensor::zeros(vec![3])], &["p"]).unwrap_err();
        assert!(matches!(err, OptimError::ShapeMismatch { .. }));
    }

    #[test]
    fn descends_a_quadratic() {
        // minimize (x-3)^2 from 0; gradient 2(x-3)
        let mut state = OptimizerState::new(&[vec![1]], 0.05);
        let mut params = vec![Tensor::scalar(0.0)];
        for _ in 0..2000 {
            let g = 2.0 * (params[0].item() - 3.0);
            adam_step(&mut state, &mut params, &[Tensor::scalar(g)], &["x"]).unwrap();
        }
        assert!((params[0].item() - 3.0).abs() < 1e-2);
    }
}
