use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter moment estimates.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    pub step: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(shape: &[usize], config: AdamConfig) -> Self {
        AdamState {
            first_moment: Tensor::zeros(shape),
            second_moment: Tensor::zeros(shape),
            step: 0,
            config,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step(param: &mut Tensor, grad: &Tensor, state: &mut AdamState) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.first_moment.shape() {
        return Err(Error::Dimension {
            op: "adam_step",
            lhs: param.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    let AdamConfig {
        learning_rate: lr,
        beta1: b1,
        beta2: b2,
        epsilon: eps,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let m = state.first_moment.data_mut();
    let v = state.second_moment.data_mut();
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&[3], AdamConfig::default());
        // Nonzero moments from an earlier step must not leak into a zero-gradient step.
        st.step = 7;
        for _ in 0..5 {
            adam_step(&mut p, &Tensor::zeros(&[3]), &mut st).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step, 12);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [2.5, -0.01, 1e3] {
            let lr = 0.01;
            let mut p = Tensor::scalar(1.0);
            let mut st = AdamState::new(
                &[1],
                AdamConfig {
                    learning_rate: lr,
                    ..Default::default()
                },
            );
            adam_step(&mut p, &Tensor::scalar(g), &mut st).unwrap();
            let delta = p.data()[0] - 1.0;
            let expected = -lr * f64::signum(g);
            assert!(((delta - expected) / expected).abs() < 1e-6, "g={g} delta={delta}");
        }
    }

    #[test]
    fn zero_rate_updates_moments_only() {
        let mut p = Tensor::scalar(4.0);
        let mut st = AdamState::new(
            &[1],
            AdamConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
        );
        adam_step(&mut p, &Tensor::scalar(2.0), &mut st).unwrap();
        assert_eq!(p.data(), &[4.0]);
        assert!((st.first_moment.data()[0] - 0.2).abs() < 1e-15);
        assert!((st.second_moment.data()[0] - 0.004).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Tensor::zeros(&[2]);
        let mut st = AdamState::new(&[2], AdamConfig::default());
        assert!(adam_step(&mut p, &Tensor::zeros(&[3]), &mut st).is_err());
    }
}
