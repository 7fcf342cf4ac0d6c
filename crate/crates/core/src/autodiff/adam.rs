use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Hyperparameters of the Adam update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::with_lr(1e-3)
    }
}

/// First/second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        AdamState {
            config,
            step: 0,
            m,
            v,
        }
    }
}

/// One bias-corrected Adam step over aligned parameter and gradient lists.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[&Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape {
            node: "adam".into(),
            detail: format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    for (idx, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[idx].shape() {
            return Err(Error::Shape {
                node: format!("adam param {idx}"),
                detail: format!("param {:?}, grad {:?}", p.shape(), g.shape()),
            });
        }
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (idx, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[idx].data_mut();
        let v = state.v[idx].data_mut();
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_scalar(w: &mut Tensor, g: f64, state: &mut AdamState) {
        let grad = Tensor::filled(&[1], g);
        adam_step(&mut [w], &[&grad], state).unwrap();
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut w = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = w.clone();
        let mut st = AdamState::new(AdamConfig::default(), [&w]);
        let g = Tensor::zeros(&[3]);
        for _ in 0..10 {
            adam_step(&mut [&mut w], &[&g], &mut st).unwrap();
        }
        assert_eq!(w, before);
        assert_eq!(st.step, 10);
    }

    #[test]
    fn first_step_size() {
        // m̂ = 1, v̂ = 1 after bias correction: Δ = −lr / (1 + eps)
        let mut w = Tensor::zeros(&[1]);
        let mut st = AdamState::new(AdamConfig::with_lr(1e-3), [&w]);
        step_scalar(&mut w, 1.0, &mut st);
        assert!((w.item() + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15, "{}", w.item());
    }

    #[test]
    fn converges_on_quadratic() {
        // f(w) = (w − 3)² with lr = 1e-2; 5000 steps
        let mut w = Tensor::zeros(&[1]);
        let mut st = AdamState::new(AdamConfig::with_lr(1e-2), [&w]);
        for _ in 0..5000 {
            let g = 2.0 * (w.item() - 3.0);
            step_scalar(&mut w, g, &mut st);
        }
        assert!((w.item() - 3.0).abs() < 1e-2, "{}", w.item());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut w = Tensor::zeros(&[2]);
        let mut st = AdamState::new(AdamConfig::default(), [&w]);
        let g = Tensor::zeros(&[3]);
        assert!(adam_step(&mut [&mut w], &[&g], &mut st).is_err());
        assert!(adam_step(&mut [&mut w], &[], &mut st).is_err());
        assert_eq!(st.step, 0);
    }
}
