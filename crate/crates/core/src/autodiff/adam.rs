use serde::{Deserialize, Serialize};

use super::nn::NetworkParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam over a group of networks optimized jointly.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<NetworkParams>,
    second: Vec<NetworkParams>,
}

impl AdamState {
    pub fn new(params: &[NetworkParams], config: AdamConfig) -> Result<Self> {
        let zeros = params
            .iter()
            .map(|p| NetworkParams::zeros(p.layer_sizes()))
            .collect::<Result<Vec<_>>>()?;
        Ok(AdamState {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn second_moments(&self) -> &[NetworkParams] {
        &self.second
    }

    /// One update `p -= lr * m_hat / (sqrt(v_hat) + eps)` on every network.
    ///
    /// Rejects non-finite gradients before touching any state, reporting the
    /// optimizer step at which they appeared.
    pub fn step(&mut self, params: &mut [NetworkParams], grads: &[NetworkParams], lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::Usage("Adam: parameter and gradient groups differ".into()));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.layer_sizes() != g.layer_sizes() {
                return Err(Error::Usage("Adam: gradient shape mismatch".into()));
            }
        }
        if let Some(pos) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                iteration: self.step as usize,
                step: None,
                reason: format!("non-finite gradient in parameter group {pos}"),
            });
        }

        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);

        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            for (((pb, gb), mb), vb) in p
                .buffers_mut()
                .zip(g.buffers())
                .zip(m.buffers_mut())
                .zip(v.buffers_mut())
            {
                for i in 0..pb.len() {
                    let gi = gb[i];
                    mb[i] = beta1 * mb[i] + (1.0 - beta1) * gi;
                    vb[i] = beta2 * vb[i] + (1.0 - beta2) * gi * gi;
                    let m_hat = mb[i] / c1;
                    let v_hat = vb[i] / c2;
                    pb[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_net(value: f64) -> NetworkParams {
        NetworkParams::from_parts(&[1, 1], vec![vec![value]], vec![vec![0.0]]).unwrap()
    }

    #[test]
    fn zero_gradients_leave_params_fixed() {
        let mut params = vec![NetworkParams::init(&[3, 4, 2], 1).unwrap()];
        let before = params.clone();
        let grads = vec![NetworkParams::zeros(&[3, 4, 2]).unwrap()];
        let mut adam = AdamState::new(&params, AdamConfig::default()).unwrap();
        for _ in 0..5 {
            adam.step(&mut params, &grads, 1e-3).unwrap();
        }
        assert_eq!(params, before);
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn one_step_hand_value() {
        let mut params = vec![scalar_net(0.0)];
        let grads = vec![scalar_net(1.0)];
        let mut adam = AdamState::new(&params, AdamConfig::default()).unwrap();
        adam.step(&mut params, &grads, 0.1).unwrap();
        // m_hat = v_hat = 1 after bias correction: p = -0.1 / (1 + 1e-8)
        let p = params[0].weights(0)[0];
        assert!((p - (-0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((p + 0.1).abs() < 1e-8);
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let mut params = vec![scalar_net(0.0)];
        let mut nan = scalar_net(0.0);
        nan.buffers_mut().next().unwrap()[0] = f64::NAN;
        let grads = vec![nan];
        let mut adam = AdamState::new(&params, AdamConfig::default()).unwrap();
        let err = adam.step(&mut params, &grads, 0.1).unwrap_err();
        assert!(err.is_divergence());
        assert_eq!(params[0].weights(0)[0], 0.0);
    }

    #[test]
    fn second_moments_stay_non_negative() {
        let mut params = vec![scalar_net(0.5)];
        let mut adam = AdamState::new(&params, AdamConfig::default()).unwrap();
        for g in [-3.0, 2.0, -0.5, 1e-3] {
            adam.step(&mut params, &[scalar_net(g)], 0.01).unwrap();
            assert!(adam.second_moments()[0].buffers().all(|b| b.iter().all(|&v| v >= 0.0)));
        }
    }
}
