use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for a fixed list of parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// Applies one update in place and increments `step`.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::dim(
                "adam_step",
                format!(
                    "{} params, {} grads, {} moment buffers",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::dim(
                    "adam_step",
                    format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let m_hat = *mv / c1;
                let v_hat = *vv / c2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut params = vec![Tensor::vector(vec![1.5, -2.0]), Tensor::scalar(0.25)];
        let before = params.clone();
        let mut st = AdamState::new(AdamConfig::default(), &params);
        let grads: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        st.update(&mut params, &grads).unwrap();
        assert_eq!(params, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = AdamConfig {
            eps: 0.0,
            ..AdamConfig::default()
        };
        let mut params = vec![Tensor::scalar(0.0)];
        let mut st = AdamState::new(cfg, &params);
        st.update(&mut params, &[Tensor::scalar(1.0)]).unwrap();
        assert!((params[0].data()[0] + 1e-3).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_two_steps_against_recurrence() {
        // Closed form for constant g: m_t = g(1-b1^t), v_t = g²(1-b2^t), so
        // m̂/√v̂ = sign(g) and each update is exactly lr in magnitude (eps=0).
        let cfg = AdamConfig {
            eps: 0.0,
            ..AdamConfig::default()
        };
        let g = 0.37;
        let mut params = vec![Tensor::scalar(1.0)];
        let mut st = AdamState::new(cfg, &params);
        let mut prev = 1.0;
        for _ in 0..2 {
            st.update(&mut params, &[Tensor::scalar(g)]).unwrap();
            let cur = params[0].data()[0];
            assert!(((prev - cur) - cfg.lr).abs() < 1e-15);
            prev = cur;
        }
        assert!((st.second_moments()[0].data()[0] - g * g * (1.0 - 0.999f64.powi(2))).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = vec![Tensor::vector(vec![1.0, 2.0])];
        let mut st = AdamState::new(AdamConfig::default(), &params);
        assert!(st.update(&mut params, &[Tensor::scalar(1.0)]).is_err());
        assert_eq!(st.step, 0);
    }
}
