use serde::{Deserialize, Serialize};

use crate::error::{CafeError, Result};

use super::precision::round_buf;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with bias correction. L2 regularization enters as an additive
/// gradient term g <- g + wd * theta on parameters flagged for decay.
pub struct Adam {
    pub cfg: AdamConfig,
    pub step_count: u64,
    moments: Vec<(Tensor, Tensor)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, shapes: &[Vec<usize>]) -> Self {
        let moments = shapes
            .iter()
            .map(|s| (Tensor::zeros(s), Tensor::zeros(s)))
            .collect();
        Adam {
            cfg,
            step_count: 0,
            moments,
        }
    }

    /// One optimizer step over all parameters. `grads[i]` may be `None`
    /// (parameter unused this step); its moments still decay.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Option<&Tensor>],
        decay: &[bool],
    ) -> Result<()> {
        if params.len() != self.moments.len() || grads.len() != params.len() {
            return Err(CafeError::shape(format!(
                "adam: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.moments.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for i in 0..params.len() {
            if let Some(g) = grads[i] {
                if g.shape() != params[i].shape() {
                    return Err(CafeError::shape(format!(
                        "adam: grad shape {:?} vs param shape {:?}",
                        g.shape(),
                        params[i].shape()
                    )));
                }
            }
            let (m, v) = &mut self.moments[i];
            let wd = if decay[i] { self.cfg.weight_decay } else { 0.0 };
            let p = params[i].data_mut();
            for j in 0..p.len() {
                let raw = grads[i].map_or(0.0, |g| g.data()[j]);
                let g = raw + wd * p[j];
                let mj = self.cfg.beta1 * m.data()[j] + (1.0 - self.cfg.beta1) * g;
                let vj = self.cfg.beta2 * v.data()[j] + (1.0 - self.cfg.beta2) * g * g;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                let m_hat = mj / bc1;
                let v_hat = vj / bc2;
                p[j] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
            round_buf(p);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::precision::{with_precision, Precision};

    fn cfg(lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            weight_decay: 0.0,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params_unchanged() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0]);
        let g = Tensor::from_vec(vec![0.0, 0.0]);
        let mut adam = Adam::new(cfg(0.1), &[vec![2]]);
        adam.step(&mut [&mut p], &[Some(&g)], &[true]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn bias_corrected_first_step_moves_by_lr() {
        with_precision(Precision::F64, || {
            let mut p = Tensor::scalar(1.0);
            let g = Tensor::scalar(0.3);
            let mut adam = Adam::new(cfg(0.01), &[vec![1]]);
            adam.step(&mut [&mut p], &[Some(&g)], &[false]).unwrap();
            // m_hat = g, v_hat = g^2, update = -lr * g / (|g| + eps) ~ -lr
            assert!((p.item() - (1.0 - 0.01)).abs() < 1e-6);
        });
    }

    #[test]
    fn three_steps_on_quadratic_match_hand_trace() {
        // f(theta) = theta^2, grad = 2*theta, from theta = 1, lr = 0.1.
        with_precision(Precision::F64, || {
            let acfg = cfg(0.1);
            let mut theta = Tensor::scalar(1.0);
            let mut adam = Adam::new(acfg, &[vec![1]]);

            // independent hand-stepped trace
            let (b1, b2, eps) = (acfg.beta1, acfg.beta2, acfg.eps);
            let (mut m, mut v, mut th) = (0.0, 0.0, 1.0);
            let mut expected = Vec::new();
            for t in 1..=3 {
                let g = 2.0 * th;
                m = b1 * m + (1.0 - b1) * g;
                v = b2 * v + (1.0 - b2) * g * g;
                let m_hat = m / (1.0 - b1.powi(t));
                let v_hat = v / (1.0 - b2.powi(t));
                th -= 0.1 * m_hat / (v_hat.sqrt() + eps);
                expected.push(th);
            }

            for t in 0..3 {
                let g = Tensor::scalar(2.0 * theta.item());
                adam.step(&mut [&mut theta], &[Some(&g)], &[false]).unwrap();
                assert!(
                    (theta.item() - expected[t]).abs() < 1e-12,
                    "step {t}: {} vs {}",
                    theta.item(),
                    expected[t]
                );
            }
        });
    }

    #[test]
    fn grad_shape_mismatch_is_an_error() {
        let mut p = Tensor::from_vec(vec![1.0, 2.0]);
        let g = Tensor::from_vec(vec![1.0]);
        let mut adam = Adam::new(cfg(0.1), &[vec![2]]);
        assert!(adam.step(&mut [&mut p], &[Some(&g)], &[false]).is_err());
    }
}
