//! Adaptive-moment meta-optimizer over flat parameter vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn bitwise_eq(&self, other: &AdamState) -> bool {
        self.t == other.t
            && self.m.len() == other.m.len()
            && self.m.iter().zip(&other.m).all(|(a, b)| a.to_bits() == b.to_bits())
            && self.v.iter().zip(&other.v).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// One update of `theta` in place from `grad`.
    pub fn step(&mut self, cfg: &AdamConfig, theta: &mut [f64], grad: &[f64]) -> Result<()> {
        if theta.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::LengthMismatch {
                expected: self.m.len(),
                got: theta.len().max(grad.len()),
            });
        }
        self.t += 1;
        let b1t = 1.0 - cfg.beta1.powi(self.t as i32);
        let b2t = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            theta[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_in_gradient_sign() {
        // with bias correction the very first update is lr * g / (|g| + eps)
        let cfg = AdamConfig::default();
        let mut state = AdamState::new(2);
        let mut theta = vec![0.0, 0.0];
        state.step(&cfg, &mut theta, &[0.5, -2.0]).unwrap();
        assert!((theta[0] + cfg.lr).abs() < 1e-6);
        assert!((theta[1] - cfg.lr).abs() < 1e-6);
    }

    #[test]
    fn deterministic_given_same_inputs() {
        let cfg = AdamConfig::default();
        let run = || {
            let mut s = AdamState::new(3);
            let mut th = vec![1.0, -1.0, 0.5];
            for k in 0..20 {
                let g = vec![0.1 * k as f64, -0.2, 0.05 * k as f64];
                s.step(&cfg, &mut th, &g).unwrap();
            }
            (s, th)
        };
        let (s1, t1) = run();
        let (s2, t2) = run();
        assert!(s1.bitwise_eq(&s2));
        assert_eq!(
            t1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            t2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn length_mismatch_rejected() {
        let cfg = AdamConfig::default();
        let mut s = AdamState::new(2);
        let mut th = vec![0.0; 3];
        assert!(s.step(&cfg, &mut th, &[0.0; 3]).is_err());
    }
}
