use crate::error::{EngineError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adaptive-moment settings with a decoupled L2 decay term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub l2_rate: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2_rate: 0.0,
        }
    }
}

/// Per-parameter first/second moment accumulators and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T = f32> {
    config: AdamConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let lens: Vec<usize> = params.into_iter().map(Tensor::len).collect();
        Self {
            config,
            first: lens.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: lens.iter().map(|&n| vec![T::zero(); n]).collect(),
            step: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter from its stored gradient:
    /// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + l2_rate * p)`.
    pub fn step(&mut self, mut params: Vec<&mut Tensor<T>>) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(EngineError::ParamCount {
                expected: self.first.len(),
                actual: params.len(),
            });
        }
        for (i, p) in params.iter().enumerate() {
            if p.grad().is_none() {
                return Err(EngineError::MissingGradient { index: i });
            }
            if p.len() != self.first[i].len() {
                return Err(EngineError::DataLength {
                    shape: p.shape().to_vec(),
                    expected: self.first[i].len(),
                    actual: p.len(),
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let b1 = T::from_f64(c.beta1);
        let b2 = T::from_f64(c.beta2);
        let one = T::one();
        let bias1 = one - T::from_f64(c.beta1.powi(self.step as i32));
        let bias2 = one - T::from_f64(c.beta2.powi(self.step as i32));
        let lr = T::from_f64(c.learning_rate);
        let eps = T::from_f64(c.eps);
        let decay = T::from_f64(c.l2_rate);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let g = p.grad().expect("checked above").to_vec();
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let update = (*mi / bias1) / ((*vi / bias2).sqrt() + eps);
                *w -= lr * (update + decay * *w);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Tensor<f64> {
        let mut t = Tensor::new(vec![1], vec![v]).unwrap().with_grad();
        t.set_grad(vec![g]).unwrap();
        t
    }

    #[test]
    fn zero_grad_without_decay_leaves_params() {
        let mut p = param(0.7, 0.0);
        let mut opt = OptimizerState::new(AdamConfig::default(), [&p]);
        for _ in 0..5 {
            opt.step(vec![&mut p]).unwrap();
        }
        assert_eq!(p.data()[0], 0.7);
        assert_eq!(opt.steps(), 5);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // t=1, g=0.5: m=0.05, v=0.00025, m_hat=0.5, v_hat=0.25
        // update = 0.5 / (0.5 + 1e-8); p = 1 - 0.1 * (update + 0.01 * 1)
        let mut p = param(1.0, 0.5);
        let cfg = AdamConfig {
            learning_rate: 0.1,
            l2_rate: 0.01,
            ..AdamConfig::default()
        };
        let mut opt = OptimizerState::new(cfg, [&p]);
        opt.step(vec![&mut p]).unwrap();
        let want = 1.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.01);
        assert!((p.data()[0] - want).abs() < 1e-15);
        // t=2, same g: m=0.095, v=0.00049975, m_hat=0.5, v_hat=0.25
        let before = p.data()[0];
        opt.step(vec![&mut p]).unwrap();
        let want2 = before - 0.1 * (0.5 / (0.5 + 1e-8) + 0.01 * before);
        assert!((p.data()[0] - want2).abs() < 1e-12);
    }

    #[test]
    fn decay_shrinks_magnitude_with_zero_grad() {
        let mut p = param(-2.0, 0.0);
        let cfg = AdamConfig {
            l2_rate: 0.1,
            ..AdamConfig::default()
        };
        let mut opt = OptimizerState::new(cfg, [&p]);
        let mut last = p.data()[0].abs();
        for _ in 0..20 {
            opt.step(vec![&mut p]).unwrap();
            let now = p.data()[0].abs();
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut p = Tensor::<f32>::zeros(vec![3]).with_grad();
        let mut opt = OptimizerState::new(AdamConfig::default(), [&p]);
        assert_eq!(
            opt.step(vec![&mut p]).unwrap_err(),
            EngineError::MissingGradient { index: 0 }
        );
    }
}
