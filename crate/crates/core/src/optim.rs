//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::NamedParam;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 4e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

/// First/second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &[NamedParam<T>]) -> Result<Self> {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect::<Result<Vec<_>>>();
        Ok(Self { step: 0, first: zeros()?, second: zeros()? })
    }

    /// One update:
    ///
    /// ```text
    /// m = b1 m + (1 - b1) g          v = b2 v + (1 - b2) g^2
    /// p = p (1 - lr wd) - lr (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
    /// ```
    pub fn step(&mut self, params: &mut [NamedParam<T>], grads: &[Option<&Tensor<T>>], cfg: &AdamWConfig) -> Result<()> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            match g {
                None => return Err(Error::Contract(format!("missing gradient for {}", p.name))),
                Some(g) if g.shape() != p.value.shape() => {
                    return Err(Error::Contract(format!("gradient shape {:?} for {} {:?}", g.shape(), p.name, p.value.shape())))
                }
                _ => {}
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let one = T::one();
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        let lr = T::lit(cfg.lr);
        let decay = one - lr * T::lit(cfg.weight_decay);
        let eps = T::lit(cfg.eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            let g = g.expect("checked above");
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w = *w * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64) -> Vec<NamedParam<f64>> {
        vec![NamedParam { name: "w".into(), value: Tensor::from_vec([1], vec![v]).unwrap() }]
    }

    #[test]
    fn first_step_magnitude() {
        let cfg = AdamWConfig { lr: 1e-3, ..Default::default() };
        let mut params = param(1.0);
        let mut state = OptimizerState::new(&params).unwrap();
        // f(w) = w^2/2, grad = w
        let g = params[0].value.clone();
        state.step(&mut params, &[Some(&g)], &cfg).unwrap();
        let moved = 1.0 - params[0].value.data()[0];
        let expected = cfg.lr * (1.0 + cfg.weight_decay);
        assert!((moved - expected).abs() < 1e-8, "moved {moved}, expected {expected}");
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut params = param(0.7);
        let mut state = OptimizerState::new(&params).unwrap();
        let g = Tensor::zeros([1]).unwrap();
        for _ in 0..3 {
            state.step(&mut params, &[Some(&g)], &cfg).unwrap();
        }
        assert_eq!(params[0].value.data()[0], 0.7);
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut params = param(1.0);
        let mut state = OptimizerState::new(&params).unwrap();
        assert!(matches!(state.step(&mut params, &[None], &AdamWConfig::default()), Err(Error::Contract(_))));
        assert_eq!(state.step, 0);
    }
}
