use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{AlopeError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adamw,
    Sgd,
}

impl FromStr for OptimizerKind {
    type Err = AlopeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "adamw" => Ok(OptimizerKind::Adamw),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(AlopeError::invalid(format!("unknown optimizer `{other}` (expected adamw or sgd)"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adamw => "adamw",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Updates the trainable parameters of one or more stores from their
/// accumulated gradients. Moment buffers are created on first use.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub adam: AdamParams,
    step: u64,
    // [store][param] -> (m, v)
    state: Vec<Vec<Option<(Vec<T>, Vec<T>)>>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        Optimizer {
            kind,
            lr,
            weight_decay,
            adam: AdamParams::default(),
            step: 0,
            state: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. Weight decay is decoupled: `p ← p·(1 − lr·wd)` before the gradient step.
    pub fn step(&mut self, stores: &mut [&mut ParamStore<T>]) {
        self.step += 1;
        if self.state.len() < stores.len() {
            self.state.resize_with(stores.len(), Vec::new);
        }
        let lr = T::lit(self.lr);
        let decay = T::lit(1.0 - self.lr * self.weight_decay);
        let (b1, b2, eps) = (T::lit(self.adam.beta1), T::lit(self.adam.beta2), T::lit(self.adam.eps));
        let bc1 = T::one() - b1.powi(self.step as i32);
        let bc2 = T::one() - b2.powi(self.step as i32);
        for (si, store) in stores.iter_mut().enumerate() {
            let slots = &mut self.state[si];
            if slots.len() < store.len() {
                slots.resize_with(store.len(), || None);
            }
            for (pi, p) in store.iter_mut().enumerate() {
                if !p.trainable {
                    continue;
                }
                let value = p.value.data_mut();
                if self.weight_decay != 0.0 {
                    value.iter_mut().for_each(|v| *v *= decay);
                }
                match self.kind {
                    OptimizerKind::Sgd => {
                        for (v, &g) in value.iter_mut().zip(&p.grad) {
                            *v -= lr * g;
                        }
                    }
                    OptimizerKind::Adamw => {
                        let (m, s) = slots[pi].get_or_insert_with(|| (vec![T::zero(); value.len()], vec![T::zero(); value.len()]));
                        for i in 0..value.len() {
                            let g = p.grad[i];
                            m[i] = b1 * m[i] + (T::one() - b1) * g;
                            s[i] = b2 * s[i] + (T::one() - b2) * g * g;
                            let m_hat = m[i] / bc1;
                            let s_hat = s[i] / bc2;
                            value[i] -= lr * m_hat / (s_hat.sqrt() + eps);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn store(v: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::vector(vec![v]), true).unwrap();
        s.get_mut(id).grad[0] = g;
        s
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut s = store(1.25, 0.0);
        let mut opt = Optimizer::new(OptimizerKind::Adamw, 0.1, 0.0);
        for _ in 0..3 {
            opt.step(&mut [&mut s]);
        }
        assert_eq!(s.iter().next().unwrap().1.value.data(), &[1.25]);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        let (p0, g, lr) = (0.5f64, 0.2f64, 1e-3);
        let mut s = store(p0, g);
        let mut opt = Optimizer::new(OptimizerKind::Adamw, lr, 0.0);
        opt.step(&mut [&mut s]);
        let m = 0.1 * g / (1.0 - 0.9);
        let v = 0.001 * g * g / (1.0 - 0.999);
        let expected = p0 - lr * m / (v.sqrt() + 1e-8);
        let got = s.iter().next().unwrap().1.value.data()[0];
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn decoupled_decay_shrinks_by_factor() {
        let mut s = store(2.0, 0.0);
        let mut opt = Optimizer::new(OptimizerKind::Adamw, 0.01, 0.1);
        opt.step(&mut [&mut s]);
        assert_eq!(s.iter().next().unwrap().1.value.data()[0], 2.0 * (1.0 - 0.01 * 0.1));
    }

    #[test]
    fn frozen_params_untouched() {
        let mut s = store(1.0, 5.0);
        let id = s.id("w").unwrap();
        s.set_trainable(id, false);
        Optimizer::new(OptimizerKind::Sgd, 0.5, 0.0).step(&mut [&mut s]);
        assert_eq!(s.value(id).data(), &[1.0]);
    }
}
