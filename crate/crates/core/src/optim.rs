//! Adam with exponential learning-rate decay.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::nn::ParamGrads;
use crate::params::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// First/second moments per parameter, step counter and current rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    /// Completed epochs; lets a resumed run pick up its schedule.
    pub epoch: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            step: 0,
            lr,
            epoch: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Multiplies the rate by `factor` (one decay boundary).
    pub fn decay(&mut self, factor: f64) {
        self.lr *= factor;
    }
}

/// One bias-corrected Adam update of every parameter named in `grads`.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ParamGrads,
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.len() != g.len() {
            return Err(Error::Integrity(alloc::format!(
                "gradient for `{name}` has {} values, parameter has {}",
                g.len(),
                p.len()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(hyper.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(hyper.beta2, t as f64);
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        let mom = state.moments.entry(name.to_string()).or_insert_with(|| Moments {
            m: alloc::vec![0.0; g.len()],
            v: alloc::vec![0.0; g.len()],
        });
        if mom.m.len() != g.len() {
            return Err(Error::Integrity(alloc::format!(
                "optimizer state for `{name}` does not match its parameter"
            )));
        }
        for (((w, &gi), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g)
            .zip(mom.m.iter_mut())
            .zip(mom.v.iter_mut())
        {
            *m = hyper.beta1 * *m + (1.0 - hyper.beta1) * gi;
            *v = hyper.beta2 * *v + (1.0 - hyper.beta2) * gi * gi;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= state.lr * m_hat / (math::sqrt(v_hat) + hyper.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one(name: &str, v: f64) -> ModelParams {
        let mut p = ModelParams::new();
        p.insert(name, Tensor::scalar(v)).unwrap();
        p
    }

    #[test]
    fn zero_gradient_is_a_null_step() {
        let mut p = one("w", 0.75);
        let mut s = AdamState::new(0.1);
        let grads: ParamGrads = [("w".to_string(), alloc::vec![0.0])].into_iter().collect();
        adam_step(&mut p, &grads, &mut s, &AdamHyper::default()).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 0.75);
        assert_eq!(s.moments["w"].m, alloc::vec![0.0]);
        assert_eq!(s.moments["w"].v, alloc::vec![0.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = one("w", 0.0);
        let mut s = AdamState::new(0.1);
        let grads: ParamGrads = [("w".to_string(), alloc::vec![2.0])].into_iter().collect();
        adam_step(&mut p, &grads, &mut s, &AdamHyper::default()).unwrap();
        assert!((p.get("w").unwrap().item() + 0.1).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_is_integrity_error() {
        let mut p = one("w", 0.0);
        let mut s = AdamState::new(0.1);
        let grads: ParamGrads = [("w".to_string(), alloc::vec![1.0, 2.0])].into_iter().collect();
        assert!(matches!(
            adam_step(&mut p, &grads, &mut s, &AdamHyper::default()),
            Err(Error::Integrity(_))
        ));
        assert_eq!(s.step, 0);
    }

    #[test]
    fn decay_compounds() {
        let mut s = AdamState::new(1e-4);
        for _ in 0..10 {
            s.decay(0.95);
        }
        assert!((s.lr - 1e-4 * libm::pow(0.95, 10.0)).abs() < 1e-12);
    }
}
