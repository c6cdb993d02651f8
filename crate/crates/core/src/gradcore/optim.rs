use std::collections::HashMap;

use super::param::{ParamId, ParamSet, Parameter};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First-order optimizer bound to a fixed set of parameters.
///
/// `step` only ever writes to registered parameters; anything else passed in
/// is left untouched.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    registered: ParamSet,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
    step_count: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, registered: ParamSet) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::contract(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Self {
            kind,
            lr,
            registered,
            moments: HashMap::new(),
            step_count: 0,
        })
    }

    pub fn sgd(lr: f64, registered: ParamSet) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, lr, registered)
    }

    pub fn adam(lr: f64, registered: ParamSet) -> Result<Self> {
        Self::new(OptimizerKind::adam(), lr, registered)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn registered(&self) -> &ParamSet {
        &self.registered
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to every registered parameter in `params`, then
    /// zeroes their gradients.
    pub fn step(&mut self, params: &mut [&mut Parameter]) -> Result<()> {
        for p in params.iter() {
            if self.registered.contains(p.id()) && p.grad.is_none() {
                return Err(Error::contract(format!(
                    "parameter `{}` has no gradient",
                    p.name()
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        for p in params.iter_mut() {
            if !self.registered.contains(p.id()) {
                continue;
            }
            let grad = p.grad.take().expect("checked above");
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in p.value.data_mut().iter_mut().zip(grad.data()) {
                        *w -= self.lr * g;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let n = grad.numel();
                    let (m, v) = self
                        .moments
                        .entry(p.id())
                        .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    for (i, (w, &g)) in p.value.data_mut().iter_mut().zip(grad.data()).enumerate() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        *w -= self.lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::Tensor;

    fn param(v: f64, g: Option<f64>) -> Parameter {
        let mut p = Parameter::new("p", Tensor::vector(vec![v]));
        p.grad = g.map(|g| Tensor::vector(vec![g]));
        p
    }

    #[test]
    fn sgd_rule() {
        let mut p = param(1.0, Some(2.0));
        let mut opt = Optimizer::sgd(0.1, [p.id()].into_iter().collect()).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.value.item() - 0.8).abs() < 1e-15);
        assert_eq!(p.grad.as_ref().unwrap().item(), 0.0);
    }

    #[test]
    fn zero_grad_leaves_param() {
        for mut opt in [
            Optimizer::sgd(0.1, ParamSet::default()).unwrap(),
            Optimizer::adam(1e-3, ParamSet::default()).unwrap(),
        ] {
            let mut p = param(1.5, Some(0.0));
            opt.registered = [p.id()].into_iter().collect();
            opt.step(&mut [&mut p]).unwrap();
            assert_eq!(p.value.item().to_bits(), 1.5f64.to_bits());
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // m_hat = g, v_hat = g^2, so the first step is lr * g / (|g| + eps).
        let mut p = param(0.0, Some(1.0));
        let mut opt = Optimizer::adam(1e-3, [p.id()].into_iter().collect()).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        let expected = -1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((p.value.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn unregistered_params_untouched() {
        let mut a = param(1.0, Some(1.0));
        let mut b = param(2.0, Some(1.0));
        let mut opt = Optimizer::adam(0.1, [a.id()].into_iter().collect()).unwrap();
        opt.step(&mut [&mut a, &mut b]).unwrap();
        assert_ne!(a.value.item(), 1.0);
        assert_eq!(b.value.item().to_bits(), 2.0f64.to_bits());
        assert_eq!(b.grad.as_ref().unwrap().item(), 1.0);
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut p = Parameter::new("enc.w", Tensor::vector(vec![0.0]));
        let mut opt = Optimizer::sgd(0.1, [p.id()].into_iter().collect()).unwrap();
        let err = opt.step(&mut [&mut p]).unwrap_err().to_string();
        assert!(err.contains("enc.w"), "{err}");
    }
}
