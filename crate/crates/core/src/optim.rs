//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.0002,
            beta1: 0.0,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("adam lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidArgument(format!("adam {name} must be in [0, 1), got {b}")));
            }
        }
        Ok(())
    }
}

/// Applies one Adam update at step `t` (1-based) to every parameter of
/// `store` that holds a gradient. Parameters without a gradient keep their
/// value and moment estimates.
pub fn adam_step<F: Real>(store: &mut ParamStore<F>, cfg: &AdamConfig, t: u64) -> Result<()> {
    if t == 0 {
        return Err(Error::InvalidArgument("adam step counter starts at 1".into()));
    }
    let (b1, b2) = (F::lit(cfg.beta1), F::lit(cfg.beta2));
    let one = F::one();
    let c1 = F::lit(1.0 - cfg.beta1.powi(t as i32));
    let c2 = F::lit(1.0 - cfg.beta2.powi(t as i32));
    let lr = F::lit(cfg.lr);
    let eps = F::lit(cfg.eps);
    for p in store.iter_mut() {
        let Some(grad) = p.grad.take() else { continue };
        {
            let (m, v) = (p.m.data_mut(), p.v.data_mut());
            for ((mi, vi), &g) in m.iter_mut().zip(v.iter_mut()).zip(grad.data()) {
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
            }
        }
        let m = p.m.data().to_vec();
        let v = p.v.data().to_vec();
        let w = p.value_mut().data_mut();
        for ((wi, &mi), &vi) in w.iter_mut().zip(&m).zip(&v) {
            let m_hat = mi / c1;
            let v_hat = vi / c2;
            *wi -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        p.grad = Some(grad);
    }
    Ok(())
}

/// Adam bound to one store, keeping its own step counter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Adam { cfg, t: 0 })
    }

    pub fn step<F: Real>(&mut self, store: &mut ParamStore<F>) -> Result<()> {
        self.t += 1;
        adam_step(store, &self.cfg, self.t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};

    fn store_with(w: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new("net");
        let id = s.add("w", Tensor::scalar(w)).unwrap();
        s.get_mut(id).grad = Some(Tensor::scalar(g));
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store_with(0.0, 1.0);
        adam_step(&mut s, &AdamConfig::default(), 1).unwrap();
        let w = s.by_name("w").unwrap().value().item();
        assert!((w + 2e-4).abs() < 1e-10, "{w}");
    }

    #[test]
    fn zero_gradient_leaves_weights() {
        let mut s = ParamStore::<f64>::new("net");
        let id = s.add("w", Tensor::from_f64(Shape::new(1, 3, 1, 1), &[0.5, -1.0, 2.0]).unwrap()).unwrap();
        s.get_mut(id).grad = Some(Tensor::zeros(Shape::new(1, 3, 1, 1)));
        adam_step(&mut s, &AdamConfig::default(), 1).unwrap();
        assert_eq!(s.get(id).value().data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn config_validation() {
        assert!(AdamConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(AdamConfig { beta2: 1.0, ..Default::default() }.validate().is_err());
        assert!(AdamConfig::default().validate().is_ok());
        assert!(adam_step(&mut store_with(0.0, 1.0), &AdamConfig::default(), 0).is_err());
    }
}
