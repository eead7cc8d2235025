//! AdamW and LAMB over lists of tensors.

use serde::{Deserialize, Serialize};

use super::{TrainError, Result};
use crate::model::ModelParams;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adamw,
    Lamb,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// LAMB only: skip the trust ratio (use `r = 1`).
    pub force_unit_trust: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adamw,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
            force_unit_trust: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(TrainError::Config(format!("betas must lie in (0, 1), got {} and {}", self.beta1, self.beta2)));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(TrainError::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Optimizer with first and second moment state per tensor.
#[derive(Debug, Clone)]
pub struct Optimizer<T: Scalar> {
    pub config: OptimizerConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    last_trust: Vec<f64>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new<'a>(config: OptimizerConfig, shapes: impl IntoIterator<Item = &'a [usize]>) -> Result<Self> {
        config.validate()?;
        let m: Vec<Tensor<T>> = shapes.into_iter().map(|s| Tensor::zeros(s.to_vec())).collect();
        Ok(Self {
            config,
            step: 0,
            v: m.clone(),
            last_trust: vec![1.0; m.len()],
            m,
        })
    }

    pub fn for_model(config: OptimizerConfig, params: &ModelParams<Tensor<T>>) -> Result<Self> {
        let named = params.named();
        Self::new(config, named.iter().map(|(_, t)| t.shape()))
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// Trust ratios used by the last LAMB step, one per tensor.
    pub fn last_trust_ratios(&self) -> &[f64] {
        &self.last_trust
    }

    fn check(&self, grads: &[&Tensor<T>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(TrainError::Config(format!("{} gradients for {} tensors", grads.len(), self.m.len())));
        }
        for (i, (g, m)) in grads.iter().zip(&self.m).enumerate() {
            if g.shape() != m.shape() {
                return Err(TrainError::Config(format!("gradient {i} has shape {:?}, state has {:?}", g.shape(), m.shape())));
            }
            if !g.is_finite() {
                return Err(TrainError::NonFiniteGradient { tensor: i });
            }
        }
        Ok(())
    }

    /// One update of `params` (in state order). Nothing is modified if any
    /// gradient is non-finite.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        let grads: Vec<&Tensor<T>> = grads.iter().collect();
        self.check(&grads)?;
        if params.len() != grads.len() {
            return Err(TrainError::Config(format!("{} params for {} gradients", params.len(), grads.len())));
        }
        self.step += 1;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.update(i, p, g, lr);
        }
        Ok(())
    }

    pub fn step_model(&mut self, params: &mut ModelParams<Tensor<T>>, grads: &ModelParams<Tensor<T>>, lr: f64) -> Result<()> {
        let grads: Vec<&Tensor<T>> = grads.named().into_iter().map(|(_, t)| t).collect();
        self.check(&grads)?;
        self.step += 1;
        let mut i = 0;
        params.for_each_mut(|_, p| {
            self.update(i, p, grads[i], lr);
            i += 1;
        });
        Ok(())
    }

    fn update(&mut self, i: usize, w: &mut Tensor<T>, g: &Tensor<T>, lr: f64) {
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one, eps) = (T::one(), T::lit(c.eps));
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
        let g = g.data();
        let mut u = Vec::with_capacity(g.len());
        for j in 0..g.len() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            u.push((m[j] / bc1) / ((v[j] / bc2).sqrt() + eps));
        }
        let lr_t = T::lit(lr);
        let w = w.data_mut();
        match c.kind {
            OptimizerKind::Adamw => {
                let decay = one - lr_t * T::lit(c.weight_decay);
                for (wj, uj) in w.iter_mut().zip(&u) {
                    *wj = *wj * decay;
                    *wj = *wj - lr_t * *uj;
                }
            }
            OptimizerKind::Lamb => {
                let wd = T::lit(c.weight_decay);
                for (uj, wj) in u.iter_mut().zip(w.iter()) {
                    *uj = *uj + wd * *wj;
                }
                let r = if c.force_unit_trust { T::one() } else { trust_ratio(w, &u) };
                self.last_trust[i] = r.to_f64().unwrap_or(f64::NAN);
                let scaled = lr_t * r;
                for (wj, uj) in w.iter_mut().zip(&u) {
                    *wj = *wj - scaled * *uj;
                }
            }
        }
    }
}

/// `||w|| / ||u||`, or `1` when either norm is zero.
pub fn trust_ratio<T: Scalar>(w: &[T], u: &[T]) -> T {
    let norm = |x: &[T]| x.iter().map(|&a| a * a).sum::<T>().sqrt();
    let (nw, nu) = (norm(w), norm(u));
    if nw == T::zero() || nu == T::zero() {
        T::one()
    } else {
        nw / nu
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_opt(kind: OptimizerKind, wd: f64) -> Optimizer<f64> {
        let config = OptimizerConfig {
            kind,
            weight_decay: wd,
            ..OptimizerConfig::default()
        };
        Optimizer::new(config, [&[1usize][..]]).unwrap()
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        for kind in [OptimizerKind::Adamw, OptimizerKind::Lamb] {
            let mut opt = scalar_opt(kind, 0.0);
            let mut w = vec![Tensor::from_fn([1], |_| 0.7)];
            opt.step(&mut w, &[Tensor::zeros([1])], 0.1).unwrap();
            assert_eq!(w[0].data(), &[0.7]);
        }
    }

    #[test]
    fn decay_only() {
        let mut opt = scalar_opt(OptimizerKind::Adamw, 0.1);
        let mut w = vec![Tensor::from_fn([1], |_| 2.0)];
        opt.step(&mut w, &[Tensor::zeros([1])], 0.5).unwrap();
        assert_eq!(w[0].data(), &[2.0 * (1.0 - 0.5 * 0.1)]);
    }

    #[test]
    fn non_finite_gradient_leaves_state_untouched() {
        let mut opt = scalar_opt(OptimizerKind::Lamb, 0.0);
        let mut w = vec![Tensor::from_fn([1], |_| 1.0)];
        let err = opt.step(&mut w, &[Tensor::full([1], f64::NAN)], 0.1).unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteGradient { tensor: 0 }));
        assert_eq!(opt.steps(), 0);
        assert_eq!(w[0].data(), &[1.0]);
    }

    #[test]
    fn trust_ratio_guards() {
        assert_eq!(trust_ratio(&[0.0f64, 0.0], &[1.0, 2.0]), 1.0);
        assert_eq!(trust_ratio(&[3.0f64, 4.0], &[0.0, 0.0]), 1.0);
        assert_eq!(trust_ratio(&[3.0f64, 4.0], &[0.0, 10.0]), 0.5);
    }

    #[test]
    fn bad_config() {
        for (b1, b2) in [(0.0, 0.9), (0.9, 1.0)] {
            let c = OptimizerConfig { beta1: b1, beta2: b2, ..Default::default() };
            assert!(Optimizer::<f64>::new(c, [&[1usize][..]]).is_err());
        }
    }
}
