//! Adam with bias correction and per-group learning rates.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;


use crate::{bail, Result, Scalar, Tensor};

pub use crate::params::Parameters;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// A trainable tensor handed to the optimizer, tagged with its group.
pub struct ParamRef<'a, F> {
    pub name: String,
    pub group: usize,
    pub tensor: &'a mut Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
struct Moments<F> {
    m: Vec<F>,
    v: Vec<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    pub lrs: Vec<f64>,
    moments: Vec<Moments<F>>,
    step: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(config: AdamConfig, lrs: Vec<f64>) -> Self {
        Self {
            config,
            lrs,
            moments: Vec::new(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update over `params`, which must be passed in
    /// the same order on every call.
    pub fn step(&mut self, params: &mut [ParamRef<'_, F>]) -> Result<()> {
        for p in params.iter() {
            if p.tensor.grad().is_none() {
                bail!(Contract, "parameter {} has no gradient", p.name);
            }
            if p.group >= self.lrs.len() {
                bail!(Contract, "parameter {} names group {} of {}", p.name, p.group, self.lrs.len());
            }
        }
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| Moments {
                    m: vec![F::zero(); p.tensor.len()],
                    v: vec![F::zero(); p.tensor.len()],
                })
                .collect();
        }
        if self.moments.len() != params.len()
            || self.moments.iter().zip(params.iter()).any(|(m, p)| m.m.len() != p.tensor.len())
        {
            bail!(Contract, "optimizer state does not match the parameter list");
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - Float::powi(beta1, t);
        let bc2 = 1.0 - Float::powi(beta2, t);
        let (b1, b2, e) = (F::of(beta1), F::of(beta2), F::of(eps));
        let (one_b1, one_b2) = (F::of(1.0 - beta1), F::of(1.0 - beta2));
        let (bc1, bc2) = (F::of(bc1), F::of(bc2));
        for (p, mom) in params.iter_mut().zip(&mut self.moments) {
            let lr = F::of(self.lrs[p.group]);
            let g: Vec<F> = p.tensor.grad().expect("checked").to_vec();
            let vals = p.tensor.values_mut();
            for i in 0..vals.len() {
                mom.m[i] = b1 * mom.m[i] + one_b1 * g[i];
                mom.v[i] = b2 * mom.v[i] + one_b2 * g[i] * g[i];
                let m_hat = mom.m[i] / bc1;
                let v_hat = mom.v[i] / bc2;
                vals[i] = vals[i] - lr * m_hat / (v_hat.sqrt() + e);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(x: f64, g: f64) -> Tensor<f64> {
        let mut t = Tensor::new(vec![1], vec![x]).unwrap().param();
        t.accumulate_grad(&[g]);
        t
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut t = Tensor::<f64>::from_fn(&[3], |i| i as f64).param();
        t.zero_grad();
        let mut opt = AdamState::new(AdamConfig::default(), vec![0.1]);
        let before = t.values().to_vec();
        opt.step(&mut [ParamRef { name: "t".into(), group: 0, tensor: &mut t }]).unwrap();
        assert_eq!(t.values(), before.as_slice());
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut t = scalar_param(0.0, 1.0);
        let mut opt = AdamState::new(AdamConfig::default(), vec![0.1]);
        opt.step(&mut [ParamRef { name: "t".into(), group: 0, tensor: &mut t }]).unwrap();
        assert!((t.values()[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut t = Tensor::<f64>::zeros(&[1]).param();
        let mut opt = AdamState::new(AdamConfig::default(), vec![0.1]);
        let r = opt.step(&mut [ParamRef { name: "w".into(), group: 0, tensor: &mut t }]);
        assert!(matches!(r, Err(crate::Error::Contract(_))));
    }

    #[test]
    fn quadratic_trajectory_matches_scalar_adam() {
        // f(x) = (x - 3)², grad 2(x - 3).
        let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
        let mut x_ref = 0.5f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut expected = Vec::new();
        for t in 1..=3 {
            let g = 2.0 * (x_ref - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - libm_pow(b1, t));
            let vh = v / (1.0 - libm_pow(b2, t));
            x_ref -= lr * mh / (num_traits::Float::sqrt(vh) + eps);
            expected.push(x_ref);
        }

        let mut x = Tensor::<f64>::new(vec![1], vec![0.5]).unwrap().param();
        let mut opt = AdamState::new(AdamConfig { beta1: b1, beta2: b2, eps }, vec![lr]);
        for want in expected {
            x.zero_grad();
            let g = 2.0 * (x.values()[0] - 3.0);
            x.accumulate_grad(&[g]);
            opt.step(&mut [ParamRef { name: "x".into(), group: 0, tensor: &mut x }]).unwrap();
            assert!((x.values()[0] - want).abs() < 1e-14);
        }
    }

    fn libm_pow(b: f64, t: i32) -> f64 {
        (0..t).fold(1.0, |acc, _| acc * b)
    }
}
