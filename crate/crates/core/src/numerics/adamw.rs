use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(Error::config("AdamW betas must lie in (0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("AdamW eps must be > 0 and weight_decay >= 0"));
        }
        Ok(())
    }
}

/// AdamW optimizer state: per-parameter first/second moments keyed by
/// parameter name.
#[derive(Clone, Debug)]
pub struct AdamWState {
    pub config: AdamWConfig,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig) -> Self {
        AdamWState {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected AdamW update with decoupled weight decay:
    /// `w ← w − lr·wd·w − lr·m̂/(√v̂ + eps)`.
    ///
    /// Every entry of `grads` must name a parameter in `params` with the
    /// same shape. Parameters without a gradient entry are left alone.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::contract(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::dim("adamw_step", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let n = p.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * weight_decay * *w;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(name.to_string(), Tensor::scalar(v))])
    }

    #[test]
    fn zero_grad_without_decay_is_noop() {
        let mut st = AdamWState::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        let mut p = one("w", 1.25);
        st.step(&mut p, &one("w", 0.0), 0.1).unwrap();
        assert_eq!(p["w"].data(), &[1.25]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn zero_grad_decoupled_decay() {
        let mut st = AdamWState::new(AdamWConfig::default());
        let mut p = one("w", 1.0);
        st.step(&mut p, &one("w", 0.0), 0.1).unwrap();
        assert!((p["w"].data()[0] - 0.995).abs() < 1e-15);
    }

    #[test]
    fn quadratic_descends() {
        // f(w) = w^2/2, grad = w
        let mut st = AdamWState::new(AdamWConfig::default());
        let mut p = one("w", 1.0);
        st.step(&mut p, &one("w", 1.0), 0.1).unwrap();
        assert!(p["w"].data()[0] < 1.0);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut st = AdamWState::new(AdamWConfig::default());
        let mut p = BTreeMap::from([("w".to_string(), Tensor::zeros(&[2, 2]))]);
        let g = BTreeMap::from([("w".to_string(), Tensor::zeros(&[4]))]);
        assert!(matches!(
            st.step(&mut p, &g, 0.1),
            Err(Error::Dimension { .. })
        ));
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn bit_deterministic() {
        let run = || {
            let mut st = AdamWState::new(AdamWConfig::default());
            let mut p = BTreeMap::from([("w".to_string(), Tensor::row(vec![0.3, -0.7, 1.1]))]);
            for k in 0..5 {
                let g = BTreeMap::from([(
                    "w".to_string(),
                    Tensor::row(vec![0.1 * k as f64, -0.2, 0.05]),
                )]);
                st.step(&mut p, &g, 1e-2).unwrap();
            }
            p["w"]
                .data()
                .iter()
                .map(|x| x.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
