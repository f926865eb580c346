//! AdamW with decoupled weight decay.

use super::{Result, TensorError};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
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
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, sizes: &[usize]) -> Result<AdamW> {
        if !(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0 && cfg.beta2 >= 0.0 && cfg.beta2 < 1.0) {
            return Err(TensorError::Contract("AdamW betas must lie in [0, 1)".into()));
        }
        if !(cfg.eps > 0.0 && cfg.weight_decay >= 0.0) {
            return Err(TensorError::Contract(
                "AdamW needs eps > 0 and weight_decay >= 0".into(),
            ));
        }
        Ok(AdamW {
            cfg,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. `lrs[i]` is the learning rate for parameter `i`.
    ///
    /// The decay multiplies the parameter by `1 - lr·wd` before the adaptive
    /// step, independent of the gradient.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Option<Vec<f64>>], lrs: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() || lrs.len() != params.len() {
            return Err(TensorError::Contract(format!(
                "AdamW tracks {} parameters, got {} params / {} grads / {} rates",
                self.m.len(),
                params.len(),
                grads.len(),
                lrs.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            match g {
                None => return Err(TensorError::Contract(format!("missing gradient for parameter {i}"))),
                Some(g) if g.len() != params[i].len() => {
                    return Err(TensorError::Contract(format!("gradient {i} has wrong length")))
                }
                _ => {}
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].as_deref().unwrap_or_default();
            let lr = lrs[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.len() {
                p[k] *= 1.0 - lr * weight_decay;
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(wd: f64) -> AdamWConfig {
        AdamWConfig {
            weight_decay: wd,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut opt = AdamW::new(cfg(0.0), &[2]).unwrap();
        let mut p = vec![1.5, -2.0];
        opt.step(&mut [&mut p], &[Some(vec![0.0, 0.0])], &[0.1]).unwrap();
        assert_eq!(p, vec![1.5, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps)
        let mut opt = AdamW::new(cfg(0.0), &[1]).unwrap();
        let mut p = vec![1.0];
        opt.step(&mut [&mut p], &[Some(vec![1.0])], &[0.1]).unwrap();
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
        assert!((p[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decoupled_decay_only() {
        let mut opt = AdamW::new(cfg(0.01), &[1]).unwrap();
        let mut p = vec![3.0];
        opt.step(&mut [&mut p], &[Some(vec![0.0])], &[0.1]).unwrap();
        assert_eq!(p[0], 3.0 * (1.0 - 0.1 * 0.01));
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut opt = AdamW::new(cfg(0.0), &[1]).unwrap();
        let mut p = vec![1.0];
        assert!(opt.step(&mut [&mut p], &[None], &[0.1]).is_err());
    }
}
