use serde::{Deserialize, Serialize};

use crate::{Error, Result, Tensor};

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
        Self { beta1: 0.9, beta2: 0.98, eps: 1e-6, weight_decay: 0.01 }
    }
}

/// AdamW moments for a fixed list of parameters.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<'a>(config: AdamWConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params.into_iter().map(|p| (vec![0.0; p.len()], vec![0.0; p.len()])).unzip();
        Self { config, step: 0, m, v }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`. Parameters whose gradient is `None`
    /// did not take part in the loss and are left untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<Vec<f64>>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::InvalidTrainConfig(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = g else { continue };
            if g.len() != p.len() {
                return Err(Error::InvalidTrainConfig("gradient length differs from parameter".into()));
            }
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + eps);
                *x -= lr * (update + weight_decay * *x);
            }
        }
        Ok(())
    }
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(x: f64) -> Tensor {
        Tensor::new(vec![1], vec![x]).unwrap()
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = scalar(1.5);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, [&p]);
        opt.step(&mut [&mut p], &[Some(vec![0.0])], 0.1).unwrap();
        assert_eq!(p.data(), &[1.5]);
    }

    #[test]
    fn decoupled_decay_scales() {
        let mut p = scalar(2.0);
        let cfg = AdamWConfig { weight_decay: 0.1, ..Default::default() };
        let mut opt = AdamW::new(cfg, [&p]);
        opt.step(&mut [&mut p], &[Some(vec![0.0])], 0.5).unwrap();
        assert!((p.data()[0] - 2.0 * (1.0 - 0.5 * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn single_step_hand_oracle() {
        // m = 0.5·g, v = 0.25·g², m̂ = g, v̂ = g²: step = lr·g/(|g| + eps) + lr·λ·x.
        let (x, g, lr, eps, wd) = (0.3, -0.8, 0.01, 1e-8, 0.2);
        let mut p = scalar(x);
        let cfg = AdamWConfig { beta1: 0.5, beta2: 0.75, eps, weight_decay: wd };
        let mut opt = AdamW::new(cfg, [&p]);
        opt.step(&mut [&mut p], &[Some(vec![g])], lr).unwrap();
        let expected = x - lr * (g / (g.abs() + eps) + wd * x);
        assert!((p.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Some(vec![3.0]), None, Some(vec![4.0])];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].as_ref().unwrap()[0] - 0.6).abs() < 1e-15);
    }
}
