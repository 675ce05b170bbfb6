use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimiser with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimiser tracks {} tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.numel() != m.len() || g.numel() != m.len() {
                return Err(Error::Shape("optimiser state shape drift".into()));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - (beta1 as f64).powi(t);
        let bc2 = 1.0 - (beta2 as f64).powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi as f64 / bc1;
                let vhat = *vi as f64 / bc2;
                *w -= (lr as f64 * mhat / (vhat.sqrt() + eps as f64)) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::from_fn(&[4], |i| i as f32)];
        let before = p.clone();
        let mut opt = Adam::new(AdamConfig::default(), &p);
        for _ in 0..3 {
            opt.step(&mut p, &[Tensor::zeros(&[4])]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_closed_form() {
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let g = Tensor::new(&[3], vec![0.5, -2.0, 1e-3]).unwrap();
        let mut p = vec![Tensor::zeros(&[3])];
        let mut opt = Adam::new(cfg, &p);
        opt.step(&mut p, std::slice::from_ref(&g)).unwrap();
        // bias-corrected moments equal g and g² after one step
        for (w, &gi) in p[0].data().iter().zip(g.data()) {
            let expect = -0.01 * gi as f64 / (gi.abs() as f64 + 1e-8);
            assert!((*w as f64 - expect).abs() < 1e-6, "{w} vs {expect}");
        }
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = vec![Tensor::from_fn(&[5], |i| (i as f32).sin())];
            let mut opt = Adam::new(AdamConfig::default(), &p);
            for k in 0..10 {
                let g = Tensor::from_fn(&[5], |i| ((i + k) as f32 * 0.3).cos());
                opt.step(&mut p, &[g]).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_shape_drift() {
        let mut p = vec![Tensor::zeros(&[2])];
        let mut opt = Adam::new(AdamConfig::default(), &p);
        assert!(opt.step(&mut p, &[Tensor::zeros(&[3])]).is_err());
    }
}
