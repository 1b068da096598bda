//! Adaptive-moment optimizers, gradient clipping, EMA and the lr schedule.

use autodiff::{Element, Tensor, TensorPack};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay (AdamW); 0 gives plain Adam.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub const ADAMW: AdamConfig = AdamConfig {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.01,
    };
    /// Adam with the GAN-style first-moment decay.
    pub const ADAM_GAN: AdamConfig = AdamConfig {
        beta1: 0.5,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Element> {
    pub cfg: AdamConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Element> Adam<T> {
    pub fn new(cfg: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || {
            (0..params.len())
                .map(|i| Tensor::zeros(params.get(i).shape().to_vec()))
                .collect()
        };
        Adam {
            cfg,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. `grads[i]` of `None` means a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let step_size = T::from_f64_lossy(lr / bc1);
        let inv_bc2_sqrt = T::from_f64_lossy(1.0 / bc2.sqrt());
        let eps = T::from_f64_lossy(c.eps);
        let decay = T::one() - T::from_f64_lossy(lr * c.weight_decay);
        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(i);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.as_ref().map_or(T::zero(), |g| g.data()[j]);
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                let denom = v[j].sqrt() * inv_bc2_sqrt + eps;
                *w = *w * decay - step_size * m[j] / denom;
            }
        }
        Ok(())
    }

    pub fn save_into(&self, prefix: &str, pack: &mut TensorPack) -> Result<()> {
        pack.set_meta(&format!("{prefix}.step"), self.step)?;
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            pack.push(&format!("{prefix}.m{i}"), m)?;
            pack.push(&format!("{prefix}.v{i}"), v)?;
        }
        Ok(())
    }

    pub fn load_from(&mut self, prefix: &str, pack: &TensorPack) -> Result<()> {
        self.step = pack.meta_parse(&format!("{prefix}.step"))?;
        for i in 0..self.m.len() {
            let m: Tensor<T> = pack.tensor(&format!("{prefix}.m{i}"))?;
            let v: Tensor<T> = pack.tensor(&format!("{prefix}.v{i}"))?;
            if m.shape() != self.m[i].shape() || v.shape() != self.v[i].shape() {
                return Err(Error::Checkpoint(format!("{prefix}: moment {i} shape mismatch")));
            }
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }
}

/// Scale gradients in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Element>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let k = T::from_f64_lossy(max_norm / (norm + 1e-6));
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * k);
        }
    }
    norm
}

/// Exponential moving average of a parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct Ema<T: Element> {
    pub decay: f64,
    pub shadow: ParamStore<T>,
}

impl<T: Element> Ema<T> {
    pub fn new(decay: f64, params: &ParamStore<T>) -> Self {
        Ema {
            decay,
            shadow: params.clone(),
        }
    }

    /// `shadow <- decay * shadow + (1 - decay) * param`.
    pub fn update(&mut self, params: &ParamStore<T>) {
        let d = T::from_f64_lossy(self.decay);
        let one_d = T::one() - d;
        for i in 0..params.len() {
            let src = params.get(i).data();
            for (s, &p) in self.shadow.get_mut(i).data_mut().iter_mut().zip(src) {
                *s = d * *s + one_d * p;
            }
        }
    }
}

/// Cosine decay from `start` at iteration 0 to `end` at `total`.
pub fn cosine_lr(iter: usize, total: usize, start: f64, end: f64) -> f64 {
    if total == 0 {
        return end;
    }
    let frac = (iter.min(total) as f64) / total as f64;
    end + 0.5 * (start - end) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f32) -> ParamStore<f32> {
        let mut s = ParamStore::default();
        s.add("w".into(), Tensor::full([1], v));
        s
    }

    #[test]
    fn ema_examples() {
        let p = store(2.0);
        let mut e = Ema::new(1.0, &store(0.0));
        e.update(&p);
        assert_eq!(e.shadow.get(0).item(), 0.0);
        e.decay = 0.0;
        e.update(&p);
        assert_eq!(e.shadow.get(0).item(), 2.0);
        let mut e = Ema::new(0.5, &store(0.0));
        e.update(&p);
        assert_eq!(e.shadow.get(0).item(), 1.0);
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 1e-4, 1e-5), 1e-4);
        assert!((cosine_lr(100, 100, 1e-4, 1e-5) - 1e-5).abs() < 1e-20);
        let mid = cosine_lr(50, 100, 1e-4, 1e-5);
        assert!(mid < 1e-4 && mid > 1e-5);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = store(1.0);
        let mut opt = Adam::new(AdamConfig::ADAM_GAN, &p);
        opt.step(&mut p, &[Some(Tensor::full([1], 3.0))], 0.1).unwrap();
        assert!((p.get(0).item() - 0.9).abs() < 1e-6);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Some(Tensor::new([2], vec![3.0f32, 4.0]).unwrap()), None];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        let n: f32 = g[0].as_ref().unwrap().data().iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
    }
}
