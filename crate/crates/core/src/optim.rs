//! Adam with linear learning-rate warmup and optional global-norm clipping.

use candle_core::{backprop::GradStore, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};

use crate::{Error, Result};

pub struct WarmupAdam {
    inner: AdamW,
    vars: Vec<Var>,
    base_lr: f64,
    warmup_steps: usize,
    clip_norm: Option<f64>,
    step: usize,
}

impl WarmupAdam {
    pub fn new(vars: Vec<Var>, base_lr: f64, warmup_steps: usize, clip_norm: Option<f64>) -> Result<Self> {
        if base_lr <= 0.0 || !base_lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {base_lr}")));
        }
        let params = ParamsAdamW {
            lr: base_lr,
            weight_decay: 0.0,
            ..ParamsAdamW::default()
        };
        let inner = AdamW::new(vars.clone(), params)?;
        Ok(Self {
            inner,
            vars,
            base_lr,
            warmup_steps,
            clip_norm,
            step: 0,
        })
    }

    /// Learning rate used for optimizer step `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.base_lr
        } else {
            self.base_lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Backpropagates `loss` and applies one update.
    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let mut grads = loss.backward()?;
        if let Some(max_norm) = self.clip_norm {
            self.clip(&mut grads, max_norm)?;
        }
        self.inner.set_learning_rate(self.lr_at(self.step));
        self.inner.step(&grads)?;
        self.step += 1;
        Ok(())
    }

    fn clip(&self, grads: &mut GradStore, max_norm: f64) -> Result<()> {
        let mut total = 0f64;
        for v in &self.vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                total += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            }
        }
        let norm = total.sqrt();
        if norm > max_norm && norm.is_finite() {
            let scale = max_norm / norm;
            for v in &self.vars {
                if let Some(g) = grads.remove(v.as_tensor()) {
                    grads.insert(v.as_tensor(), (g * scale)?);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn warmup_is_linear() {
        let v = Var::zeros(2, DType::F32, &Device::Cpu).unwrap();
        let opt = WarmupAdam::new(vec![v], 1e-2, 4, None).unwrap();
        let lrs: Vec<f64> = (0..6).map(|s| opt.lr_at(s)).collect();
        assert_eq!(lrs, vec![2.5e-3, 5e-3, 7.5e-3, 1e-2, 1e-2, 1e-2]);
    }

    #[test]
    fn minimizes_quadratic() {
        let v = Var::new(&[3f32, -2.0], &Device::Cpu).unwrap();
        let mut opt = WarmupAdam::new(vec![v.clone()], 0.1, 5, Some(1.0)).unwrap();
        for _ in 0..300 {
            let loss = v.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.backward_step(&loss).unwrap();
        }
        let x = v.as_tensor().to_vec1::<f32>().unwrap();
        assert!(x.iter().all(|x| x.abs() < 0.05), "{x:?}");
    }

    #[test]
    fn rejects_bad_lr() {
        assert!(WarmupAdam::new(vec![], 0.0, 0, None).is_err());
    }
}
