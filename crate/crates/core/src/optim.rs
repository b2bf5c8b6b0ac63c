//! AdamW with decoupled weight decay and global-norm gradient clipping.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::smd_model::{load_tensors, save_tensors};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

pub struct AdamW {
    cfg: AdamWConfig,
    steps: usize,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

const STATE_FILE: &str = "optimizer.safetensors";
const STEPS_KEY: &str = "__steps";

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            steps: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// One update. Parameters without a gradient are left untouched.
    /// Weight decay applies to matrices only, not to biases or norms.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, var) in store.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let m = match self.m.get(name) {
                Some(m) => ((m * c.beta1)? + (&g * (1.0 - c.beta1))?)?,
                None => (&g * (1.0 - c.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?,
                None => (g.sqr()? * (1.0 - c.beta2))?,
            };
            let denom = ((&v / bc2)?.sqrt()? + c.eps)?;
            let update = (&m / bc1)?.div(&denom)?;
            let theta = var.as_tensor().detach();
            let decay = if theta.rank() >= 2 { c.weight_decay } else { 0.0 };
            let new = ((&theta * (1.0 - lr * decay))? - (update * lr)?)?;
            var.set(&new)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut tensors = HashMap::new();
        for (k, m) in &self.m {
            tensors.insert(format!("m.{k}"), m.clone());
        }
        for (k, v) in &self.v {
            tensors.insert(format!("v.{k}"), v.clone());
        }
        tensors.insert(
            STEPS_KEY.to_string(),
            Tensor::new(&[self.steps as u32], &candle_core::Device::Cpu)?,
        );
        save_tensors(&tensors, &dir.join(STATE_FILE))
    }

    pub fn load(cfg: AdamWConfig, dir: &Path) -> Result<Self> {
        let path = dir.join(STATE_FILE);
        let tensors = load_tensors(&path)?;
        let mut out = Self::new(cfg);
        for (k, t) in tensors {
            if k == STEPS_KEY {
                out.steps = t.to_vec1::<u32>()?[0] as usize;
            } else if let Some(name) = k.strip_prefix("m.") {
                out.m.insert(name.to_string(), t);
            } else if let Some(name) = k.strip_prefix("v.") {
                out.v.insert(name.to_string(), t);
            } else {
                return Err(Error::format(&path, format!("unexpected tensor {k}")));
            }
        }
        Ok(out)
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm(store: &ParamStore, grads: &GradStore) -> Result<f64> {
    let mut total = 0f64;
    for var in store.vars().values() {
        if let Some(g) = grads.get(var.as_tensor()) {
            total += g
                .sqr()?
                .sum_all()?
                .to_dtype(candle_core::DType::F64)?
                .to_scalar::<f64>()?;
        }
    }
    Ok(total.sqrt())
}

/// Rescales gradients in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &ParamStore, grads: &mut GradStore, max_norm: f64) -> Result<f64> {
    let norm = grad_norm(store, grads)?;
    if norm > max_norm {
        let scale = max_norm / (norm + 1e-6);
        for var in store.vars().values() {
            let t = var.as_tensor();
            if let Some(g) = grads.get(t) {
                let scaled = (g * scale)?;
                grads.insert(t, scaled);
            }
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;
    use rand::SeedableRng;

    use crate::nn::Init;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new(DType::F64, rand_chacha::ChaCha8Rng::seed_from_u64(0));
        let w = store.get("w", &[3, 2], Init::Normal(1.0)).unwrap();
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        for _ in 0..500 {
            let loss = w.sqr().unwrap().sum_all().unwrap();
            let mut grads = loss.backward().unwrap();
            clip_grad_norm(&store, &mut grads, 1.0).unwrap();
            opt.step(&store, &grads, 0.05).unwrap();
        }
        let final_loss = w.sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(final_loss < 1e-3, "{final_loss}");
        assert_eq!(opt.steps(), 500);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut store = ParamStore::new(DType::F64, rand_chacha::ChaCha8Rng::seed_from_u64(0));
        let w = store.get("w", &[4], Init::Ones).unwrap();
        let mut grads = (w * 10.0).unwrap().sum_all().unwrap().backward().unwrap();
        let before = clip_grad_norm(&store, &mut grads, 1.0).unwrap();
        assert!((before - 20.0).abs() < 1e-9);
        assert!((grad_norm(&store, &grads).unwrap() - 1.0).abs() < 1e-6);
    }
}
