use std::collections::BTreeMap;

use candle_core::{Device, Tensor};
use serde_json::json;

use super::ParamStore;
use crate::container::Container;
use crate::error::{Error, Result};

/// Adam with bias correction and serializable moment state.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            steps: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter that has a gradient in `grads`; names
    /// are looked up across `stores`, which must not overlap.
    pub fn step(&mut self, stores: &[&ParamStore], grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let var = stores
                .iter()
                .find_map(|ps| ps.get(name))
                .ok_or_else(|| Error::Training(format!("gradient for unknown parameter {name:?}")))?;
            let g = g.detach().to_dtype(var.dtype())?;
            let m = match self.m.get(name) {
                Some(m) => (m.affine(self.beta1, 0.0)? + g.affine(1.0 - self.beta1, 0.0)?)?,
                None => g.affine(1.0 - self.beta1, 0.0)?,
            };
            let v = match self.v.get(name) {
                Some(v) => (v.affine(self.beta2, 0.0)? + g.sqr()?.affine(1.0 - self.beta2, 0.0)?)?,
                None => g.sqr()?.affine(1.0 - self.beta2, 0.0)?,
            };
            let denom = v.affine(1.0 / c2, 0.0)?.sqrt()?.affine(1.0, self.eps)?;
            let update = m.affine(self.lr / c1, 0.0)?.div(&denom)?;
            var.set(&(var.as_tensor() - update)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    pub fn save_into(&self, c: &mut Container) -> Result<()> {
        c.meta["adam"] = json!({
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "steps": self.steps,
        });
        for (k, t) in &self.m {
            c.put_tensor(format!("adam.m/{k}"), t)?;
        }
        for (k, t) in &self.v {
            c.put_tensor(format!("adam.v/{k}"), t)?;
        }
        Ok(())
    }

    pub fn load_from(c: &Container) -> Result<Self> {
        let a = &c.meta["adam"];
        let f = |k: &str| {
            a[k].as_f64()
                .ok_or_else(|| Error::Container(format!("optimizer state lacks {k:?}")))
        };
        let mut adam = Self::new(f("lr")?, f("beta1")?, f("beta2")?, f("eps")?);
        adam.steps = a["steps"]
            .as_u64()
            .ok_or_else(|| Error::Container("optimizer state lacks \"steps\"".into()))?;
        for name in c.names() {
            if let Some(k) = name.strip_prefix("adam.m/") {
                adam.m.insert(k.to_string(), c.tensor(name, &Device::Cpu)?);
            } else if let Some(k) = name.strip_prefix("adam.v/") {
                adam.v.insert(k.to_string(), c.tensor(name, &Device::Cpu)?);
            }
        }
        Ok(adam)
    }
}
