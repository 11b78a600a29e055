use std::collections::BTreeMap;

use candle_core::{Tensor, Var};

use crate::{Error, Result};

/// Adam with bias correction. Moments are keyed by parameter name so the
/// state can be written to and read from checkpoints.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` pairs each parameter with its gradient;
    /// parameters without a gradient keep their moments and values.
    pub fn update(&mut self, params: &BTreeMap<String, Var>, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, var) in params {
            let Some(g) = grads.get(name) else { continue };
            let m = match self.first.get(name) {
                Some(m) => ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?,
                None => (g * (1.0 - self.beta1))?,
            };
            let v = match self.second.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            if lr != 0.0 {
                let denom = ((&v / c2)?.sqrt()? + self.eps)?;
                let delta = ((&m / c1)? / denom)?;
                var.set(&(var.as_tensor() - (delta * lr)?)?)?;
            }
            self.first.insert(name.clone(), m);
            self.second.insert(name.clone(), v);
        }
        Ok(())
    }

    /// Moments as `{name}.m` / `{name}.v` tensors.
    pub fn state(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (n, t) in &self.first {
            out.insert(format!("{n}.m"), t.clone());
        }
        for (n, t) in &self.second {
            out.insert(format!("{n}.v"), t.clone());
        }
        out
    }

    pub fn load_state(&mut self, step: u64, state: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step = step;
        self.first.clear();
        self.second.clear();
        for (key, t) in state {
            if let Some(n) = key.strip_suffix(".m") {
                self.first.insert(n.to_string(), t.clone());
            } else if let Some(n) = key.strip_suffix(".v") {
                self.second.insert(n.to_string(), t.clone());
            } else {
                return Err(Error::Checkpoint(format!("unexpected optimizer tensor `{key}`")));
            }
        }
        Ok(())
    }
}

/// Scales every gradient by `max_norm / norm` when the global L2 norm
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: Option<f64>) -> Result<f64> {
    let mut sq = 0.0;
    for g in grads.values() {
        sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    }
    let norm = sq.sqrt();
    if let Some(max) = max_norm {
        if norm.is_finite() && norm > max {
            let s = max / norm;
            for g in grads.values_mut() {
                *g = (&*g * s)?;
            }
        }
    }
    Ok(norm)
}
