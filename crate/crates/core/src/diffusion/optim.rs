use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{ParameterStore, Tensor};

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    t: u64,
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self::new(1e-4, (0.9, 0.95), 0.01)
    }
}

impl AdamW {
    pub fn new(lr: f64, betas: (f64, f64), weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            clip_norm: None,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update to every named parameter. Returns the global
    /// gradient norm measured before clipping.
    pub fn step(&mut self, store: &mut ParameterStore, grads: &[(String, Vec<f64>)]) -> Result<f64> {
        let norm = grads
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm is {norm}")));
        }
        let clip = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::Contract(format!("optimizer got unknown parameter {name:?}")))?;
            if p.numel() != g.len() {
                return Err(Error::Contract(format!("gradient of {name:?} has the wrong length")));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g * clip;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + self.eps) + self.weight_decay * *p;
                *p -= self.lr * update;
            }
        }
        Ok(norm)
    }

    /// Adds moment buffers as `opt.m.<name>`, `opt.v.<name>` and the step
    /// count as `opt.t`.
    pub fn export_state(&self, out: &mut ParameterStore) -> Result<()> {
        out.insert("opt.t", Tensor::scalar(self.t as f64))?;
        for (name, m) in &self.m {
            out.insert(format!("opt.m.{name}"), Tensor::new([m.len()], m.clone())?)?;
        }
        for (name, v) in &self.v {
            out.insert(format!("opt.v.{name}"), Tensor::new([v.len()], v.clone())?)?;
        }
        Ok(())
    }

    /// Restores what [`export_state`](Self::export_state) wrote; other
    /// entries are ignored.
    pub fn import_state(&mut self, from: &ParameterStore) -> Result<()> {
        self.t = from.get("opt.t").map_or(Ok(0.0), Tensor::item)? as u64;
        self.m.clear();
        self.v.clear();
        for (name, t) in from.iter() {
            if let Some(p) = name.strip_prefix("opt.m.") {
                self.m.insert(p.to_string(), t.data().to_vec());
            } else if let Some(p) = name.strip_prefix("opt.v.") {
                self.v.insert(p.to_string(), t.data().to_vec());
            }
        }
        Ok(())
    }
}
