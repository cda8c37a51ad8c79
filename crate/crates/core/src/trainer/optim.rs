use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Completed update steps.
    pub t: u64,
    lr: f64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            lr: 0.0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Start an update step at learning rate `lr`.
    pub fn begin_step(&mut self, lr: f64) {
        self.t += 1;
        self.lr = lr;
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) {
        assert!(self.t > 0, "begin_step must precede update");
        assert_eq!(param.shape(), grad.shape(), "gradient shape for {name}");
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (((p, g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let step = (*m / c1) / ((*v / c2).sqrt() + self.eps);
            *p = *p * decay - self.lr * step;
        }
    }

    /// Moments and step count as named tensors under `prefix`.
    pub fn state(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        out.insert(format!("{prefix}.t"), Tensor::scalar(self.t as f64));
        for (name, t) in &self.m {
            out.insert(format!("{prefix}.m.{name}"), t.clone());
        }
        for (name, t) in &self.v {
            out.insert(format!("{prefix}.v.{name}"), t.clone());
        }
        out
    }

    pub fn load_state(&mut self, prefix: &str, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let t = tensors
            .get(&format!("{prefix}.t"))
            .ok_or_else(|| Error::Checkpoint(format!("missing optimiser state {prefix}.t")))?;
        self.t = t.item() as u64;
        self.m.clear();
        self.v.clear();
        let (pm, pv) = (format!("{prefix}.m."), format!("{prefix}.v."));
        for (name, t) in tensors {
            if let Some(n) = name.strip_prefix(&pm) {
                self.m.insert(n.to_string(), t.clone());
            } else if let Some(n) = name.strip_prefix(&pv) {
                self.v.insert(n.to_string(), t.clone());
            }
        }
        Ok(())
    }
}
