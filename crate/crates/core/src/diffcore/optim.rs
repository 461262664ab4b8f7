use std::collections::BTreeMap;

use super::{Grads, ModelParams};
use crate::scalar::Real;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid AdamW settings {self:?}")))
        }
    }
}

/// AdamW with decoupled weight decay. Moments are keyed by segment name.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    t: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, t: 0, m: BTreeMap::new(), v: BTreeMap::new() })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every trainable segment that has a gradient. Frozen
    /// segments and segments absent from `grads` are left untouched.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &Grads<T>) -> Result<()> {
        self.t += 1;
        let c = self.cfg;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let lr = T::lit(c.lr);
        let decay = T::one() - T::lit(c.lr * c.weight_decay);
        let bc1 = T::one() - T::lit(c.beta1.powi(self.t.min(i32::MAX as u64) as i32));
        let bc2 = T::one() - T::lit(c.beta2.powi(self.t.min(i32::MAX as u64) as i32));
        let eps = T::lit(c.eps);
        for (name, seg) in params.iter_mut() {
            if !seg.trainable {
                continue;
            }
            let Some(g) = grads.param(name) else { continue };
            if g.shape() != seg.tensor.shape() {
                return Err(Error::Shape(format!("gradient for `{name}` has shape {:?}", g.shape())));
            }
            let n = g.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
            for (((p, &gi), mi), vi) in seg.tensor.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *p *= decay;
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *p -= lr * mh / (vh.sqrt() + eps);
            }
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("parameters after optimizer step".into()));
        }
        Ok(())
    }
}
