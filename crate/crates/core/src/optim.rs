//! Adaptive-moment optimizer whose state lives in the parameter store.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use xsynth_autograd::{EntryKind, ParamStore, Tensor};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.0025,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(
                "optimizer: need lr > 0, betas in [0,1) and eps > 0".into(),
            ));
        }
        Ok(())
    }

    /// Applies one update with bias correction for update number `t` (from 1).
    ///
    /// Moments are kept in the store under `adam.m.<name>` / `adam.v.<name>`.
    pub fn step(&self, store: &mut ParamStore<f32>, grads: &BTreeMap<String, Tensor<f32>>, t: u64) -> Result<()> {
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t as i32);
        let c2 = 1.0 - b2.powi(t as i32);
        for (name, g) in grads {
            let (mn, vn) = (format!("adam.m.{name}"), format!("adam.v.{name}"));
            if !store.contains(&mn) {
                store.insert(&mn, EntryKind::State, Tensor::zeros(g.shape()))?;
                store.insert(&vn, EntryKind::State, Tensor::zeros(g.shape()))?;
            }
            let m = store.get(&mn).expect("moment").zip_map(g, |m, g| {
                (b1 * m as f64 + (1.0 - b1) * g as f64) as f32
            });
            let v = store.get(&vn).expect("moment").zip_map(g, |v, g| {
                (b2 * v as f64 + (1.0 - b2) * (g as f64) * (g as f64)) as f32
            });
            let p = store.get_mut(name).ok_or_else(|| Error::Data(format!("no parameter `{name}`")))?;
            for ((p, &m), &v) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let mh = m as f64 / c1;
                let vh = v as f64 / c2;
                *p = (*p as f64 - self.lr * mh / (vh.sqrt() + self.eps)) as f32;
            }
            store.set(&mn, m)?;
            store.set(&vn, v)?;
        }
        Ok(())
    }
}
