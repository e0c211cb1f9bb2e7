//! Run configuration: JSON file, dotted overrides, strict key checking.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::dataset::DatasetConfig;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, R1Mode};
use crate::model::ModelConfig;
use crate::optim::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch: usize,
    pub steps: u64,
    /// Passes over the training volumes; overrides `steps` when set.
    pub epochs: Option<u64>,
    pub optimizer: AdamConfig,
    pub checkpoint_every: u64,
    pub preview_every: u64,
    pub r1_mode: R1Mode,
    /// Directions per sample for the finite-difference R1.
    pub r1_directions: usize,
    pub d_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 4,
            steps: 500,
            epochs: None,
            optimizer: AdamConfig::default(),
            checkpoint_every: 50,
            preview_every: 100,
            r1_mode: R1Mode::Auto,
            r1_directions: 8,
            d_steps: 1,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self, train_volumes: usize) -> u64 {
        match self.epochs {
            Some(e) => e * (train_volumes as u64).div_ceil(self.batch as u64),
            None => self.steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Horizontal angles of the multi-view sweep, degrees.
    pub angles: Vec<f64>,
    /// Minimum images per set for FID and KID.
    pub min_set: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            angles: (-3..=3).map(|i| i as f64 * 30.0).collect(),
            min_set: 16,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Config {
    /// The 8-phantom, 32^3 / 32^2 desk setup.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.dataset.phantom.shape = [32; 3];
        c.dataset.phantom.spacing_mm = [2.0; 3];
        c.dataset.det_px = 32;
        c
    }

    /// Two 16^3 phantoms with 16^2 images, for gradient checks in 64 bits.
    pub fn micro() -> Self {
        let mut c = Self::default();
        c.dataset.phantom.shape = [16; 3];
        c.dataset.phantom.spacing_mm = [4.0; 3];
        c.dataset.phantom.bone_bodies = 2;
        c.dataset.det_px = 16;
        c.dataset.train_volumes = 2;
        c.dataset.val_volumes = 1;
        c.dataset.style_volumes = 1;
        c.model = ModelConfig::micro();
        c.train.batch = 2;
        c
    }

    /// Parses a config, listing every unknown key.
    pub fn from_value(v: Value) -> Result<Self> {
        let reference = serde_json::to_value(Self::default()).expect("serializable");
        let mut unknown = Vec::new();
        unknown_keys(&v, &reference, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        let c: Self = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Loads `path` (or the desk defaults) and applies `key=value` overrides.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut v = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(Self::desk()).expect("serializable"),
        };
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        Self::from_value(v)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.optimizer.validate()?;
        let shape = self.dataset.phantom.shape;
        if shape != [self.model.volume_size; 3] {
            return Err(Error::Config(format!(
                "phantom shape {shape:?} does not match model.volume_size {}",
                self.model.volume_size
            )));
        }
        if self.dataset.det_px != self.model.resolution() {
            return Err(Error::Config(format!(
                "detector of {} px does not match the generator's {} px output",
                self.dataset.det_px,
                self.model.resolution()
            )));
        }
        if self.train.batch == 0 || self.train.d_steps == 0 || self.train.r1_directions == 0 {
            return Err(Error::Config("train: batch, d_steps and r1_directions must be positive".into()));
        }
        if self.eval.min_set < 2 {
            return Err(Error::Config("eval.min_set must be at least 2".into()));
        }
        Ok(())
    }

    /// Hash of everything that shapes the optimization trajectory. Run length,
    /// cadences and evaluation settings are excluded so a run can be extended.
    pub fn training_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("serializable");
        v.as_object_mut().expect("object").remove("eval");
        let t = v["train"].as_object_mut().expect("object");
        for k in ["steps", "epochs", "checkpoint_every", "preview_every"] {
            t.remove(k);
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn unknown_keys(v: &Value, reference: &Value, path: &str, out: &mut Vec<String>) {
    if let (Value::Object(m), Value::Object(r)) = (v, reference) {
        for (k, sub) in m {
            let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
            match r.get(k) {
                Some(rs) => unknown_keys(sub, rs, &p, out),
                None => out.push(p),
            }
        }
    }
}

/// Sets `a.b.c=value`, parsing the value as JSON and falling back to a string.
pub fn apply_override(v: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = v;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Config(format!("override `{spec}` has an empty key segment")));
        }
        if !cur.is_object() {
            return Err(Error::Config(format!("override `{spec}`: `{}` is not a section", parts[..i].join("."))));
        }
        let obj = cur.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        Config::desk().validate().unwrap();
        Config::micro().validate().unwrap();
    }

    #[test]
    fn overrides_nest_and_parse() {
        let c = Config::resolve(None, &["train.batch=2".into(), "seed=9".into(), "train.r1_mode=surrogate".into()]).unwrap();
        assert_eq!(c.train.batch, 2);
        assert_eq!(c.seed, 9);
        assert_eq!(c.train.r1_mode, R1Mode::Surrogate);
    }

    #[test]
    fn unknown_keys_are_all_listed() {
        let err = Config::resolve(None, &["train.bacth=2".into(), "modle.x=1".into()]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train.bacth") && msg.contains("modle"), "{msg}");
    }

    #[test]
    fn run_length_does_not_change_the_hash() {
        let a = Config::desk();
        let mut b = a.clone();
        b.train.steps = 2000;
        assert_eq!(a.training_hash(), b.training_hash());
        b.train.batch = 2;
        assert_ne!(a.training_hash(), b.training_hash());
    }

    #[test]
    fn mismatched_resolution_is_a_config_error() {
        let err = Config::resolve(None, &["dataset.det_px=48".into()]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
