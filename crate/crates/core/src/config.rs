//! Flat `key = value` run configuration. Every knob has a key, and the
//! resolved form lists all of them so no default stays implicit.

use std::path::Path;

use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{Branch, EvalConfig, Normalization};
use crate::gmm::GmmConfig;
use crate::model::{format_conv_stack, parse_conv_stack, MaskMode, Variant};
use crate::train::TrainConfig;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "CLAWS_CONFIG";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub gmm: GmmConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut train = TrainConfig::default();
        // 0 until resolved against a dataset.
        train.model.classes = 0;
        Self {
            train,
            eval: EvalConfig::default(),
            gmm: GmmConfig::default(),
        }
    }
}

fn int(key: &str, v: &Value) -> Result<u64> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        _ => Err(Error::Config(format!("{key} must be a non-negative integer"))),
    }
}

fn float(key: &str, v: &Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(Error::Config(format!("{key} must be a number"))),
    }
}

fn boolean(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| Error::Config(format!("{key} must be true or false")))
}

fn string<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| Error::Config(format!("{key} must be a string")))
}

impl RunConfig {
    /// Resolved `(key, value)` pairs in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, Value)> {
        let t = &self.train;
        let m = &t.model;
        let a = &t.augment;
        let e = &self.eval;
        let g = &self.gmm;
        let i = |v: u64| Value::Integer(v as i64);
        vec![
            ("seed", i(t.seed)),
            ("epochs", i(t.epochs)),
            ("per_class", i(t.per_class as u64)),
            ("classes", i(m.classes as u64)),
            ("checkpoint_every", i(t.checkpoint_every)),
            ("lr", Value::Float(t.adam.lr)),
            ("beta1", Value::Float(t.adam.beta1)),
            ("beta2", Value::Float(t.adam.beta2)),
            ("adam_eps", Value::Float(t.adam.eps)),
            ("temperature", Value::Float(t.loss.temperature)),
            ("supervised_weight", Value::Float(t.loss.supervised_weight)),
            ("normalize_embeddings", Value::Boolean(t.loss.normalize)),
            ("crop_size", i(a.crop_size as u64)),
            ("full_height", i(a.full_height as u64)),
            ("full_width", i(a.full_width as u64)),
            ("color_strength", Value::Float(a.color_strength)),
            ("flip_horizontal", Value::Float(a.flip_horizontal)),
            ("flip_vertical", Value::Float(a.flip_vertical)),
            ("variant", Value::String(m.variant.name().into())),
            ("mask_mode", Value::String(m.mask_mode.name().into())),
            ("full_encoder", Value::String(format_conv_stack(&m.full_encoder))),
            ("crop_encoder", Value::String(format_conv_stack(&m.crop_encoder))),
            ("hidden_dim", i(m.hidden_dim as u64)),
            ("projection_hidden", i(m.projection_hidden as u64)),
            ("attention_hidden", i(m.attention_hidden as u64)),
            ("classifier_hidden", i(m.classifier_hidden as u64)),
            ("eval_k", i(e.k as u64)),
            ("eval_restarts", i(e.restarts as u64)),
            ("eval_max_iter", i(e.max_iter as u64)),
            ("eval_tol", Value::Float(e.tol)),
            ("eval_branch", Value::String(e.branch.name().into())),
            ("eval_normalization", Value::String(e.normalization.name().into())),
            ("eval_normalize", Value::Boolean(e.normalize)),
            ("gmm_components", i(g.components as u64)),
            ("gmm_tol", Value::Float(g.tol)),
            ("gmm_max_iter", i(g.max_iter as u64)),
            ("gmm_variance_floor", Value::Float(g.variance_floor)),
            ("gmm_restarts", i(g.restarts as u64)),
            ("gmm_normalize", Value::Boolean(g.normalize)),
            ("gmm_standardize", Value::Boolean(g.standardize)),
            ("gmm_dims", i(g.dims as u64)),
            ("gmm_broadness_ratio", Value::Float(g.broadness_ratio)),
        ]
    }

    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        let t = &mut self.train;
        match key {
            "seed" => {
                t.seed = int(key, v)?;
                self.eval.seed = t.seed;
                self.gmm.seed = t.seed;
            }
            "epochs" => t.epochs = int(key, v)?,
            "per_class" => t.per_class = int(key, v)? as usize,
            "classes" => t.model.classes = int(key, v)? as usize,
            "checkpoint_every" => t.checkpoint_every = int(key, v)?,
            "lr" => t.adam.lr = float(key, v)?,
            "beta1" => t.adam.beta1 = float(key, v)?,
            "beta2" => t.adam.beta2 = float(key, v)?,
            "adam_eps" => t.adam.eps = float(key, v)?,
            "temperature" => t.loss.temperature = float(key, v)?,
            "supervised_weight" => t.loss.supervised_weight = float(key, v)?,
            "normalize_embeddings" => t.loss.normalize = boolean(key, v)?,
            "crop_size" => t.augment.crop_size = int(key, v)? as usize,
            "full_height" => t.augment.full_height = int(key, v)? as usize,
            "full_width" => t.augment.full_width = int(key, v)? as usize,
            "color_strength" => t.augment.color_strength = float(key, v)?,
            "flip_horizontal" => t.augment.flip_horizontal = float(key, v)?,
            "flip_vertical" => t.augment.flip_vertical = float(key, v)?,
            "variant" => t.model.variant = Variant::parse(string(key, v)?)?,
            "mask_mode" => t.model.mask_mode = MaskMode::parse(string(key, v)?)?,
            "full_encoder" => t.model.full_encoder = parse_conv_stack(string(key, v)?)?,
            "crop_encoder" => t.model.crop_encoder = parse_conv_stack(string(key, v)?)?,
            "hidden_dim" => t.model.hidden_dim = int(key, v)? as usize,
            "projection_hidden" => t.model.projection_hidden = int(key, v)? as usize,
            "attention_hidden" => t.model.attention_hidden = int(key, v)? as usize,
            "classifier_hidden" => t.model.classifier_hidden = int(key, v)? as usize,
            "eval_k" => self.eval.k = int(key, v)? as usize,
            "eval_restarts" => self.eval.restarts = int(key, v)? as usize,
            "eval_max_iter" => self.eval.max_iter = int(key, v)? as usize,
            "eval_tol" => self.eval.tol = float(key, v)?,
            "eval_branch" => self.eval.branch = Branch::parse(string(key, v)?)?,
            "eval_normalization" => self.eval.normalization = Normalization::parse(string(key, v)?)?,
            "eval_normalize" => self.eval.normalize = boolean(key, v)?,
            "gmm_components" => self.gmm.components = int(key, v)? as usize,
            "gmm_tol" => self.gmm.tol = float(key, v)?,
            "gmm_max_iter" => self.gmm.max_iter = int(key, v)? as usize,
            "gmm_variance_floor" => self.gmm.variance_floor = float(key, v)?,
            "gmm_restarts" => self.gmm.restarts = int(key, v)? as usize,
            "gmm_normalize" => self.gmm.normalize = boolean(key, v)?,
            "gmm_standardize" => self.gmm.standardize = boolean(key, v)?,
            "gmm_dims" => self.gmm.dims = int(key, v)? as usize,
            "gmm_broadness_ratio" => self.gmm.broadness_ratio = float(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        t.sync_geometry();
        Ok(())
    }

    /// Parses a flat table; keys not present keep their defaults.
    pub fn from_kv(text: &str) -> Result<Self> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("config parse error: {}", e.message())))?;
        let mut cfg = Self::default();
        // Seed first so the later per-section values are not overwritten.
        if let Some(v) = table.get("seed") {
            cfg.set("seed", v)?;
        }
        for (k, v) in table.iter().filter(|(k, _)| k.as_str() != "seed") {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv(&text)
    }

    /// Every key with its resolved value, one per line, in [`Self::entries`]
    /// order.
    pub fn to_kv(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// First 16 hex digits of the SHA-256 of [`Self::to_kv`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_kv().as_bytes()))[..16].to_string()
    }

    /// Fills `classes` from the dataset when unset and checks it otherwise.
    pub fn resolve_for(&mut self, dataset: &Dataset) -> Result<()> {
        let found = dataset.num_classes();
        match self.train.model.classes {
            0 => self.train.model.classes = found,
            c if c != found => {
                return Err(Error::Config(format!("config says {c} classes, dataset has {found}")))
            }
            _ => {}
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.gmm.validate()?;
        if self.eval.restarts == 0 || self.eval.max_iter == 0 {
            return Err(Error::Config("eval restarts and max_iter must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_form_roundtrips() {
        let mut cfg = RunConfig::default();
        cfg.train.model.classes = 11;
        cfg.train.adam.lr = 3e-4;
        cfg.eval.normalization = Normalization::Geometric;
        let text = cfg.to_kv();
        let back = RunConfig::from_kv(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_kv(), text);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn all_unspecified_hyperparameters_are_listed() {
        let text = RunConfig::default().to_kv();
        for key in ["temperature", "supervised_weight", "lr", "eval_k", "gmm_components", "eval_restarts"] {
            assert!(text.lines().any(|l| l.starts_with(&format!("{key} = "))), "{key}");
        }
    }

    #[test]
    fn overrides_and_errors() {
        let cfg = RunConfig::from_kv("seed = 9\nlr = 1\nfull_height = 60\nfull_width = 80\nfull_encoder = \"8:3:2\"\n").unwrap();
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.eval.seed, 9);
        assert_eq!(cfg.train.adam.lr, 1.0);
        assert_eq!(cfg.train.model.full_height, 60);
        assert!(matches!(RunConfig::from_kv("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_kv("lr = \"fast\""), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_kv("epochs = -1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_kv("lr = "), Err(Error::Config(_))));
        assert_ne!(RunConfig::from_kv("seed = 1").unwrap().hash(), RunConfig::default().hash());
    }
}
