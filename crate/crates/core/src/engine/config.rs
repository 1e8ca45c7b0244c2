//! Flat `key = value` run configuration with a versioned schema.

use crate::disco::{LossWeights, Supervision, DEFAULT_TAU};
use crate::featurize::GridSpec;
use crate::model::ModelConfig;
use crate::scenegen::{Vocabulary, MAX_TOKENS};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{origin}:{line}: {message}")]
    Parse {
        origin: String,
        line: usize,
        message: String,
    },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {message}")]
    Value { key: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: GridSpec,
    pub d: usize,
    pub v: usize,
    pub k: usize,
    pub tau: f64,
    pub weights: LossWeights,
    pub n_e: usize,
    pub n_d: usize,
    pub heads: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub weight_decay: f64,
    pub momentum_lo: f64,
    pub momentum_hi: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub ofs_enabled: bool,
    pub disco_enabled: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Names accepted by [`RunConfig::set`], in file order.
pub const KEYS: &[&str] = &[
    "seed",
    "x_min",
    "x_max",
    "y_min",
    "y_max",
    "z_min",
    "z_max",
    "voxel_x",
    "voxel_y",
    "voxel_z",
    "d",
    "v",
    "k",
    "tau",
    "lambda_hm",
    "lambda_qp",
    "lambda_cls",
    "lambda_reg",
    "n_e",
    "n_d",
    "heads",
    "epochs",
    "batch_size",
    "lr_max",
    "weight_decay",
    "momentum_lo",
    "momentum_hi",
    "beta2",
    "adam_eps",
    "ofs_enabled",
    "disco_enabled",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::Value {
        key: key.into(),
        message: format!("`{value}`: {e}"),
    })
}

impl RunConfig {
    /// Small grid and model that train on one CPU core.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            grid: GridSpec::desk(),
            d: 32,
            v: 64,
            k: 16,
            tau: DEFAULT_TAU,
            weights: LossWeights::default(),
            n_e: 1,
            n_d: 3,
            heads: 4,
            epochs: 40,
            batch_size: 16,
            lr_max: 4e-4,
            weight_decay: 0.01,
            momentum_lo: 0.85,
            momentum_hi: 0.95,
            beta2: 0.999,
            adam_eps: 1e-8,
            ofs_enabled: true,
            disco_enabled: true,
        }
    }

    /// Published full-scale settings; loadable for reference, far too large
    /// to train here.
    pub fn paper() -> Self {
        Self {
            grid: GridSpec {
                x_range: (-54.0, 54.0),
                y_range: (0.0, 54.0),
                z_range: (-5.0, 3.0),
                voxel: [0.075, 0.075, 0.2],
            },
            d: 256,
            v: 500,
            k: 256,
            heads: 8,
            epochs: 20,
            batch_size: 16,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(ConfigError::Value {
                key: "preset".into(),
                message: format!("unknown preset `{other}` (expected desk or paper)"),
            }),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "x_min" => self.grid.x_range.0 = parse(key, v)?,
            "x_max" => self.grid.x_range.1 = parse(key, v)?,
            "y_min" => self.grid.y_range.0 = parse(key, v)?,
            "y_max" => self.grid.y_range.1 = parse(key, v)?,
            "z_min" => self.grid.z_range.0 = parse(key, v)?,
            "z_max" => self.grid.z_range.1 = parse(key, v)?,
            "voxel_x" => self.grid.voxel[0] = parse(key, v)?,
            "voxel_y" => self.grid.voxel[1] = parse(key, v)?,
            "voxel_z" => self.grid.voxel[2] = parse(key, v)?,
            "d" => self.d = parse(key, v)?,
            "v" => self.v = parse(key, v)?,
            "k" => self.k = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "lambda_hm" => self.weights.hm = parse(key, v)?,
            "lambda_qp" => self.weights.qp = parse(key, v)?,
            "lambda_cls" => self.weights.cls = parse(key, v)?,
            "lambda_reg" => self.weights.reg = parse(key, v)?,
            "n_e" => self.n_e = parse(key, v)?,
            "n_d" => self.n_d = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr_max" => self.lr_max = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "momentum_lo" => self.momentum_lo = parse(key, v)?,
            "momentum_hi" => self.momentum_hi = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "ofs_enabled" => self.ofs_enabled = parse(key, v)?,
            "disco_enabled" => self.disco_enabled = parse(key, v)?,
            other => return Err(ConfigError::UnknownKey(other.into())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let g = &self.grid;
        Some(match key {
            "seed" => self.seed.to_string(),
            "x_min" => g.x_range.0.to_string(),
            "x_max" => g.x_range.1.to_string(),
            "y_min" => g.y_range.0.to_string(),
            "y_max" => g.y_range.1.to_string(),
            "z_min" => g.z_range.0.to_string(),
            "z_max" => g.z_range.1.to_string(),
            "voxel_x" => g.voxel[0].to_string(),
            "voxel_y" => g.voxel[1].to_string(),
            "voxel_z" => g.voxel[2].to_string(),
            "d" => self.d.to_string(),
            "v" => self.v.to_string(),
            "k" => self.k.to_string(),
            "tau" => self.tau.to_string(),
            "lambda_hm" => self.weights.hm.to_string(),
            "lambda_qp" => self.weights.qp.to_string(),
            "lambda_cls" => self.weights.cls.to_string(),
            "lambda_reg" => self.weights.reg.to_string(),
            "n_e" => self.n_e.to_string(),
            "n_d" => self.n_d.to_string(),
            "heads" => self.heads.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr_max" => self.lr_max.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "momentum_lo" => self.momentum_lo.to_string(),
            "momentum_hi" => self.momentum_hi.to_string(),
            "beta2" => self.beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "ofs_enabled" => self.ofs_enabled.to_string(),
            "disco_enabled" => self.disco_enabled.to_string(),
            _ => return None,
        })
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<(), ConfigError> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Value {
                key: o.into(),
                message: "expected key=value".into(),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Parses a config document layered over `base`. `#` starts a comment;
    /// a `schema` line, if present, must name this version.
    pub fn parse_text(text: &str, base: RunConfig, origin: &str) -> Result<Self, ConfigError> {
        let mut cfg = base;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |message: String| ConfigError::Parse {
                origin: origin.into(),
                line: i + 1,
                message,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected key = value, got `{line}`")))?;
            let key = key.trim();
            if key == "schema" {
                let version: u32 = value
                    .trim()
                    .parse()
                    .map_err(|_| at(format!("bad schema version `{}`", value.trim())))?;
                if version != SCHEMA_VERSION {
                    return Err(at(format!(
                        "unsupported schema {version} (expected {SCHEMA_VERSION})"
                    )));
                }
                continue;
            }
            cfg.set(key, value).map_err(|e| at(e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path, base: RunConfig) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_text(&text, base, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("schema = {SCHEMA_VERSION}\n");
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            grid: self.grid,
            d: self.d,
            v: self.v,
            k: self.k,
            n_e: self.n_e,
            n_d: self.n_d,
            heads: self.heads,
            ofs: self.ofs_enabled,
            vocab_size: Vocabulary::standard().len(),
            max_tokens: MAX_TOKENS,
        }
    }

    pub fn supervision(&self) -> Supervision {
        Supervision {
            weights: self.weights,
            tau: self.tau,
            disco: self.disco_enabled,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.lr_max > 0.0) || !self.lr_max.is_finite() {
            return bad(format!("lr_max must be positive, got {}", self.lr_max));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        for (name, b) in [
            ("momentum_lo", self.momentum_lo),
            ("momentum_hi", self.momentum_hi),
            ("beta2", self.beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if self.momentum_lo > self.momentum_hi {
            return bad("momentum_lo must not exceed momentum_hi".into());
        }
        if !(self.tau >= 0.0) {
            return bad(format!("tau must be non-negative, got {}", self.tau));
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        self.model_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        for cfg in [RunConfig::desk(), RunConfig::paper()] {
            let back = RunConfig::parse_text(&cfg.to_text(), RunConfig::desk(), "t").unwrap();
            assert_eq!(back, cfg);
        }
        let mut odd = RunConfig::desk();
        odd.lr_max = 0.1 + 0.2;
        odd.ofs_enabled = false;
        let back = RunConfig::parse_text(&odd.to_text(), RunConfig::desk(), "t").unwrap();
        assert_eq!(back, odd);
    }

    #[test]
    fn presets_validate() {
        RunConfig::desk().validate().unwrap();
        RunConfig::paper().validate().unwrap();
        let desk = RunConfig::desk();
        assert_eq!((desk.grid.h(), desk.grid.w(), desk.d, desk.v, desk.k), (64, 64, 32, 64, 16));
        let paper = RunConfig::paper();
        assert_eq!((paper.v, paper.k, paper.n_e, paper.n_d), (500, 256, 1, 3));
        assert_eq!(paper.grid.voxel, [0.075, 0.075, 0.2]);
        assert_eq!(paper.lr_max, 4e-4);
        assert_eq!(paper.weights, LossWeights::default());
    }

    #[test]
    fn errors_carry_context() {
        let err = RunConfig::parse_text("d = 8\nbogus = 1\n", RunConfig::desk(), "cfg.txt").unwrap_err();
        let msg = err.to_string();
        assert!(msg.starts_with("cfg.txt:2:"), "{msg}");
        assert!(msg.contains("bogus"));
        assert!(RunConfig::parse_text("schema = 2\n", RunConfig::desk(), "c").is_err());
        assert!(RunConfig::parse_text("d 8\n", RunConfig::desk(), "c").is_err());
        let mut cfg = RunConfig::desk();
        assert!(matches!(cfg.apply_overrides(&["nope=1"]), Err(ConfigError::UnknownKey(_))));
        assert!(cfg.apply_overrides(&["d=x"]).is_err());
        cfg.apply_overrides(&["d=16", "ofs_enabled=false"]).unwrap();
        assert_eq!((cfg.d, cfg.ofs_enabled), (16, false));
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut cfg = RunConfig::desk();
        cfg.lr_max = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::desk();
        cfg.voxel_set(3.0);
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::desk();
        cfg.k = 65;
        assert!(cfg.validate().is_err());
    }

    impl RunConfig {
        fn voxel_set(&mut self, v: f64) {
            self.grid.voxel[0] = v;
        }
    }
}
