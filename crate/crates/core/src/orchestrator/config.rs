//! Training configuration and its `key = value` text form.
//!
//! ```text
//! # comments start with '#'
//! dim = 64
//! num_clusters = 256
//! negatives = both
//! ```
//!
//! Every field of [`TrainConfig`] is a valid key. Unknown keys, unparsable
//! values and out-of-range settings are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::diffusion::{DEFAULT_BETA_END, DEFAULT_BETA_START};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::objectives::{LossWeights, NegativeViews};

/// How the diffusion loss covers timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionLossMode {
    /// One uniformly drawn step per sequence and batch.
    #[default]
    Sampled,
    /// Sum over every step `1..=T`.
    FullSum,
}

/// Guidance source when an anchor is alone in its cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SingletonGuidance {
    /// Use the anchor's own representation.
    #[default]
    SelfRepr,
    /// Use the cluster prototype.
    Prototype,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub dim: usize,
    /// Longest input window `n`.
    pub max_len: usize,
    /// Shortest training subsequence `m`.
    pub min_len: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub temperature: f64,
    pub dropout: f64,
    pub num_clusters: usize,
    pub kmeans_iters: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub omega: f64,
    pub uncond_prob: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Start view sampling from pure noise rather than from the noised input.
    pub view_from_noise: bool,
    pub negatives: NegativeViews,
    pub diffusion_loss: DiffusionLossMode,
    pub singleton_guidance: SingletonGuidance,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            max_len: 50,
            min_len: 4,
            num_layers: 2,
            num_heads: 2,
            batch_size: 256,
            lr: 1e-3,
            temperature: 1.0,
            dropout: 0.3,
            num_clusters: 256,
            kmeans_iters: crate::intent::DEFAULT_MAX_ITERS,
            diffusion_steps: 50,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            omega: 2.0,
            uncond_prob: 0.1,
            lambda: 1.0,
            gamma: 0.2,
            epochs: 50,
            patience: 10,
            seed: 42,
            view_from_noise: true,
            negatives: NegativeViews::Both,
            diffusion_loss: DiffusionLossMode::Sampled,
            singleton_guidance: SingletonGuidance::SelfRepr,
            eval_batch: 256,
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check(self.dim > 0 && self.num_heads > 0 && self.dim.is_multiple_of(self.num_heads), || {
            format!("dim {} must be a positive multiple of num_heads {}", self.dim, self.num_heads)
        })?;
        check(self.min_len >= 2 && self.max_len >= self.min_len, || {
            format!("need 2 <= min_len ({}) <= max_len ({})", self.min_len, self.max_len)
        })?;
        check(self.batch_size > 0 && self.eval_batch > 0, || "batch sizes must be positive".into())?;
        check(self.lr > 0.0 && self.lr.is_finite(), || format!("lr {} must be positive", self.lr))?;
        check(self.temperature > 0.0, || format!("temperature {} must be positive", self.temperature))?;
        check((0.0..1.0).contains(&self.dropout), || format!("dropout {} outside [0, 1)", self.dropout))?;
        check(self.num_clusters > 0, || "num_clusters must be positive".into())?;
        check(self.diffusion_steps > 0, || "diffusion_steps must be positive".into())?;
        check(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0, || {
            format!("need 0 < beta_start ({}) <= beta_end ({}) < 1", self.beta_start, self.beta_end)
        })?;
        check((0.0..=1.0).contains(&self.uncond_prob), || format!("uncond_prob {} outside [0, 1]", self.uncond_prob))?;
        check(self.lambda >= 0.0 && self.gamma >= 0.0, || "loss weights must be non-negative".into())?;
        check(self.omega.is_finite(), || "omega must be finite".into())?;
        check(self.epochs > 0, || "epochs must be positive".into())?;
        Ok(())
    }

    pub fn encoder(&self, num_items: usize) -> EncoderConfig {
        EncoderConfig {
            num_items,
            max_len: self.max_len,
            dim: self.dim,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            dropout: self.dropout,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            gamma: self.gamma,
            lambda: self.lambda,
        }
    }

    /// Whether the intent index and diffusion are needed at all.
    pub fn uses_augmentation(&self) -> bool {
        self.gamma > 0.0 || self.lambda > 0.0
    }

    /// Overrides one field from its text form.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut map = match serde_json::to_value(&*self)? {
            Value::Object(m) => m,
            _ => unreachable!("config serializes to an object"),
        };
        let slot = map.get_mut(key).ok_or_else(|| Error::Config(format!("unknown key '{key}'")))?;
        let raw = raw.trim();
        let bad = || Error::Config(format!("{key}: cannot parse '{raw}'"));
        *slot = match slot {
            Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
            Value::Number(n) if n.is_f64() => serde_json::json!(raw.parse::<f64>().map_err(|_| bad())?),
            Value::Number(_) => serde_json::json!(raw.parse::<u64>().map_err(|_| bad())?),
            _ => Value::String(raw.to_string()),
        };
        *self = serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    /// Applies `key = value` lines on top of the defaults and validates.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (k, v) = line.split_once('=').ok_or_else(|| parse_err("expected 'key = value'".into()))?;
            cfg.set(k.trim(), v).map_err(|e| parse_err(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// The `key = value` text that [`TrainConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let Ok(Value::Object(map)) = serde_json::to_value(self) else {
            unreachable!("config serializes to an object")
        };
        map.iter()
            .map(|(k, v)| match v {
                Value::String(s) => format!("{k} = {s}\n"),
                other => format!("{k} = {other}\n"),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!((c.dim, c.max_len, c.min_len, c.batch_size), (64, 50, 4, 256));
        assert_eq!((c.omega, c.lambda, c.gamma, c.uncond_prob), (2.0, 1.0, 0.2, 0.1));
    }

    #[test]
    fn parse_and_round_trip() {
        let text = "# desk run\ndim = 16\nnum_heads=4\nomega = -1\nnegatives = opposite\nview_from_noise = false\n";
        let c = TrainConfig::parse(text, Path::new("c.cfg")).unwrap();
        assert_eq!(c.dim, 16);
        assert_eq!(c.omega, -1.0);
        assert_eq!(c.negatives, NegativeViews::Opposite);
        assert!(!c.view_from_noise);
        assert_eq!(TrainConfig::parse(&c.to_text(), Path::new("x")).unwrap(), c);
    }

    #[test]
    fn rejects_bad_input() {
        let p = Path::new("c.cfg");
        let err = TrainConfig::parse("dim = 16\nbogus = 1\n", p).unwrap_err();
        assert!(err.to_string().contains("c.cfg:2"), "{err}");
        assert!(TrainConfig::parse("dim = sixteen", p).is_err());
        assert!(TrainConfig::parse("dim = 10\nnum_heads = 3", p).is_err());
        assert!(TrainConfig::parse("dropout = 1.0", p).is_err());
        assert!(TrainConfig::parse("negatives = some", p).is_err());
        assert!(TrainConfig::parse("min_len = 1", p).is_err());
    }
}
