//! Run configuration and its flat `key=value` text form.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Vae,
    Iwae,
    Rem1,
    Rem2,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Vae, Method::Iwae, Method::Rem1, Method::Rem2];

    pub fn is_rem(self) -> bool {
        matches!(self, Method::Rem1 | Method::Rem2)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Vae => "vae",
            Method::Iwae => "iwae",
            Method::Rem1 => "rem1",
            Method::Rem2 => "rem2",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vae" => Ok(Method::Vae),
            "iwae" => Ok(Method::Iwae),
            "rem1" => Ok(Method::Rem1),
            "rem2" => Ok(Method::Rem2),
            other => Err(Error::Config(format!(
                "unknown method {other:?} (expected vae, iwae, rem1 or rem2)"
            ))),
        }
    }
}

/// Everything that determines a training run. Defaults are the full
/// fixed-MNIST protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub method: Method,
    pub dataset: String,
    pub k: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Train on a seeded subset of this many training points.
    pub subset: Option<usize>,
    /// Subsample of the test split used for the periodic metrics evaluation.
    pub eval_subset: Option<usize>,
    pub eval_k: usize,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub workers: usize,
    pub out: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: Method::Rem1,
            dataset: "mnist-fixed".into(),
            k: 1000,
            latent_dim: 20,
            hidden: 200,
            epochs: 200,
            batch: 20,
            lr: 1e-3,
            epsilon: 1e-6,
            seed: 2019,
            subset: None,
            eval_subset: None,
            eval_k: 1000,
            eval_every: 5,
            checkpoint_every: 10,
            workers: 1,
            out: "runs".into(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_optional(key: &str, value: &str) -> Result<Option<usize>> {
    if value.is_empty() || value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl RunConfig {
    pub const KEYS: [&'static str; 17] = [
        "method",
        "dataset",
        "k",
        "latent-dim",
        "hidden",
        "epochs",
        "batch",
        "lr",
        "epsilon",
        "seed",
        "subset",
        "eval-subset",
        "eval-k",
        "eval-every",
        "checkpoint-every",
        "workers",
        "out",
    ];

    /// Sets one field from its flag-style key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "method" => self.method = value.parse()?,
            "dataset" => self.dataset = value.to_string(),
            "k" => self.k = parse(key, value)?,
            "latent-dim" => self.latent_dim = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "epsilon" => self.epsilon = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "subset" => self.subset = parse_optional(key, value)?,
            "eval-subset" => self.eval_subset = parse_optional(key, value)?,
            "eval-k" => self.eval_k = parse(key, value)?,
            "eval-every" => self.eval_every = parse(key, value)?,
            "checkpoint-every" => self.checkpoint_every = parse(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            "out" => self.out = value.to_string(),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let opt = |v: Option<usize>| v.map(|n| n.to_string()).unwrap_or_else(|| "none".into());
        Some(match key {
            "method" => self.method.to_string(),
            "dataset" => self.dataset.clone(),
            "k" => self.k.to_string(),
            "latent-dim" => self.latent_dim.to_string(),
            "hidden" => self.hidden.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch" => self.batch.to_string(),
            "lr" => format!("{:?}", self.lr),
            "epsilon" => format!("{:?}", self.epsilon),
            "seed" => self.seed.to_string(),
            "subset" => opt(self.subset),
            "eval-subset" => opt(self.eval_subset),
            "eval-k" => self.eval_k.to_string(),
            "eval-every" => self.eval_every.to_string(),
            "checkpoint-every" => self.checkpoint_every.to_string(),
            "workers" => self.workers.to_string(),
            "out" => self.out.clone(),
            _ => return None,
        })
    }

    /// Applies a `key=value` file; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("known key")))
            .collect()
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        Self::KEYS
            .iter()
            .map(|k| (k.to_string(), self.get(k).expect("known key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k", self.k),
            ("latent-dim", self.latent_dim),
            ("batch", self.batch),
            ("eval-k", self.eval_k),
            ("eval-every", self.eval_every),
            ("checkpoint-every", self.checkpoint_every),
            ("workers", self.workers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.method.is_rem() && self.k < 2 {
            return Err(Error::Config("rem1/rem2 need k >= 2 to fit a proposal".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::Config(format!("epsilon must be non-negative, got {}", self.epsilon)));
        }
        if self.dataset.is_empty() {
            return Err(Error::Config("dataset is empty".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.method = Method::Iwae;
        cfg.subset = Some(5000);
        cfg.lr = 3e-4;
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = RunConfig::from_text("# desk run\n\nk = 50  # particles\nmethod=vae\n").unwrap();
        assert_eq!(cfg.k, 50);
        assert_eq!(cfg.method, Method::Vae);
    }

    #[test]
    fn bad_input() {
        assert!(RunConfig::from_text("method=em").is_err());
        assert!(RunConfig::from_text("colour=blue").is_err());
        assert!(RunConfig::from_text("k").is_err());
        let mut cfg = RunConfig::default();
        cfg.k = 0;
        assert!(cfg.validate().is_err());
    }
}
