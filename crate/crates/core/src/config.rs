//! Run configuration, readable from and printable to `key = value` text.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which triples count as "associated with" a query's anchor entity when
/// collecting candidate relations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Incidence {
    /// The anchor as head or tail.
    Both,
    /// Only the anchor's role in the query: head for `(h, r, ?)`, tail for
    /// `(?, r, t)`.
    QueryRole,
}

impl FromStr for Incidence {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Incidence::Both),
            "query-role" | "head-only" => Ok(Incidence::QueryRole),
            _ => Err(Error::Config(format!("unknown incidence mode {s:?}"))),
        }
    }
}

impl fmt::Display for Incidence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Incidence::Both => "both",
            Incidence::QueryRole => "query-role",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dim: usize,
    pub margin: f32,
    /// Norm of the translational distance, 1 or 2.
    pub norm: u8,
    /// Weight of the relation-alignment term.
    pub alpha: f32,
    /// Weight of the neighborhood reconstruction term.
    pub eta: f32,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub negatives_per_positive: usize,
    pub max_epochs: usize,
    /// Validation checks without improvement before stopping.
    pub patience: usize,
    pub eval_every: usize,
    pub seed: u64,
    /// Similarity threshold for replacing a new entity vector by a pointer.
    pub theta: f32,
    pub top_k: usize,
    pub keep_dropped: bool,
    /// Ablation: one fine-tuned space, no similarity drops, no weighting.
    pub no_decoupling: bool,
    /// Ablation: equal weight for every snapshot space.
    pub uniform_importance: bool,
    /// Renormalize weights over the snapshots where a candidate exists.
    pub renormalize: bool,
    pub incidence: Incidence,
    /// Evaluation threads; 0 means all cores.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 200,
            margin: 8.0,
            norm: 1,
            alpha: 0.1,
            eta: 0.1,
            learning_rate: 1e-3,
            batch_size: 1024,
            negatives_per_positive: 1,
            max_epochs: 200,
            patience: 3,
            eval_every: 10,
            seed: 1,
            theta: 0.95,
            top_k: 3,
            keep_dropped: false,
            no_decoupling: false,
            uniform_importance: false,
            renormalize: true,
            incidence: Incidence::Both,
            workers: 0,
        }
    }
}

macro_rules! config_fields {
    ($m:ident) => {
        $m!(
            dim,
            margin,
            norm,
            alpha,
            eta,
            learning_rate,
            batch_size,
            negatives_per_positive,
            max_epochs,
            patience,
            eval_every,
            seed,
            theta,
            top_k,
            keep_dropped,
            no_decoupling,
            uniform_importance,
            renormalize,
            incidence,
            workers
        )
    };
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_owned()));
        if self.dim == 0 {
            return fail("dim must be positive");
        }
        if !(self.margin > 0.0) {
            return fail("margin must be positive");
        }
        if self.norm != 1 && self.norm != 2 {
            return fail("norm must be 1 or 2");
        }
        if !(self.alpha >= 0.0) || !(self.eta >= 0.0) {
            return fail("alpha and eta must be non-negative");
        }
        if !(self.learning_rate > 0.0) {
            return fail("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.negatives_per_positive == 0 || self.eval_every == 0 {
            return fail("batch_size, negatives_per_positive and eval_every must be positive");
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return fail("theta must lie in (0, 1]");
        }
        if self.top_k == 0 {
            return fail("top_k must be at least 1");
        }
        Ok(())
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
        }
        macro_rules! assign {
            ($($f:ident),*) => {
                match key {
                    $(stringify!($f) => { self.$f = parse(key, value)?; })*
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
            };
        }
        config_fields!(assign);
        Ok(())
    }

    /// Parses `key = value` lines on top of the defaults. `#` starts a
    /// comment line.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        macro_rules! emit {
            ($($f:ident),*) => {
                $( out.push_str(&format!("{} = {}\n", stringify!($f), self.$f)); )*
            };
        }
        config_fields!(emit);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_roundtrip() {
        let mut cfg = TrainConfig::default();
        cfg.alpha = 0.01;
        cfg.incidence = Incidence::QueryRole;
        cfg.learning_rate = 5e-4;
        let back = TrainConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(TrainConfig::from_kv("norm = 3").is_err());
        assert!(TrainConfig::from_kv("margin = 0").is_err());
        assert!(TrainConfig::from_kv("alpha = -1").is_err());
        assert!(TrainConfig::from_kv("top_k = 0").is_err());
        assert!(TrainConfig::from_kv("nonsense = 1").is_err());
        assert!(TrainConfig::from_kv("dim 3").is_err());
    }

    #[test]
    fn comments_and_partial_files() {
        let cfg = TrainConfig::from_kv("# tuned\ndim = 16\n\nseed=9\n").unwrap();
        assert_eq!(cfg.dim, 16);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.margin, TrainConfig::default().margin);
    }
}
