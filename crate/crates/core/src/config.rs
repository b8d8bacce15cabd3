//! Experiment configuration: one JSON document holding every knob of a run.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dpo::DpoConfig;
use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_c: usize,
    /// Fraction of the contexts annotated by each group.
    pub coverage: Vec<f64>,
    /// History length.
    #[serde(rename = "T")]
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoupsConfig {
    /// Ensemble size.
    #[serde(rename = "M")]
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workdir: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every random stream derives from it.
    pub seed: u64,
    pub env: EnvSpec,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub dpo: DpoConfig,
    pub soups: SoupsConfig,
    pub eval: EvalConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

pub const PRESETS: &[&str] = &["paper-500", "paper-1000", "ci"];

impl ExperimentConfig {
    fn paper(n_c: usize) -> Self {
        Self {
            seed: 0,
            env: EnvSpec::default(),
            data: DataConfig {
                n_c,
                coverage: vec![1.0, 0.8, 0.6],
                horizon: 15,
            },
            model: ModelConfig::default(),
            dpo: DpoConfig::default(),
            soups: SoupsConfig { size: 100 },
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper-500" => Ok(Self::paper(500)),
            "paper-1000" => Ok(Self::paper(1000)),
            "ci" => {
                let mut c = Self::paper(100);
                c.model.layers = 2;
                c.model.hidden = 64;
                c.dpo.epochs = 10;
                c.eval.seeds = vec![1];
                Ok(c)
            }
            other => Err(Error::config(
                "preset",
                format!("unknown preset `{other}`; expected one of {PRESETS:?}"),
            )),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.model.validate()?;
        self.dpo.validate()?;
        let k = self.env.num_groups;
        if self.model.num_actions != self.env.num_actions {
            return Err(Error::config("model.num_actions", "must equal env.num_actions"));
        }
        if self.model.context_dim != self.env.context_dim {
            return Err(Error::config("model.context_dim", "must equal env.context_dim"));
        }
        if self.data.n_c == 0 {
            return Err(Error::config("data.n_c", "must be at least 1"));
        }
        if self.data.coverage.len() != k {
            return Err(Error::config("data.coverage", format!("must have num_groups = {k} entries")));
        }
        if let Some(c) = self.data.coverage.iter().find(|c| !(c.is_finite() && **c > 0.0 && **c <= 1.0)) {
            return Err(Error::config("data.coverage", format!("entries must lie in (0, 1], got {c}")));
        }
        if self.data.horizon == 0 {
            return Err(Error::config("data.T", "must be at least 1"));
        }
        if self.data.horizon > self.model.max_positions {
            return Err(Error::config("data.T", "must not exceed model.max_positions"));
        }
        if self.eval.turns == 0 {
            return Err(Error::config("eval.turns", "must be at least 1"));
        }
        // The last turn queries with `turns − 1` completed triples before it.
        if self.eval.turns > self.model.max_positions {
            return Err(Error::config("eval.turns", "must not exceed model.max_positions"));
        }
        if self.eval.test_contexts == 0 {
            return Err(Error::config("eval.L", "must be at least 1"));
        }
        if self.eval.test_contexts + self.eval.turns > self.data.n_c {
            return Err(Error::config("eval.L", "plus eval.turns must not exceed data.n_c"));
        }
        if self.eval.seeds.is_empty() {
            return Err(Error::config("eval.seeds", "must list at least one seed"));
        }
        let mut seeds = self.eval.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.eval.seeds.len() {
            return Err(Error::config("eval.seeds", "must not repeat"));
        }
        if self.soups.size < k {
            return Err(Error::config("soups.M", format!("must be at least num_groups = {k}")));
        }
        Ok(())
    }

    /// SHA-256 of the canonical compact JSON, with output paths excluded.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.paths = PathsConfig::default();
        let text = serde_json::to_string(&canonical).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in PRESETS {
            ExperimentConfig::preset(p).unwrap().validate().unwrap();
        }
        assert!(ExperimentConfig::preset("nope").is_err());
    }

    #[test]
    fn json_round_trip_and_hash() {
        let c = ExperimentConfig::preset("paper-500").unwrap();
        let back = ExperimentConfig::from_json(&c.to_json_pretty()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
        let mut d = c.clone();
        d.paths.workdir = Some("/tmp/x".into());
        assert_eq!(d.hash(), c.hash());
        d.data.n_c = 1000;
        assert_ne!(d.hash(), c.hash());
    }

    #[test]
    fn unknown_key_rejected() {
        let mut v: serde_json::Value = serde_json::to_value(ExperimentConfig::preset("ci").unwrap()).unwrap();
        v["data"]["extra"] = 1.into();
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn errors_name_the_key() {
        let mut c = ExperimentConfig::preset("ci").unwrap();
        c.data.coverage[1] = 1.5;
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("data.coverage"), "{msg}");
        let mut c = ExperimentConfig::preset("ci").unwrap();
        c.model.hidden = 63;
        assert!(c.validate().unwrap_err().to_string().contains("model.hidden"));
    }
}
