//! On-disk layout of a run and the config-hash guards between stages.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use ppt_core::config::ExperimentConfig;
use ppt_core::datagen::{load_dataset, OfflineDataset};
use ppt_core::model::PolicyParams;
use ppt_core::numcore::checkpoint::blob_path;
use ppt_core::numcore::load_checkpoint;
use serde_json::{json, Value};

pub struct Workdir {
    pub root: PathBuf,
    pub hash: String,
    config_json: String,
}

impl Workdir {
    pub fn new(root: PathBuf, cfg: &ExperimentConfig) -> Self {
        Self {
            root,
            hash: cfg.hash(),
            config_json: cfg.to_json_pretty(),
        }
    }

    fn config_path(&self) -> PathBuf {
        self.root.join("config.json")
    }

    fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed-{seed}"))
    }

    pub fn dataset_path(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("dataset.jsonl")
    }

    pub fn ppt_path(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("ppt.json")
    }

    pub fn ps_path(&self, seed: u64, group: usize) -> PathBuf {
        self.seed_dir(seed).join(format!("ps-group{}.json", group + 1))
    }

    pub fn curves_path(&self) -> PathBuf {
        self.root.join("curves.csv")
    }

    pub fn write_config(&self) -> Result<()> {
        fs::create_dir_all(&self.root).with_context(|| format!("creating {}", self.root.display()))?;
        fs::write(self.config_path(), format!("{}\n", self.config_json))
            .with_context(|| format!("writing {}", self.config_path().display()))
    }

    /// The workdir must have been initialized by `gen-data` with the same config.
    pub fn check_config(&self) -> Result<()> {
        let path = self.config_path();
        if !path.exists() {
            bail!(
                "missing prerequisite: {} not found; run `ppt gen-data` with this config and workdir first",
                path.display()
            );
        }
        let stored = ExperimentConfig::load(&path).with_context(|| format!("reading {}", path.display()))?;
        if stored.hash() != self.hash {
            bail!(
                "config hash mismatch: {} was produced by config {} but the current config hashes to {}; rerun `ppt gen-data` or use a fresh workdir",
                self.root.display(),
                stored.hash(),
                self.hash
            );
        }
        Ok(())
    }

    pub fn load_dataset(&self, seed: u64) -> Result<OfflineDataset> {
        let path = self.dataset_path(seed);
        if !path.exists() {
            bail!("missing prerequisite: dataset {} not found; run `ppt gen-data` first", path.display());
        }
        let ds = load_dataset(&path)?;
        if ds.config.config_hash.as_deref() != Some(self.hash.as_str()) {
            bail!(
                "config hash mismatch: dataset {} was generated with config {:?}, current config is {}",
                path.display(),
                ds.config.config_hash,
                self.hash
            );
        }
        Ok(ds)
    }

    pub fn checkpoint_meta(&self, seed: u64, role: &str) -> Value {
        json!({ "config_hash": self.hash, "seed": seed, "role": role })
    }

    fn load_checked(&self, path: &Path, seed: u64, trainer: &str) -> Result<PolicyParams> {
        if !path.exists() || !blob_path(path).exists() {
            bail!(
                "missing prerequisite: checkpoint {} not found; run `ppt {trainer}` first",
                path.display()
            );
        }
        let (params, meta) = load_checkpoint(path)?;
        if meta["config_hash"] != self.hash.as_str() || meta["seed"] != seed {
            bail!(
                "config hash mismatch: checkpoint {} was trained under config {} seed {}; current config is {} seed {seed}",
                path.display(),
                meta["config_hash"],
                meta["seed"],
                self.hash
            );
        }
        Ok(params)
    }

    pub fn require_checkpoints(&self, seed: u64, groups: usize) -> Result<()> {
        if !self.dataset_path(seed).exists() {
            bail!("missing prerequisite: dataset {} not found; run `ppt gen-data` first", self.dataset_path(seed).display());
        }
        let mut wanted = vec![(self.ppt_path(seed), "train-ppt")];
        wanted.extend((0..groups).map(|g| (self.ps_path(seed, g), "train-ps")));
        for (p, trainer) in wanted {
            if !p.exists() || !blob_path(&p).exists() {
                bail!("missing prerequisite: checkpoint {} not found; run `ppt {trainer}` first", p.display());
            }
        }
        Ok(())
    }

    pub fn load_ppt(&self, seed: u64) -> Result<PolicyParams> {
        self.load_checked(&self.ppt_path(seed), seed, "train-ppt")
    }

    pub fn load_ps(&self, seed: u64, groups: usize) -> Result<Vec<PolicyParams>> {
        (0..groups).map(|g| self.load_checked(&self.ps_path(seed, g), seed, "train-ps")).collect()
    }

    /// Writes `seed-{seed}/{stage}.log.json`, stamped with the config hash.
    pub fn write_log(&self, seed: u64, stage: &str, body: &Value) -> Result<()> {
        let mut doc = json!({ "config_hash": self.hash, "seed": seed, "stage": stage });
        if let (Some(dst), Some(src)) = (doc.as_object_mut(), body.as_object()) {
            for (k, v) in src {
                dst.insert(k.clone(), v.clone());
            }
        }
        let dir = self.seed_dir(seed);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(format!("{stage}.log.json"));
        fs::write(&path, serde_json::to_string_pretty(&doc)?).with_context(|| format!("writing {}", path.display()))
    }
}
