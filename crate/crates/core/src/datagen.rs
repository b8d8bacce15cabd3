//! Offline, group-stratified preference data.
//!
//! Each group annotates a prefix of one shared random permutation of the
//! contexts, so the annotated sets are nested. Candidate pairs come from the
//! uniform reference policy, conditioned on the two actions being distinct.
//! A group's triples are then cut into fixed-length training histories.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{sample_context, sample_preference, ActionId, Context, EnvSpec, UserProfile};
use crate::error::{Error, Result};
use crate::numcore::Rng;

/// One annotated comparison: `winner` was preferred over `loser` at `x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceTriple {
    pub x: Context,
    #[serde(rename = "w")]
    pub winner: ActionId,
    #[serde(rename = "l")]
    pub loser: ActionId,
}

impl PreferenceTriple {
    pub fn new(x: Context, winner: ActionId, loser: ActionId) -> Result<Self> {
        if winner == loser {
            return Err(Error::invalid("winner and loser must differ"));
        }
        Ok(Self { x, winner, loser })
    }
}

/// An ordered run of triples from a single group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistorySequence {
    pub group: usize,
    pub triples: Vec<PreferenceTriple>,
}

impl HistorySequence {
    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }
}

/// How a dataset was produced; written as the first line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    pub n_c: usize,
    pub coverage: Vec<f64>,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    /// Every generated context, in generation order.
    #[serde(default)]
    pub contexts: Vec<Context>,
}

/// A group's full-length histories plus the triples left over after cutting.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroupData {
    pub sequences: Vec<HistorySequence>,
    pub remainder: Vec<PreferenceTriple>,
}

impl GroupData {
    pub fn num_triples(&self) -> usize {
        self.sequences.iter().map(HistorySequence::len).sum::<usize>() + self.remainder.len()
    }

    pub fn triples(&self) -> impl Iterator<Item = &PreferenceTriple> {
        self.sequences.iter().flat_map(|s| s.triples.iter()).chain(self.remainder.iter())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub config: GenerationConfig,
    pub groups: Vec<GroupData>,
}

impl OfflineDataset {
    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    pub fn contexts(&self) -> &[Context] {
        &self.config.contexts
    }

    pub fn triple_counts(&self) -> Vec<usize> {
        self.groups.iter().map(GroupData::num_triples).collect()
    }

    pub fn sequence_counts(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.sequences.len()).collect()
    }
}

/// Number of contexts a group with the given coverage annotates.
pub fn coverage_count(coverage: f64, n_c: usize) -> usize {
    // The small slack keeps e.g. 0.6·500 from flooring to 299.
    ((coverage * n_c as f64) + 1e-9).floor() as usize
}

/// Two distinct actions from the uniform reference policy.
pub fn sample_distinct_pair(rng: &mut Rng, num_actions: usize) -> (ActionId, ActionId) {
    let uniform = vec![1.0 / num_actions as f64; num_actions];
    loop {
        let a = rng.categorical(&uniform).expect("uniform distribution is valid");
        let b = rng.categorical(&uniform).expect("uniform distribution is valid");
        if a != b {
            return (ActionId(a), ActionId(b));
        }
    }
}

fn partition(group: usize, mut pool: Vec<PreferenceTriple>, horizon: usize, rng: &mut Rng) -> GroupData {
    rng.shuffle(&mut pool);
    let full = pool.len() / horizon;
    let remainder = pool.split_off(full * horizon);
    let mut sequences = Vec::with_capacity(full);
    let mut it = pool.into_iter();
    for _ in 0..full {
        sequences.push(HistorySequence {
            group,
            triples: it.by_ref().take(horizon).collect(),
        });
    }
    GroupData { sequences, remainder }
}

/// Samples contexts, annotates them per group and cuts the histories.
pub fn generate_offline(rng: &Rng, spec: &EnvSpec, n_c: usize, coverage: &[f64], horizon: usize) -> Result<OfflineDataset> {
    if horizon == 0 {
        return Err(Error::invalid("history length T must be at least 1"));
    }
    if n_c < horizon {
        return Err(Error::invalid(format!(
            "N_c = {n_c} is smaller than T = {horizon}; no full history is possible"
        )));
    }
    if coverage.len() != spec.num_groups {
        return Err(Error::invalid(format!(
            "coverage has {} entries for {} groups",
            coverage.len(),
            spec.num_groups
        )));
    }
    if let Some(c) = coverage.iter().find(|c| !(**c > 0.0 && **c <= 1.0)) {
        return Err(Error::invalid(format!("coverage {c} is outside (0, 1]")));
    }

    let mut ctx_rng = rng.fork("contexts");
    let contexts: Vec<Context> = (0..n_c).map(|_| sample_context(&mut ctx_rng, spec)).collect();
    let order = rng.fork("coverage").permutation(n_c);

    let mut groups = Vec::with_capacity(spec.num_groups);
    for (g, &cov) in coverage.iter().enumerate() {
        let user = UserProfile::pure(g, spec.num_groups);
        let mut annotate = rng.fork(&format!("annotate/{g}"));
        let count = coverage_count(cov, n_c);
        let mut pool = Vec::with_capacity(count);
        for &ci in &order[..count] {
            let x = &contexts[ci];
            let (a1, a2) = sample_distinct_pair(&mut annotate, spec.num_actions);
            let (winner, loser) = sample_preference(&mut annotate, spec, &user, a1, a2, x)?;
            pool.push(PreferenceTriple {
                x: x.clone(),
                winner,
                loser,
            });
        }
        groups.push(partition(g, pool, horizon, &mut rng.fork(&format!("partition/{g}"))));
    }

    Ok(OfflineDataset {
        config: GenerationConfig {
            n_c,
            coverage: coverage.to_vec(),
            horizon,
            seed: rng.seed(),
            config_hash: None,
            contexts,
        },
        groups,
    })
}

/// Re-cuts every group's triple pool into fresh random histories.
pub fn reshuffle_epoch(rng: &Rng, dataset: &OfflineDataset) -> OfflineDataset {
    let groups = dataset
        .groups
        .iter()
        .enumerate()
        .map(|(g, data)| {
            let pool: Vec<PreferenceTriple> = data.triples().cloned().collect();
            partition(g, pool, dataset.horizon(), &mut rng.fork(&format!("reshuffle/{g}")))
        })
        .collect();
    OfflineDataset {
        config: dataset.config.clone(),
        groups,
    }
}

/// Writes the dataset as JSON lines: a header, then one record per history.
/// A group's leftover triples follow its histories as one shorter record.
pub fn save_dataset(dataset: &OfflineDataset, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    serde_json::to_writer(&mut out, &dataset.config)?;
    out.push(b'\n');
    for (g, data) in dataset.groups.iter().enumerate() {
        for seq in &data.sequences {
            serde_json::to_writer(&mut out, seq)?;
            out.push(b'\n');
        }
        if !data.remainder.is_empty() {
            let rest = HistorySequence {
                group: g,
                triples: data.remainder.clone(),
            };
            serde_json::to_writer(&mut out, &rest)?;
            out.push(b'\n');
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<OfflineDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty dataset file".into()))?;
    let config: GenerationConfig = serde_json::from_str(header).map_err(|e| parse_err(1, e.to_string()))?;
    if config.horizon == 0 {
        return Err(parse_err(1, "T must be at least 1".into()));
    }
    let mut groups = vec![GroupData::default(); config.coverage.len()];
    for (i, line) in lines {
        let lineno = i + 1;
        let seq: HistorySequence = serde_json::from_str(line).map_err(|e| parse_err(lineno, e.to_string()))?;
        let data = groups
            .get_mut(seq.group)
            .ok_or_else(|| parse_err(lineno, format!("group {} has no coverage entry", seq.group)))?;
        if seq.triples.iter().any(|t| t.winner == t.loser) {
            return Err(parse_err(lineno, "a triple has winner == loser".into()));
        }
        match seq.len().cmp(&config.horizon) {
            std::cmp::Ordering::Equal => data.sequences.push(seq),
            std::cmp::Ordering::Less if data.remainder.is_empty() => data.remainder = seq.triples,
            std::cmp::Ordering::Less => return Err(parse_err(lineno, "second short record for one group".into())),
            std::cmp::Ordering::Greater => {
                return Err(parse_err(lineno, format!("history of length {} exceeds T", seq.len())))
            }
        }
    }
    Ok(OfflineDataset { config, groups })
}
