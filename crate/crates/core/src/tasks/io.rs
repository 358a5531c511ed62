//! Suite persistence: `suite.jsonl` (one task per line) and
//! `suite_manifest.json` (seed, config, filter report, content hash).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    gen_binary_suite, gen_relation_suite, BinarySuiteConfig, Family, FilterReport, RelationSuiteConfig, Suite,
    TaskSpec, Vocab,
};
use crate::error::{Error, Result};

pub const SUITE_FILE: &str = "suite.jsonl";
pub const MANIFEST_FILE: &str = "suite_manifest.json";
const FORMAT: &str = "ictlab-suite";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub family: Family,
    /// Largest support size any consumer will request; every kept task has at
    /// least `k_max + 1` examples.
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    /// Majority-label filter bound; `None` disables the filter.
    #[serde(default)]
    pub filter_threshold: Option<f64>,
    #[serde(default)]
    pub relation: Option<RelationSuiteConfig>,
    #[serde(default)]
    pub binary: Option<BinarySuiteConfig>,
}

fn default_k_max() -> usize {
    5
}

impl SuiteConfig {
    pub fn max_task_input_len(&self) -> Result<usize> {
        match self.family {
            Family::RelationLookup => Ok(self.relation_config()?.max_task_input_len),
            Family::BinaryClf => Ok(self.binary_config()?.max_task_input_len),
        }
    }

    fn relation_config(&self) -> Result<&RelationSuiteConfig> {
        self.relation
            .as_ref()
            .ok_or_else(|| Error::config("family relation-lookup needs a [suite.relation] table"))
    }

    fn binary_config(&self) -> Result<&BinarySuiteConfig> {
        self.binary
            .as_ref()
            .ok_or_else(|| Error::config("family binary-clf needs a [suite.binary] table"))
    }

    pub fn vocab(&self) -> Result<Vocab> {
        match self.family {
            Family::RelationLookup => Ok(self.relation_config()?.vocab()),
            Family::BinaryClf => Ok(self.binary_config()?.vocab()),
        }
    }
}

/// Generates and filters a suite. Pure function of `(seed, config)`.
pub fn build_suite(seed: u64, config: &SuiteConfig) -> Result<(Suite, FilterReport)> {
    let raw = match config.family {
        Family::RelationLookup => gen_relation_suite(seed, config.relation_config()?)?,
        Family::BinaryClf => gen_binary_suite(seed, config.binary_config()?)?,
    };
    raw.filtered(config.filter_threshold, config.max_task_input_len()?, config.k_max + 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config: SuiteConfig,
    pub vocab: Vocab,
    pub filter: FilterReport,
    pub task_ids: Vec<String>,
    /// SHA-256 of the JSONL file, hex encoded.
    pub content_sha256: String,
}

pub fn suite_jsonl(tasks: &[TaskSpec]) -> Result<String> {
    let mut out = String::new();
    for t in tasks {
        out.push_str(&serde_json::to_string(t)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_suite(dir: &Path, seed: u64, config: &SuiteConfig, suite: &Suite, filter: &FilterReport) -> Result<SuiteManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let jsonl = suite_jsonl(&suite.tasks)?;
    let manifest = SuiteManifest {
        format: FORMAT.into(),
        version: VERSION,
        seed,
        config: config.clone(),
        vocab: suite.vocab,
        filter: filter.clone(),
        task_ids: suite.tasks.iter().map(|t| t.task_id.clone()).collect(),
        content_sha256: sha256_hex(jsonl.as_bytes()),
    };
    let path = dir.join(SUITE_FILE);
    fs::write(&path, &jsonl).map_err(|e| Error::io(&path, e))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads a persisted suite and checks the content hash.
pub fn read_suite(dir: &Path) -> Result<(Suite, SuiteManifest)> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: SuiteManifest = serde_json::from_str(&text)?;
    let path = dir.join(SUITE_FILE);
    let jsonl = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let actual = sha256_hex(jsonl.as_bytes());
    if actual != manifest.content_sha256 {
        return Err(Error::config(format!(
            "suite hash mismatch: manifest {} vs file {actual}",
            manifest.content_sha256
        )));
    }
    let tasks = jsonl
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<std::result::Result<Vec<TaskSpec>, _>>()?;
    Ok((
        Suite {
            vocab: manifest.vocab,
            tasks,
        },
        manifest,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn relation_cfg() -> SuiteConfig {
        SuiteConfig {
            family: Family::RelationLookup,
            k_max: 5,
            filter_threshold: Some(0.025),
            relation: Some(RelationSuiteConfig {
                n_tasks: 5,
                n_examples: 45,
                entity_vocab_size: 60,
                max_task_input_len: 8,
            }),
            binary: None,
        }
    }

    #[test]
    fn write_read_round_trip_and_hash() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = relation_cfg();
        let (suite, report) = build_suite(8, &cfg).unwrap();
        let manifest = write_suite(dir.path(), 8, &cfg, &suite, &report).unwrap();
        let (back, m2) = read_suite(dir.path()).unwrap();
        assert_eq!(back, suite);
        assert_eq!(m2, manifest);
        assert_eq!(manifest.filter.tasks_kept, 5);
    }

    #[test]
    fn tampered_suite_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = relation_cfg();
        let (suite, report) = build_suite(8, &cfg).unwrap();
        write_suite(dir.path(), 8, &cfg, &suite, &report).unwrap();
        let p = dir.path().join(SUITE_FILE);
        let mut text = fs::read_to_string(&p).unwrap();
        text.push('\n');
        text.push_str(&serde_json::to_string(&suite.tasks[0]).unwrap());
        fs::write(&p, text).unwrap();
        assert!(read_suite(dir.path()).is_err());
    }

    #[test]
    fn jsonl_field_order_is_stable() {
        let (suite, _) = build_suite(1, &relation_cfg()).unwrap();
        let line = suite_jsonl(&suite.tasks[..1]).unwrap();
        let keys = ["\"task_id\"", "\"family\"", "\"group\"", "\"instructions\"", "\"examples\"", "\"answer_space\""];
        let positions: Vec<usize> = keys.iter().map(|k| line.find(k).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
    }
}
