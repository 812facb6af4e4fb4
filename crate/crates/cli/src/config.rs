use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::Context;
use pageorder::bench::BenchConfig;
use pageorder::corpus::{CorpusConfig, LengthBucket};
use pageorder::models::{Arch, PeVariant};
use pageorder::training::Strategy;
use serde::{Deserialize, Serialize};

/// A problem with the command line or configuration; exits with code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Which single model `train` fits. Sizes and optimizer settings come from `[bench]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub arch: Arch,
    pub pe_variant: PeVariant,
    pub strategy: Strategy,
    pub target_bucket: Option<LengthBucket>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            arch: Arch::PairwiseRank,
            pe_variant: PeVariant::Learned,
            strategy: Strategy::Universal,
            target_bucket: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedSection {
    pub endpoint: String,
    pub dim: usize,
    pub batch_size: usize,
    /// JSON Lines of `{"doc_id": ..., "pages": ["text", ...]}`.
    pub input: Option<PathBuf>,
}

impl Default for EmbedSection {
    fn default() -> Self {
        Self { endpoint: "http://127.0.0.1:8080".into(), dim: 3072, batch_size: 64, input: None }
    }
}

/// Contents of the TOML file passed with `--config`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out: Option<PathBuf>,
    /// Load this corpus instead of generating one from `[corpus]`.
    pub corpus_path: Option<PathBuf>,
    pub corpus: CorpusConfig,
    pub bench: BenchConfig,
    pub train: TrainSection,
    pub embed: EmbedSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }
}
