//! One TOML file with a section per stage. Command-line flags override it and
//! the merged result is written next to every output as `effective_config.toml`.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use niab_core::embedding::{Embedder, EmbeddingTable, HashingEmbedder};
use niab_core::eval::Policy;
use niab_core::ranker::RankerConfig;
use niab_core::scene::{default_vocabularies, load_vocabularies, GenConfig, SceneVocabulary};
use niab_core::sim::{default_layouts, ExpansionTable, Simulator};
use niab_core::trainer::TrainConfig;

use crate::Invalid;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { val_fraction: 0.1, seed: 42 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    /// `hashing` or `table:<path>`.
    pub source: String,
    /// Hashing dimension (ignored for tables, which carry their own).
    pub dim: usize,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig { source: "hashing".into(), dim: 64, seed: 0 }
    }
}

impl EmbedderConfig {
    pub fn build(&self) -> Result<Embedder> {
        if self.source == "hashing" {
            if self.dim == 0 {
                return Err(Invalid::new("embedder dim must be positive"));
            }
            return Ok(Embedder::Hashing(HashingEmbedder::new(self.dim, self.seed)));
        }
        match self.source.strip_prefix("table:") {
            Some(path) => {
                let table = EmbeddingTable::load(Path::new(path)).map_err(Invalid::wrap)?;
                Ok(Embedder::Table(table))
            }
            None => Err(Invalid::new(format!("unknown embedder `{}` (use hashing or table:<path>)", self.source))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub policy: Policy,
    /// Seed of the random policy.
    pub seed: u64,
    pub keep_logits: bool,
    pub emit_csv: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { policy: Policy::Model, seed: 0, keep_logits: false, emit_csv: false }
    }
}

/// Alternative data directories; the shipped data is used when unset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub vocab_dir: Option<PathBuf>,
    pub sim_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Tool version that wrote the file; informational on input.
    pub version: Option<String>,
    pub data: DataConfig,
    pub gen: GenConfig,
    pub split: SplitConfig,
    pub embedder: EmbedderConfig,
    pub ranker: RankerConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Config::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).map_err(|e| Invalid::new(format!("{}: {e}", path.display())))
    }

    /// Writes the configuration, stamped with the tool version.
    pub fn write_effective(&self, dir: &Path) -> Result<()> {
        let mut snapshot = self.clone();
        snapshot.version = Some(VERSION.to_string());
        let text = toml::to_string(&snapshot).context("serializing effective config")?;
        let path = dir.join("effective_config.toml");
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn vocabularies(&self) -> Result<Vec<SceneVocabulary>> {
        match &self.data.vocab_dir {
            Some(dir) => load_vocabularies(dir).map_err(Invalid::wrap),
            None => Ok(default_vocabularies()),
        }
    }

    pub fn simulator(&self) -> Result<Simulator> {
        let vocabs = self.vocabularies()?;
        match &self.data.sim_dir {
            Some(dir) => Simulator::load(dir, &vocabs).map_err(Invalid::wrap),
            None => Simulator::new(&vocabs, &default_layouts(), ExpansionTable::shipped()).map_err(Invalid::wrap),
        }
    }

    /// Embedder plus the ranker configuration adjusted to its dimension.
    pub fn embedder_and_ranker(&self) -> Result<(Embedder, RankerConfig)> {
        let embedder = self.embedder.build()?;
        let ranker = RankerConfig { input_dim: embedder.dim(), ..self.ranker.clone() };
        ranker.validate().map_err(Invalid::wrap)?;
        Ok((embedder, ranker))
    }
}

/// `NIAB_OUTPUT_ROOT/<name>` (or `./niab_out/<name>`) unless `--out` is given.
pub fn output_dir(explicit: Option<PathBuf>, name: &str) -> Result<PathBuf> {
    let dir = match explicit {
        Some(d) => d,
        None => {
            let root = std::env::var_os("NIAB_OUTPUT_ROOT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("niab_out"));
            root.join(name)
        }
    };
    if dir.exists() && !dir.is_dir() {
        return Err(Invalid::new(format!("{} exists and is not a directory", dir.display())));
    }
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}
