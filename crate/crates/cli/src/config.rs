//! TOML configuration files for `train` and `adapt`.

use std::path::{Path, PathBuf};

use reatt::model::ModelConfig;
use reatt::training::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Everything `train` reads. Paths are relative to the working directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    /// Document collection, JSONL.
    pub corpus: PathBuf,
    /// Training queries with answers, JSONL.
    pub train_queries: PathBuf,
    #[serde(default)]
    pub dev_queries: Option<PathBuf>,
    /// Graded judgements for the dev queries; answer containment otherwise.
    #[serde(default)]
    pub dev_qrels: Option<PathBuf>,
    /// Trailing training queries moved to the dev split when
    /// `dev_queries` is absent.
    #[serde(default)]
    pub holdout: usize,
    pub out: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

/// The `[train]` table of a configuration file; other keys are ignored so
/// a `train` configuration can be reused for adaptation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptFile {
    #[serde(default)]
    pub train: TrainConfig,
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Data(format!("config {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_default_when_absent() {
        let f: TrainFile = toml::from_str("corpus = \"c\"\ntrain_queries = \"q\"\nout = \"o\"\n").unwrap();
        assert_eq!(f.train, TrainConfig::default());
        assert_eq!(f.model, ModelConfig::default());
        assert_eq!(f.holdout, 0);
    }

    #[test]
    fn missing_corpus_is_named() {
        let err = toml::from_str::<TrainFile>("train_queries = \"q\"\nout = \"o\"\n").unwrap_err();
        assert!(err.to_string().contains("corpus"), "{err}");
    }

    #[test]
    fn unknown_train_key_is_rejected() {
        let text = "corpus = \"c\"\ntrain_queries = \"q\"\nout = \"o\"\n[train]\nalpah = 8.0\n";
        assert!(toml::from_str::<TrainFile>(text).is_err());
    }

    #[test]
    fn adapt_reads_the_train_table_of_a_train_file() {
        let text = "corpus = \"c\"\nout = \"o\"\n[train]\nalpha = 2.0\nlr = 0.001\n";
        let f: AdaptFile = toml::from_str(text).unwrap();
        assert_eq!(f.train.alpha, 2.0);
        assert_eq!(f.train.lr, 0.001);
    }
}
