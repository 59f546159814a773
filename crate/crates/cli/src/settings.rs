//! Per-command settings. Precedence: command-line flag, then config file,
//! then the defaults below.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use softprompt::lm::PretrainMixture;
use softprompt::{EncoderVariant, FusionMode, Scheme};

use crate::CliError;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareSettings {
    /// JSON Lines file, or `toy-java` / `toy-javascript` for a bundled corpus.
    pub corpus: Option<String>,
    pub train_fraction: f64,
    pub valid_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
    pub min_freq: usize,
    pub max_vocab: usize,
}

impl Default for PrepareSettings {
    fn default() -> Self {
        PrepareSettings {
            corpus: None,
            train_fraction: 0.8,
            valid_fraction: 0.1,
            test_fraction: 0.1,
            seed: 0,
            min_freq: 1,
            max_vocab: 20_000,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSettings {
    /// Directory written by `prepare`.
    pub corpus: Option<PathBuf>,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub mixture: PretrainMixture,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        PretrainSettings {
            corpus: None,
            d_model: 128,
            layers: 4,
            heads: 4,
            d_ff: 512,
            max_positions: 512,
            epochs: 10,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            mixture: PretrainMixture::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub corpus: Option<PathBuf>,
    pub lm_checkpoint: Option<PathBuf>,
    pub prompt_length: usize,
    pub fusion: FusionMode,
    pub encoder: EncoderVariant,
    /// Leading training pairs to use; all when absent.
    pub train_size: Option<usize>,
    /// Leading validation pairs decoded after each epoch; all when absent.
    pub valid_size: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            corpus: None,
            lm_checkpoint: None,
            prompt_length: 100,
            fusion: FusionMode::Back,
            encoder: EncoderVariant::Bilstm,
            train_size: None,
            valid_size: None,
            epochs: 30,
            batch_size: 16,
            learning_rate: 5e-5,
            patience: 4,
            max_new_tokens: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSettings {
    pub scheme: Scheme,
    /// Prepared directory whose test split is summarized.
    pub corpus: Option<PathBuf>,
    /// JSON Lines file of snippets, instead of a corpus test split.
    pub input: Option<PathBuf>,
    pub lm_checkpoint: Option<PathBuf>,
    pub agent_checkpoint: Option<PathBuf>,
    pub template: String,
    pub k: usize,
    pub limit: Option<usize>,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for GenerateSettings {
    fn default() -> Self {
        GenerateSettings {
            scheme: Scheme::PromptAgent,
            corpus: None,
            input: None,
            lm_checkpoint: None,
            agent_checkpoint: None,
            template: "pi1".into(),
            k: 10,
            limit: None,
            max_new_tokens: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSettings {
    pub pred: Option<PathBuf>,
    pub r#ref: Option<PathBuf>,
    /// Model whose token embeddings drive semantic similarity; a hashed
    /// bag-of-words embedding is used without one.
    pub lm_checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSettings {
    pub spec: Option<PathBuf>,
    /// Corpus name to prepared directory.
    pub corpora: BTreeMap<String, PathBuf>,
    pub lm_checkpoint: Option<PathBuf>,
    pub workers: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub k: usize,
    pub valid_size: Option<usize>,
    pub test_size: Option<usize>,
    pub max_new_tokens: usize,
}

impl Default for GridSettings {
    fn default() -> Self {
        GridSettings {
            spec: None,
            corpora: BTreeMap::new(),
            lm_checkpoint: None,
            workers: 1,
            epochs: 30,
            batch_size: 16,
            learning_rate: 5e-5,
            patience: 4,
            k: 10,
            valid_size: None,
            test_size: None,
            max_new_tokens: 64,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSettings {
    /// Directory of run records written by `grid`.
    pub results: Option<PathBuf>,
}

fn normalize_keys(value: Value) -> Value {
    match value {
        Value::Object(map) => Value::Object(map.into_iter().map(|(k, v)| (k.replace('-', "_"), v)).collect()),
        other => other,
    }
}

fn overlay(base: &mut Map<String, Value>, top: Value) {
    if let Value::Object(top) = top {
        for (k, v) in top {
            if !v.is_null() {
                base.insert(k, v);
            }
        }
    }
}

/// Merges defaults, the config file and the flags that were given, and
/// returns the typed settings with their JSON form.
pub fn resolve<S, A>(flags: &A, config: Option<&Path>) -> Result<(S, Value), CliError>
where
    S: Serialize + DeserializeOwned + Default,
    A: Serialize,
{
    let Value::Object(mut merged) = serde_json::to_value(S::default()).expect("settings serialize") else {
        unreachable!("settings are structs")
    };
    if let Some(path) = config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("config {} is not valid JSON: {e}", path.display())))?;
        if !value.is_object() {
            return Err(CliError::usage(format!("config {} must hold a JSON object", path.display())));
        }
        overlay(&mut merged, normalize_keys(value));
    }
    overlay(&mut merged, serde_json::to_value(flags).expect("flags serialize"));
    let value = Value::Object(merged);
    let settings = serde_json::from_value(value.clone()).map_err(|e| CliError::usage(format!("invalid settings: {e}")))?;
    Ok((settings, value))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Flags {
        prompt_length: Option<usize>,
        seed: Option<u64>,
    }

    #[test]
    fn flag_beats_config_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        std::fs::write(&cfg, r#"{"prompt-length": 20, "seed": 5, "epochs": 3}"#).unwrap();
        let flags = Flags {
            prompt_length: Some(50),
            seed: None,
        };
        let (s, _): (TrainSettings, _) = resolve(&flags, Some(&cfg)).unwrap();
        assert_eq!((s.prompt_length, s.seed, s.epochs, s.batch_size), (50, 5, 3, 16));
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        std::fs::write(&cfg, r#"{"prompt_lenght": 20}"#).unwrap();
        let flags = Flags {
            prompt_length: None,
            seed: None,
        };
        let err = resolve::<TrainSettings, _>(&flags, Some(&cfg)).unwrap_err();
        assert_eq!(err.code, 2);
    }
}
