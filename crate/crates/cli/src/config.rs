//! Run configuration for the `pretrain-mlm`, `train`, `eval` and `predict`
//! subcommands. Every field has a default, so a config file only needs the
//! fields it changes.

use std::path::{Path, PathBuf};

use adaprompt_core::experiments::{ModelSettings, PromptLayerSettings};
use adaprompt_core::mlm::PretrainOptions;
use adaprompt_core::promptgen::PromptGenConfig;
use adaprompt_core::text::DEFAULT_MAX_LEN;
use adaprompt_core::training::{Precision, Regime, RegimeKind, Task};
use adaprompt_core::text::Vocab;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Model shape used by `pretrain-mlm`; later stages read it from the
    /// checkpoint.
    pub model: ModelSettings,
    pub pretrain: PretrainOptions,
    /// Required by the AP regimes unless the checkpoint already has a layer.
    pub prompt_layer: Option<PromptLayerSettings>,
    pub regime: RegimeKind,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub pattern: String,
    /// `(label, word)` pairs; label order is output order.
    pub verbalizer: Vec<(String, String)>,
    pub train_data: Vec<PathBuf>,
    pub test_data: Vec<PathBuf>,
    pub seed: u64,
    pub precision: Precision,
    pub max_len: usize,
    pub min_count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelSettings { dropout_rate: 0.0, fan_in_init: true, ..ModelSettings::default() },
            pretrain: PretrainOptions { epochs: 8, ..PretrainOptions::default() },
            prompt_layer: Some(PromptLayerSettings::default()),
            regime: RegimeKind::ApFull,
            learning_rate: None,
            batch_size: None,
            epochs: None,
            pattern: "it was [MASK] ,".into(),
            verbalizer: vec![("positive".into(), "good".into()), ("negative".into(), "bad".into())],
            train_data: Vec::new(),
            test_data: Vec::new(),
            seed: 0,
            precision: Precision::F32,
            max_len: DEFAULT_MAX_LEN,
            min_count: 1,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        serde_json::from_str(&raw).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.config(adaprompt_core::text::RESERVED.len(), 0).validate()?;
        if self.verbalizer.len() < 2 {
            return Err(CliError::Config("verbalizer needs at least two labels".into()));
        }
        if self.max_len == 0 {
            return Err(CliError::Config("max_len must be positive".into()));
        }
        if self.regime.uses_prompt_layer() && self.prompt_layer.is_none() {
            return Err(CliError::Config(format!("regime {} needs a prompt_layer config", self.regime)));
        }
        self.regime().validate()?;
        Ok(())
    }

    pub fn regime(&self) -> Regime {
        let mut r = Regime::new(self.regime);
        if let Some(lr) = self.learning_rate {
            r = r.with_learning_rate(lr);
        }
        if let Some(e) = self.epochs {
            r = r.with_epochs(e);
        }
        if let Some(b) = self.batch_size {
            r.batch_size = b;
        }
        r
    }

    pub fn task(&self, vocab: &Vocab) -> Result<Task> {
        Ok(Task::new(vocab.clone(), &self.pattern, &self.verbalizer)?.with_max_len(self.max_len))
    }

    /// Prompt-layer config for a model of width `d_model`.
    pub fn prompt_gen_config(&self, d_model: usize) -> Result<PromptGenConfig> {
        let p = self
            .prompt_layer
            .as_ref()
            .ok_or_else(|| CliError::Config(format!("regime {} needs a prompt_layer config", self.regime)))?;
        Ok(PromptGenConfig { d_model, d_hidden: p.d_hidden, s: p.s, seed: self.seed })
    }
}
