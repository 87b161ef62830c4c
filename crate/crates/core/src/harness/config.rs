use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::DenoisingConfig;
use crate::error::{Error, Result};
use crate::finetune::FinetuneStrategy;
use crate::numeric::AdamConfig;
use crate::speech::PretrainConfig;

use super::pipeline::ModelConfig;
use super::synth::SynthTaskSpec;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    /// One model per language pair.
    #[default]
    Bilingual,
    /// One model over all pairs, each sample tagged with its target language.
    Multilingual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synth(SynthTaskSpec),
    /// A directory holding `vocab.txt` and `{train,valid,test}.tsv`.
    Dir { path: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth(SynthTaskSpec::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    /// Candidates of the learning-rate sweep.
    pub learning_rates: Vec<f64>,
    pub batch_size: usize,
    /// Updates per candidate (per pair in multilingual mode).
    pub steps: usize,
    pub eval_interval: usize,
    pub label_smoothing: f64,
    /// Validation utterances scored at each evaluation; 0 uses all.
    pub valid_limit: usize,
    pub adam: AdamConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rates: vec![3e-3],
            batch_size: 8,
            steps: 1200,
            eval_interval: 100,
            label_smoothing: 0.3,
            valid_limit: 0,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSettings {
    pub enabled: bool,
    pub speech: PretrainConfig,
    pub denoising: DenoisingConfig,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        PretrainSettings { enabled: true, speech: PretrainConfig::default(), denoising: DenoisingConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub beam: usize,
    pub max_len: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { beam: 5, max_len: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub mode: TrainingMode,
    pub data: DataSource,
    pub model: ModelConfig,
    pub strategy: FinetuneStrategy,
    pub training: TrainingConfig,
    pub pretrain: PretrainSettings,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            out_dir: PathBuf::from("runs/default"),
            mode: TrainingMode::Bilingual,
            data: DataSource::default(),
            model: ModelConfig::default(),
            strategy: FinetuneStrategy::best(),
            training: TrainingConfig::default(),
            pretrain: PretrainSettings::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.strategy.validate()?;
        let t = &self.training;
        if t.learning_rates.is_empty() || t.learning_rates.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config("learning_rates must be a nonempty list of positive numbers".into()));
        }
        if t.batch_size == 0 || t.eval_interval == 0 {
            return Err(Error::Config("batch_size and eval_interval must be positive".into()));
        }
        if !(0.0..=1.0).contains(&t.label_smoothing) {
            return Err(Error::Config(format!("label_smoothing {} outside [0, 1]", t.label_smoothing)));
        }
        if self.eval.beam == 0 || self.eval.max_len == 0 {
            return Err(Error::Config("beam and max_len must be positive".into()));
        }
        if let DataSource::Synth(spec) = &self.data {
            spec.validate()?;
        }
        Ok(())
    }
}
