use std::path::Path;

use anyhow::{bail, Context, Result};
use opnas_core::evolution::SearchConfig;
use opnas_core::model::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvaluatorKind {
    /// Pretrain each candidate and score heldout masked-token accuracy.
    #[default]
    Training,
    /// Fraction of scale, transpose, matmul and softmax nodes; no training.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub size: usize,
    pub eval_mask_prob: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            size: 512,
            eval_mask_prob: 0.15,
        }
    }
}

/// Everything a command needs, merged from the config file and flags.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub evaluator: EvaluatorKind,
    pub search: SearchConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
}

/// Flag values that override the file.
#[derive(Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub iterations: Option<usize>,
    pub population: Option<usize>,
    pub k: Option<usize>,
    pub alpha: Option<f64>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("invalid config {}", p.display()))
            }
        }
    }

    pub fn resolve(mut self, o: &Overrides) -> Result<Self> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(i) = o.iterations {
            self.search.max_iterations = i;
        }
        if let Some(p) = o.population {
            self.search.population_size = p;
        }
        if let Some(k) = o.k {
            self.search.k = k;
        }
        if let Some(a) = o.alpha {
            self.search.alpha = a;
        }
        self.search.seed = self.seed;
        self.search.num_layers = self.model.num_layers;
        self.search.validate()?;
        self.model.validate()?;
        if self.train.steps == 0 || self.train.batch_size == 0 {
            bail!("train.steps and train.batch_size must be positive");
        }
        if self.corpus.size < 16 {
            bail!("corpus.size must be at least 16");
        }
        if !(0.0..=1.0).contains(&self.corpus.eval_mask_prob) {
            bail!("corpus.eval_mask_prob must lie in [0, 1]");
        }
        Ok(self)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
