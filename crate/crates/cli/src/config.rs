//! Run configuration files.
//!
//! TOML with one optional table per component. Missing keys take their
//! defaults, unknown keys are rejected.
//!
//! ```toml
//! [generator]
//! seed = 7
//! num_studies = 4
//!
//! [model]
//! hidden_size = 64
//!
//! [training]
//! learning_rate = 0.003
//! batch_size = 8
//! loss_weights = { vel = 1.0, acc = 0.5, angle = 1.0, pos = 1.0 }
//!
//! [sampler]
//! num_samples = 50
//! ```
//!
//! `input_dim`, `landmark_count` and `seq_len` of `[model]` are always
//! taken from the corpus.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use relikin_core::data::GeneratorConfig;
use relikin_core::model::ModelConfig;
use relikin_core::training::TrainingConfig;
use relikin_core::uncertainty::SamplerConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub generator: Option<GeneratorConfig>,
    pub model: Option<ModelConfig>,
    pub training: Option<TrainingConfig>,
    pub sampler: Option<SamplerConfig>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}
