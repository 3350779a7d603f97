//! The unified run configuration consumed by the CLI.
//!
//! One JSON document drives every command; unknown keys are rejected so an
//! ablation grid cannot silently run with a typo'd setting.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TokenArError};
use crate::model::ModelConfig;
use crate::scalar::FloatWidth;
use crate::scene::SceneBuilder;
use crate::sequence::{self, SequenceLayout, MAX_SUBJECTS};
use crate::tokenizer::{build_codebook, Codebook};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerSection {
    /// Codebook size K.
    pub k: usize,
    /// Patch side in pixels.
    pub patch: usize,
    pub palette_seed: u64,
    /// Square image side in pixels; must be divisible by `patch`.
    pub image_size: usize,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        TokenizerSection {
            k: 64,
            patch: 4,
            palette_seed: 0,
            image_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayoutSection {
    /// Reference count m.
    pub m: usize,
    /// Instruct token count M (used when training.instruct is set).
    pub instruct_len: usize,
    pub itd: bool,
}

impl Default for LayoutSection {
    fn default() -> Self {
        LayoutSection {
            m: 2,
            instruct_len: 30,
            itd: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub distill_dim: usize,
    pub float: FloatWidth,
    pub index_embedding: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            max_seq_len: 1024,
            distill_dim: 16,
            float: FloatWidth::F32,
            index_embedding: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub lambda_distill: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub teacher_seed: u64,
    pub instruct: bool,
    pub standalone_instruct_sgd: bool,
    pub checkpoint_interval: usize,
    pub target_accuracy: Option<f64>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.05,
            lambda_distill: 0.5,
            batch_size: 8,
            steps: 1000,
            seed: 0,
            teacher_seed: 0xD157_11,
            instruct: true,
            standalone_instruct_sgd: false,
            checkpoint_interval: 0,
            target_accuracy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatagenSection {
    pub count: usize,
    pub delta: f64,
    pub seed: u64,
}

impl Default for DatagenSection {
    fn default() -> Self {
        DatagenSection {
            count: 100,
            delta: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSection {
    /// "greedy" or "temperature".
    pub mode: String,
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub sample_seed: u64,
}

impl Default for GenerateSection {
    fn default() -> Self {
        GenerateSection {
            mode: "greedy".into(),
            temperature: 1.0,
            top_k: None,
            sample_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub tokenizer: TokenizerSection,
    pub layout: LayoutSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub datagen: DatagenSection,
    pub generate: GenerateSection,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let bytes = fs::read(path).map_err(|e| TokenArError::io(path, e))?;
        let cfg: RunConfig = serde_json::from_slice(&bytes)
            .map_err(|e| TokenArError::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_file(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self).unwrap())
            .map_err(|e| TokenArError::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokenizer.k < 2 {
            return Err(TokenArError::invalid("tokenizer.k must be at least 2"));
        }
        if self.tokenizer.patch == 0 || self.tokenizer.image_size % self.tokenizer.patch != 0 {
            return Err(TokenArError::invalid(format!(
                "image size {} not divisible by patch {}",
                self.tokenizer.image_size, self.tokenizer.patch
            )));
        }
        if self.layout.m == 0 || self.layout.m > MAX_SUBJECTS {
            return Err(TokenArError::invalid(format!(
                "layout.m must be in 1..={MAX_SUBJECTS}"
            )));
        }
        if !(0.0..=1.0).contains(&self.datagen.delta) {
            return Err(TokenArError::invalid("datagen.delta must lie in [0,1]"));
        }
        match self.generate.mode.as_str() {
            "greedy" => {}
            "temperature" => {
                if self.generate.temperature <= 0.0 {
                    return Err(TokenArError::invalid("generate.temperature must be positive"));
                }
            }
            other => {
                return Err(TokenArError::invalid(format!(
                    "generate.mode must be greedy or temperature, got {other}"
                )))
            }
        }
        self.train_config().validate()?;
        let layout = self.sequence_layout()?;
        let model = self.model_config()?;
        if layout.total_len() > model.max_seq_len {
            return Err(TokenArError::invalid(format!(
                "layout needs {} positions but max_seq_len is {}",
                layout.total_len(),
                model.max_seq_len
            )));
        }
        if self.training.lambda_distill > 0.0
            && (self.grid_rows() % 2 != 0 || self.grid_cols() % 2 != 0)
        {
            return Err(TokenArError::invalid(
                "distillation needs an even token grid; adjust image_size/patch or set lambda_distill to 0",
            ));
        }
        Ok(())
    }

    pub fn grid_rows(&self) -> usize {
        self.tokenizer.image_size / self.tokenizer.patch
    }

    pub fn grid_cols(&self) -> usize {
        self.tokenizer.image_size / self.tokenizer.patch
    }

    /// Instruct length actually in effect (zero when instruct is disabled).
    pub fn effective_instruct_len(&self) -> usize {
        if self.training.instruct {
            self.layout.instruct_len
        } else {
            0
        }
    }

    pub fn sequence_layout(&self) -> Result<SequenceLayout> {
        SequenceLayout::new(
            self.layout.m,
            self.grid_rows(),
            self.grid_cols(),
            self.effective_instruct_len(),
            self.layout.itd,
        )
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            d_model: self.model.d_model,
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            vocab_size: sequence::vocab_size(self.tokenizer.k),
            image_vocab: self.tokenizer.k,
            max_seq_len: self.model.max_seq_len,
            instruct_len: self.effective_instruct_len(),
            index_vocab: MAX_SUBJECTS + 3,
            distill_dim: self.model.distill_dim,
            index_embedding_enabled: self.model.index_embedding,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.training.lr,
            beta1: self.training.beta1,
            beta2: self.training.beta2,
            weight_decay: self.training.weight_decay,
            lambda_distill: self.training.lambda_distill,
            batch_size: self.training.batch_size,
            steps: self.training.steps,
            seed: self.training.seed,
            teacher_seed: self.training.teacher_seed,
            itd_enabled: self.layout.itd,
            instruct_enabled: self.training.instruct,
            instruct_len: self.effective_instruct_len(),
            standalone_instruct_sgd: self.training.standalone_instruct_sgd,
            checkpoint_interval: self.training.checkpoint_interval,
            target_accuracy: self.training.target_accuracy,
        }
    }

    pub fn codebook(&self) -> Result<Codebook> {
        build_codebook(self.tokenizer.palette_seed, self.tokenizer.k)
    }

    pub fn scene_builder(&self) -> Result<SceneBuilder> {
        SceneBuilder::new(
            self.codebook()?,
            self.tokenizer.patch,
            self.grid_rows(),
            self.grid_cols(),
        )
    }
}
