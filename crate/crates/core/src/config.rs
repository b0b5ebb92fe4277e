//! Run configuration files.
//!
//! A flat key/value file with one section per component, e.g.
//!
//! ```toml
//! [data]
//! n_base_facts = 1500
//!
//! [model]
//! embed_dim = 64
//!
//! [editor]
//! eta = 0.01
//! modules = "1.mlp_in,1.mlp_out"
//! ablate = "coverage=0.5"
//! ```
//!
//! Command-line flags override values read from the file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::editor::{Ablation, EditorConfig};
use crate::error::{Error, Result};
use crate::model::{parse_module_list, LossReduction, ModelConfig, ModuleRef, PretrainConfig};
use crate::stats::DEFAULT_EPS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub n_base_facts: usize,
    pub n_edit_facts: usize,
    pub templates_per_relation: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            n_base_facts: 1500,
            n_edit_facts: 1000,
            templates_per_relation: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub mlp_hidden: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    pub loss: LossReduction,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::default();
        ModelSection {
            embed_dim: d.embed_dim,
            n_blocks: d.n_blocks,
            mlp_hidden: d.mlp_hidden,
            max_seq_len: d.max_seq_len,
            seed: d.seed,
            loss: d.loss,
        }
    }
}

impl ModelSection {
    pub fn to_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            n_blocks: self.n_blocks,
            mlp_hidden: self.mlp_hidden,
            max_seq_len: self.max_seq_len,
            seed: self.seed,
            loss: self.loss,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditorSection {
    pub eta: f64,
    /// Comma list of modules; empty means every MLP projection.
    pub modules: String,
    pub eps: f64,
    pub ablate: String,
    pub coverage_seed: u64,
    pub turn_size: usize,
}

impl Default for EditorSection {
    fn default() -> Self {
        EditorSection {
            eta: 1e-6,
            modules: String::new(),
            eps: DEFAULT_EPS,
            ablate: String::new(),
            coverage_seed: 0,
            turn_size: 100,
        }
    }
}

impl EditorSection {
    pub fn to_config(&self, model: &ModelConfig) -> Result<EditorConfig> {
        let modules: Vec<ModuleRef> = if self.modules.trim().is_empty() {
            ModuleRef::all(model)
        } else {
            parse_module_list(&self.modules)?
        };
        let mut ablation = Ablation {
            coverage_seed: self.coverage_seed,
            ..Ablation::default()
        };
        ablation.parse_into(&self.ablate)?;
        let cfg = EditorConfig {
            eta: self.eta,
            modules,
            eps: self.eps,
            ablation,
        };
        cfg.validate(model)?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub pretrain: PretrainConfig,
    pub editor: EditorSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}
