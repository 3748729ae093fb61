//! Run configuration: one TOML document covering every module, with
//! dotted-key overrides and a hash that names the run directory.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::constrained_trainer::{ReferenceConfig, TrainConfig};
use crate::datagen::WorldSpec;
use crate::error::{LwgrError, Result};
use crate::eval::EvalConfig;
use crate::fusion::FusionConfig;
use crate::gr_backbone::BackboneConfig;
use crate::knowledge_source::{KnowledgeBackend, LmConfig, LmPretrainConfig, LoraConfig};
use crate::policy::{Strategy, Variant};
use crate::serving::ServingConfig;
use crate::soft_instruction::SoftInstructionConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub levels: usize,
    pub codewords: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { levels: 3, codewords: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub beta_grid: Vec<f64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            beta_grid: vec![0.1, 0.3, 0.5, 0.7],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub k_values: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            k_values: vec![1, 3, 5, 7, 9],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldSpec,
    pub tokenizer: TokenizerConfig,
    pub backbone: BackboneConfig,
    pub lm: LmConfig,
    pub lm_pretrain: LmPretrainConfig,
    pub knowledge_backend: KnowledgeBackend,
    pub soft: SoftInstructionConfig,
    pub fusion: FusionConfig,
    pub lora: LoraConfig,
    pub strategy: Strategy,
    pub variant: Variant,
    pub reference: ReferenceConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
    pub sweep: SweepConfig,
    pub serving: ServingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            world: WorldSpec::default(),
            tokenizer: TokenizerConfig::default(),
            backbone: BackboneConfig::default(),
            lm: LmConfig::default(),
            lm_pretrain: LmPretrainConfig::default(),
            knowledge_backend: KnowledgeBackend::FrozenToyLm,
            soft: SoftInstructionConfig::default(),
            fusion: FusionConfig::default(),
            lora: LoraConfig::default(),
            strategy: Strategy::Frozen,
            variant: Variant::Lwgr,
            reference: ReferenceConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
            sweep: SweepConfig::default(),
            serving: ServingConfig::default(),
        }
    }
}

fn config_error(e: impl std::fmt::Display) -> LwgrError {
    LwgrError::Config(e.to_string())
}

/// Parses the right-hand side of an override as a TOML value, falling
/// back to a plain string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `a.b.c=value` to a TOML table, creating intermediate tables.
fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| LwgrError::Config(format!("override {spec:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(LwgrError::Config(format!("malformed override key {key:?}")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| LwgrError::Config(format!("override key {key:?}: {p} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses TOML text; unknown keys are rejected.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(config_error)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(config_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        if !path.exists() {
            return Err(LwgrError::MissingArtifact(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(config_error)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.eval.validate()?;
        if self.train.lr <= 0.0 {
            return Err(LwgrError::Config("train.lr must be positive".into()));
        }
        if self.sweep.k_values.contains(&0) {
            return Err(LwgrError::Config("sweep.k_values must be at least 1".into()));
        }
        if self.ablation.beta_grid.iter().any(|&b| b < 0.0) {
            return Err(LwgrError::Config("ablation.beta_grid must be non-negative".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form (object keys sorted), so the hash
    /// does not depend on key order in the source file.
    pub fn config_hash(&self) -> Result<String> {
        let v = serde_json::to_value(self)?;
        let canonical = serde_json::to_string(&v)?;
        Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
    }

    /// `<base>/<first 12 hex of the hash>-seed<seed>`.
    pub fn run_dir(&self, base: &Path) -> Result<std::path::PathBuf> {
        let h = self.config_hash()?;
        Ok(base.join(format!("{}-seed{}", &h[..12], self.seed)))
    }
}
