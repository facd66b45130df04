use std::path::Path;

use anyhow::{Context, Result};
use hydra_hgr::decomposition::DecompositionParams;
use hydra_hgr::eval::{ExperimentConfig, DEFAULT_FOLDS};
use hydra_hgr::fusion::DEFAULT_HIDDEN;
use hydra_hgr::nn::TrainParams;
use hydra_hgr::preprocess::PreprocessConfig;
use hydra_hgr::signal_model::GestureDatasetConfig;
use hydra_hgr::vit::VitConfig;
use serde::{Deserialize, Serialize};

use crate::usage;

pub const SEED_ENV: &str = "HYDRA_HGR_SEED";

/// Transformer sizes shared by both paths (fusion needs equal widths).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_hidden: usize,
    pub fusion_hidden: usize,
    pub per_head_scaling: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let v = VitConfig::macro_path(1);
        Self {
            embed_dim: v.embed_dim,
            num_heads: v.num_heads,
            num_layers: v.num_layers,
            mlp_hidden: v.mlp_hidden,
            fusion_hidden: DEFAULT_HIDDEN,
            per_head_scaling: v.per_head_scaling,
        }
    }
}

/// Everything a run depends on besides its input artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Global seed. Resolution order: `--seed`, this key, `HYDRA_HGR_SEED`,
    /// then `dataset.seed`.
    pub seed: Option<u64>,
    pub folds: usize,
    pub dataset: GestureDatasetConfig,
    pub preprocess: PreprocessConfig,
    pub decomposition: DecompositionParams,
    pub model: ModelConfig,
    pub macro_train: TrainParams,
    pub micro_train: TrainParams,
    pub fusion_train: TrainParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        let paper = ExperimentConfig::paper(1);
        Self {
            seed: None,
            folds: DEFAULT_FOLDS,
            dataset: GestureDatasetConfig::default(),
            preprocess: PreprocessConfig::default(),
            decomposition: DecompositionParams::default(),
            model: ModelConfig::default(),
            macro_train: paper.macro_train,
            micro_train: paper.micro_train,
            fusion_train: paper.fusion_train,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
    }

    /// Fixes the seed from flag, file, environment and dataset, in that order.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<u64> {
        let env = match std::env::var(SEED_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| usage(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
            ),
            Err(_) => None,
        };
        let seed = flag.or(self.seed).or(env).unwrap_or(self.dataset.seed);
        self.seed = Some(seed);
        self.dataset.seed = seed;
        Ok(seed)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.dataset.seed)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |r: hydra_hgr::Result<()>| r.map_err(|e| usage(e.to_string()));
        check(self.dataset.validate())?;
        check(self.preprocess.validate())?;
        check(self.decomposition.validate())?;
        check(self.experiment(1).validate())?;
        if self.folds < 2 {
            return Err(usage(format!("folds = {} must be at least 2", self.folds)));
        }
        Ok(())
    }

    fn vit(&self, base: VitConfig) -> VitConfig {
        let m = &self.model;
        VitConfig {
            per_head_scaling: m.per_head_scaling,
            ..base.with_dims(m.embed_dim, m.num_heads, m.num_layers, m.mlp_hidden)
        }
    }

    pub fn macro_vit(&self, num_classes: usize) -> VitConfig {
        self.vit(VitConfig::macro_path(num_classes))
    }

    pub fn micro_vit(&self, num_classes: usize) -> VitConfig {
        self.vit(VitConfig::micro_path(num_classes))
    }

    pub fn experiment(&self, num_classes: usize) -> ExperimentConfig {
        ExperimentConfig {
            macro_vit: self.macro_vit(num_classes),
            micro_vit: self.micro_vit(num_classes),
            fusion_hidden: self.model.fusion_hidden,
            macro_train: self.macro_train.clone(),
            micro_train: self.micro_train.clone(),
            fusion_train: self.fusion_train.clone(),
            num_folds: self.folds,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing configuration")
    }
}
