//! Run configuration: one TOML file drives a whole experiment.
//!
//! The parsed config re-serializes to a canonical form (struct field
//! order, `toml` pretty printing) byte-identically, so configs can be
//! compared and snapshotted into run directories and checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{vocab, SceneSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::MdgdConfig;

/// Dataset sizes and the world seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub scene: SceneSpec,
    pub n_pretrain: usize,
    pub n_probe: usize,
    pub n_downstream: usize,
    /// Held-out downstream evaluation size.
    pub n_eval: usize,
    /// Focus attribute of the downstream task.
    pub focus: usize,
    pub data_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Training seed (minibatch order; independent of `model.seed` and
    /// `data.data_seed`).
    pub seed: u64,
    /// Run directory; relative paths resolve against `MDGD_RUN_ROOT` when
    /// that variable is set.
    pub output_dir: String,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub optim: MdgdConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        self.data.scene.validate().map_err(|e| Error::Config(format!("data.scene: {e}")))?;
        if self.data.focus >= self.data.scene.attributes {
            return Err(Error::Config(format!(
                "data.focus {} outside 0..{}",
                self.data.focus, self.data.scene.attributes
            )));
        }
        if self.model.visual_tokens != self.data.scene.visual_tokens
            || self.model.d_img != self.data.scene.d_img
        {
            return Err(Error::Config(format!(
                "model image geometry ({}, {}) disagrees with scene ({}, {})",
                self.model.visual_tokens,
                self.model.d_img,
                self.data.scene.visual_tokens,
                self.data.scene.d_img
            )));
        }
        let needed_vocab = vocab::min_vocab(self.data.scene.attributes, self.data.scene.categories);
        if self.model.vocab < needed_vocab {
            return Err(Error::Config(format!(
                "model.vocab {} too small for the scene (needs ≥ {needed_vocab})",
                self.model.vocab
            )));
        }
        let longest = self.model.visual_tokens + 2 + self.data.scene.attributes;
        if self.model.max_seq < longest {
            return Err(Error::Config(format!(
                "model.max_seq {} cannot hold a pretrain sequence of length {longest}",
                self.model.max_seq
            )));
        }
        if self.data.n_pretrain == 0 || self.data.n_probe == 0 || self.data.n_downstream == 0 {
            return Err(Error::Config("dataset sizes must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Canonical serialization; parsing and re-serializing any valid
    /// config yields these exact bytes.
    pub fn canonical_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config serialization failed: {e}")))
    }

    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("{}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        RunConfig::from_toml_str(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{LvNormalization, MaskGranularity, Method};

    fn sample_config() -> RunConfig {
        RunConfig {
            seed: 3,
            output_dir: "runs/demo".into(),
            model: ModelConfig {
                d_img: 4,
                visual_tokens: 2,
                vocab: 16,
                d_model: 8,
                n_layers: 2,
                n_heads: 2,
                d_ff: 16,
                max_seq: 12,
                trainable_last_k: 1,
                train_output_head: false,
                seed: 5,
            },
            data: DataConfig {
                scene: SceneSpec {
                    attributes: 2,
                    categories: 2,
                    noise_sigma: 0.1,
                    visual_tokens: 2,
                    d_img: 4,
                },
                n_pretrain: 32,
                n_probe: 16,
                n_downstream: 32,
                n_eval: 16,
                focus: 0,
                data_seed: 11,
            },
            optim: MdgdConfig {
                eta: 0.2,
                method: Method::Mdgd,
                alpha: 0.5,
                mask_granularity: MaskGranularity::Block,
                eps_proj: 1e-12,
                lv_normalization: LvNormalization::Mean,
                steps: 4,
                batch_size: 4,
            },
        }
    }

    #[test]
    fn canonical_form_is_idempotent() {
        let cfg = sample_config();
        let canon = cfg.canonical_toml().unwrap();
        let reparsed = RunConfig::from_toml_str(&canon).unwrap();
        assert_eq!(reparsed, cfg);
        assert_eq!(reparsed.canonical_toml().unwrap(), canon);
    }

    #[test]
    fn unknown_method_is_config_error() {
        let cfg = sample_config();
        let text = cfg.canonical_toml().unwrap().replace("method = \"mdgd\"", "method = \"sgd\"");
        assert!(matches!(RunConfig::from_toml_str(&text), Err(Error::Config(_))));
    }

    #[test]
    fn geometry_mismatch_is_config_error() {
        let mut cfg = sample_config();
        cfg.model.d_img = 5;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn vocab_floor_is_enforced() {
        let mut cfg = sample_config();
        cfg.model.vocab = 8; // min for A=2, C=2 is 12
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
