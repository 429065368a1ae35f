//! Pinned desk-scale benchmark configurations.
//!
//! These constants were fixed by a calibration run (pretrain until the
//! probe suite clears 0.9 accuracy, then verify that downstream
//! fine-tuning degrades it while the projected methods recover it) and
//! are shared by the CLI examples and the acceptance suite.

use crate::data::SceneSpec;
use crate::io::{DataConfig, RunConfig};
use crate::model::ModelConfig;
use crate::optim::{LvNormalization, MaskGranularity, MdgdConfig, Method};

/// Benchmark scene: 6 attributes × 4 categories over 8 patches.
pub fn bench_scene() -> SceneSpec {
    SceneSpec {
        attributes: 6,
        categories: 4,
        noise_sigma: 0.1,
        visual_tokens: 8,
        d_img: 32,
    }
}

/// Benchmark model: d_model 32, 4 layers, adapter + last 2 layers trainable.
pub fn bench_model(seed: u64) -> ModelConfig {
    ModelConfig {
        d_img: 32,
        visual_tokens: 8,
        vocab: 64,
        d_model: 32,
        n_layers: 4,
        n_heads: 4,
        d_ff: 128,
        max_seq: 24,
        trainable_last_k: 2,
        train_output_head: true,
        seed,
    }
}

pub fn bench_data(data_seed: u64) -> DataConfig {
    DataConfig {
        scene: bench_scene(),
        n_pretrain: 2048,
        n_probe: 256,
        n_downstream: 512,
        n_eval: 256,
        focus: 0,
        data_seed,
    }
}

/// Pretraining stage: plain SGD on the rich describe task.
pub const PRETRAIN_ETA: f64 = 1.0;
pub const PRETRAIN_STEPS: usize = 3000;
pub const PRETRAIN_BATCH: usize = 8;

/// Downstream stage.
pub const FINETUNE_ETA: f64 = 0.5;
pub const FINETUNE_STEPS: usize = 800;
pub const FINETUNE_BATCH: usize = 8;

pub fn pretrain_run_config(seed: u64, output_dir: &str) -> RunConfig {
    RunConfig {
        seed,
        output_dir: output_dir.to_string(),
        model: bench_model(seed ^ 0xA5A5),
        data: bench_data(seed ^ 0x5A5A),
        optim: MdgdConfig {
            eta: PRETRAIN_ETA,
            method: Method::Finetune,
            alpha: 1.0,
            mask_granularity: MaskGranularity::Block,
            eps_proj: crate::optim::DEFAULT_EPS_PROJ,
            lv_normalization: LvNormalization::Mean,
            steps: PRETRAIN_STEPS,
            batch_size: PRETRAIN_BATCH,
        },
    }
}

pub fn finetune_run_config(seed: u64, method: Method, alpha: f64, output_dir: &str) -> RunConfig {
    let mut cfg = pretrain_run_config(seed, output_dir);
    cfg.optim.method = method;
    cfg.optim.alpha = alpha;
    cfg.optim.eta = FINETUNE_ETA;
    cfg.optim.steps = FINETUNE_STEPS;
    cfg.optim.batch_size = FINETUNE_BATCH;
    cfg
}
