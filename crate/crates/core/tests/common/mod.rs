#![allow(dead_code)]

use iwm_core::data::{DatasetRef, SynthSpec};
use iwm_core::pretrain::{Model, PretrainConfig, TrainState};
use iwm_core::vit::{Conditioning, PredictorConfig, ViTConfig};

pub fn tiny_encoder() -> ViTConfig {
    ViTConfig {
        image_size: 16,
        patch: 4,
        dim: 16,
        depth: 1,
        heads: 2,
        ..Default::default()
    }
}

pub fn tiny_predictor(conditioning: Conditioning) -> PredictorConfig {
    PredictorConfig {
        depth: 1,
        dim: 12,
        heads: 2,
        mlp_ratio: 2,
        conditioning,
        action_dim: 8,
        action_tokens: 2,
    }
}

pub fn tiny_config(conditioning: Conditioning) -> PretrainConfig {
    PretrainConfig {
        data: DatasetRef::Synthetic(SynthSpec::new(2, 8, 16, 3)),
        epochs: 2,
        batch_size: 4,
        encoder: tiny_encoder(),
        predictor: tiny_predictor(conditioning),
        warmup_epochs: 1.0,
        ..Default::default()
    }
}

pub fn tiny_model(conditioning: Conditioning, seed: u64) -> Model {
    let cfg = PretrainConfig {
        seed,
        ..tiny_config(conditioning)
    };
    Model::from_state(&TrainState::init(&cfg), &cfg)
}
pub mod oracles;
