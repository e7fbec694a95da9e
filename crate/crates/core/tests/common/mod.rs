#![allow(dead_code)]

use spectra_core::corpus::{generate_synthetic, Dialog, SyntheticConfig};
use spectra_core::encoders::EncoderConfig;
use spectra_core::model::ModelConfig;
use spectra_core::train::TrainConfig;

pub fn tiny_encoder(d_h: usize, layers: usize) -> EncoderConfig {
    EncoderConfig {
        num_layers: layers,
        d_h,
        num_heads: 2,
        ffn_dim: 2 * d_h,
        dropout: 0.0,
        conv_pos_kernel: 4,
        conv_pos_groups: 2,
    }
}

pub fn tiny_model(d_h: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        text: tiny_encoder(d_h, layers),
        speech: tiny_encoder(d_h, layers),
        ..ModelConfig::default()
    }
}

pub fn dialogs(n: usize, seed: u64) -> Vec<Dialog> {
    generate_synthetic(&SyntheticConfig { num_dialogs: n, ..Default::default() }, seed).unwrap()
}

/// A short run on a small model; fast enough for many repetitions.
pub fn quick_config(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 2,
        max_samples: Some(12),
        model: tiny_model(16, 1),
        ..Default::default()
    }
}
