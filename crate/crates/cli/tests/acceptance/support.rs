use spectra_core::corpus::{generate_synthetic, Dialog, SyntheticConfig};
use spectra_core::encoders::EncoderConfig;
use spectra_core::model::ModelConfig;

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
    generate_synthetic(&SyntheticConfig { num_dialogs: n, ..Default::default() }, seed).expect("synthetic corpus")
}
