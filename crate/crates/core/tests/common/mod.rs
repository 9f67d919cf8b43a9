#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ruig::codec::{TokenId, FIRST_WORD, MAX_SEQ_LEN};
use ruig::model::{ModelConfig, ParamStore};
use ruig::tensor::Tensor;

pub const VOCAB: usize = FIRST_WORD + 12;

/// 16x8 image, patch 4, d=16, one encoder and one decoder layer.
pub fn tiny() -> ModelConfig {
    ModelConfig {
        image_width: 16,
        image_height: 8,
        channels: 3,
        patch: 4,
        d_model: 16,
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        vocab_size: VOCAB,
        max_len: MAX_SEQ_LEN,
    }
}

pub fn random_image(cfg: &ModelConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.image_height * cfg.image_width * cfg.channels;
    Tensor::new(
        vec![cfg.image_height, cfg.image_width, cfg.channels],
        (0..n).map(|_| rng.gen::<f64>()).collect(),
    )
    .unwrap()
}

pub fn words(ids: &[usize]) -> Vec<TokenId> {
    ids.iter().map(|i| FIRST_WORD + i).collect()
}

pub fn params(cfg: &ModelConfig, seed: u64) -> ParamStore {
    ParamStore::init(cfg, seed).unwrap()
}
