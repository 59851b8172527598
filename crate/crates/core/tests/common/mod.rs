#![allow(dead_code)]

use magvlt::model::{Attention, ModelConfig, ModelParams};
use magvlt::synth::{make_split, Sample};
use magvlt::train::{encode_samples, Encoded};
use magvlt::vocab::{Layout, VOCAB_SIZE};

/// 4×4 grids and captions of up to 8 words: 28 positions.
pub fn small_layout() -> Layout {
    Layout::new(4, 8)
}

pub fn small_config(attention: Attention) -> ModelConfig {
    let layout = small_layout();
    ModelConfig {
        layers: 2,
        dim: 16,
        heads: 2,
        seq_len: layout.seq_len(),
        vocab_size: VOCAB_SIZE,
        max_text: layout.n_text,
        attention,
        tie_embeddings: true,
        ffn_mult: 2,
    }
}

pub fn small_model(attention: Attention, seed: u64) -> ModelParams<f64> {
    ModelParams::init(small_config(attention), seed).unwrap()
}

pub fn small_data(n: usize, seed: u64) -> (Vec<Sample>, Vec<Encoded>) {
    let split = make_split(n, 1, seed, 4).unwrap();
    let enc = encode_samples(&split.train, &small_layout()).unwrap();
    (split.train, enc)
}

/// Toy training settings shrunk to the small model.
pub fn small_train_config(attention: Attention, batch: usize, steps: u64) -> magvlt::train::TrainConfig {
    let mut rc = magvlt::config::RunConfig::toy();
    if attention == Attention::Causal {
        rc.set("objective", "ar").unwrap();
    }
    let mut tc = rc.train().unwrap();
    tc.model = small_config(attention);
    tc.layout = small_layout();
    tc.batch = batch;
    tc.steps = steps;
    tc
}
