//! Desk-scale models shared by the integration tests. Each is trained once
//! per test binary.
#![allow(dead_code)]

use std::sync::OnceLock;

use orthrus_core::data::{cycle_dominant_transition, gen_deterministic_corpus, gen_markov_corpus, Corpus};
use orthrus_core::model::{ModelConfig, Parameters};
use orthrus_core::training::{ar_pretrain, distill, Masking, TrainConfig, TrainReport};

pub const MARKOV_STATES: usize = 8;
pub const MARKOV_VOCAB: usize = 9;
pub const MARKOV_SEP: u32 = 8;
pub const DET_VOCAB: usize = 4;
pub const DET_SEP: u32 = 3;

pub fn markov_transition() -> Vec<Vec<f64>> {
    cycle_dominant_transition(MARKOV_STATES, 0.8)
}

pub fn markov_corpus() -> &'static Corpus {
    static C: OnceLock<Corpus> = OnceLock::new();
    C.get_or_init(|| gen_markov_corpus(&markov_transition(), 60_000, MARKOV_VOCAB, 0).unwrap())
}

pub fn markov_heldout() -> &'static Corpus {
    static C: OnceLock<Corpus> = OnceLock::new();
    C.get_or_init(|| gen_markov_corpus(&markov_transition(), 20_000, MARKOV_VOCAB, 1).unwrap())
}

pub fn desk_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 4,
        d_model: 32,
        vocab_size,
        max_seq_len: 512,
        block_size: 8,
        rope_base: 10_000.0,
        mlp_hidden: 64,
    }
}

pub fn pretrain_config(separator: u32) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        epochs: 3,
        grad_accum: 8,
        seq_len: 128,
        blocks_per_seq: 8,
        separator: Some(separator),
        ..Default::default()
    }
}

pub fn distill_config(separator: u32) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        epochs: 12,
        grad_accum: 16,
        seq_len: 256,
        blocks_per_seq: 16,
        separator: Some(separator),
        ..Default::default()
    }
}

/// Sealed backbone with the diffusion view still at its initial copy.
pub fn markov_backbone() -> &'static Parameters {
    static P: OnceLock<Parameters> = OnceLock::new();
    P.get_or_init(|| {
        let cfg = desk_config(MARKOV_VOCAB);
        ar_pretrain(markov_corpus(), &cfg, &pretrain_config(MARKOV_SEP), &mut ())
            .unwrap()
            .0
    })
}

pub fn markov_distilled() -> &'static (Parameters, TrainReport) {
    static P: OnceLock<(Parameters, TrainReport)> = OnceLock::new();
    P.get_or_init(|| {
        let mut p = markov_backbone().clone();
        let r = distill(&mut p, markov_corpus(), &distill_config(MARKOV_SEP), &mut ()).unwrap();
        (p, r)
    })
}

/// Same backbone, diffusion view trained on half-masked complementary blocks.
pub fn markov_multistep() -> &'static Parameters {
    static P: OnceLock<Parameters> = OnceLock::new();
    P.get_or_init(|| {
        let mut p = markov_backbone().clone();
        let cfg = TrainConfig {
            masking: Masking::ComplementaryHalf,
            ..distill_config(MARKOV_SEP)
        };
        distill(&mut p, markov_corpus(), &cfg, &mut ()).unwrap();
        p
    })
}

pub fn det_corpus() -> &'static Corpus {
    static C: OnceLock<Corpus> = OnceLock::new();
    C.get_or_init(|| gen_deterministic_corpus(&[0, 1, 2], 20_000, DET_VOCAB, 0).unwrap())
}

pub fn det_backbone() -> &'static Parameters {
    static P: OnceLock<Parameters> = OnceLock::new();
    P.get_or_init(|| {
        let cfg = desk_config(DET_VOCAB);
        ar_pretrain(det_corpus(), &cfg, &pretrain_config(DET_SEP), &mut ())
            .unwrap()
            .0
    })
}

/// The `abc` backbone with its diffusion view distilled at block size `k`.
pub fn det_distilled_at(k: usize) -> Parameters {
    let mut p = det_backbone().clone();
    p.config.block_size = k;
    distill(&mut p, det_corpus(), &pretrain_config(DET_SEP), &mut ()).unwrap();
    p
}

/// Backbone and diffusion view trained on the repeating `abc` corpus.
pub fn det_model() -> &'static Parameters {
    static P: OnceLock<Parameters> = OnceLock::new();
    P.get_or_init(|| det_distilled_at(8))
}

/// `n` prompts of length 4..=32 cut from `corpus` at spread-out offsets.
pub fn prompts_from(corpus: &Corpus, n: usize) -> Vec<Vec<u32>> {
    let stream = corpus.concatenated();
    (0..n)
        .map(|i| {
            let len = 4 + (i * 7) % 29;
            let start = (i * 331) % (stream.len() - len);
            stream[start..start + len].to_vec()
        })
        .collect()
}
