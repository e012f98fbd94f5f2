mod common;

use common::*;
use orthrus_core::data::{
    conditional_entropy, cycle_dominant_transition, gen_deterministic_corpus, gen_markov_corpus, pack_sequences,
};
use orthrus_core::inference::{generate_ar_baseline, DecodeConfig};
use orthrus_core::model::{ar_forward, ModelConfig, Parameters, SharedKvCache};
use orthrus_core::tensor::{softmax, Tensor};
use orthrus_core::training::{
    ar_pretrain, ce_loss_variant, distill, distill_eval, distill_loss, eval_nll, grad_check, kl_loss, make_batch,
    JsonLines, Objective, Stencil, TrainConfig,
};
use orthrus_core::OrthrusError;
use proptest::prelude::*;

fn small(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        vocab_size,
        max_seq_len: 64,
        block_size: 4,
        rope_base: 10_000.0,
        mlp_hidden: 32,
    }
}

fn quick(separator: u32) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        epochs: 1,
        grad_accum: 4,
        seq_len: 32,
        blocks_per_seq: 4,
        separator: Some(separator),
        ..Default::default()
    }
}

fn kl_oracle(p: &[f32], logits: &[f32]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, |a, b| a.max(b as f64));
    let z: f64 = logits.iter().map(|&l| (l as f64 - m).exp()).sum();
    p.iter()
        .zip(logits)
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &l)| pv as f64 * ((pv as f64).ln() - (l as f64 - m - z.ln())))
        .sum()
}

/// Briefly pretrained backbone (so the teacher is not uniform) with a
/// perturbed diffusion view.
fn sharp_model() -> (Parameters, Vec<u32>) {
    let t = cycle_dominant_transition(10, 0.7);
    let corpus = gen_markov_corpus(&t, 4_000, 11, 2).unwrap();
    let (mut p, _) = ar_pretrain(&corpus, &small(11), &quick(10), &mut ()).unwrap();
    p.randomize_diffusion(0.3, 4);
    let seq = gen_markov_corpus(&t, 200, 11, 3).unwrap().concatenated()[..32].to_vec();
    (p, seq)
}

fn pattern_stream(n: usize) -> Vec<u32> {
    (0..n).map(|i| (i % 3) as u32).collect()
}

#[test]
fn pattern_backbone_learns_the_cycle() {
    let p = det_model();
    let nll = eval_nll(p, &pattern_stream(256));
    assert!(nll < 0.01, "held-out nll {nll}");
    let mut cache = SharedKvCache::new(&p.config);
    let out = ar_forward(p, &[0, 1], &mut cache, true).unwrap();
    let row = out.logits.row(1);
    let best = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
    assert_eq!(best, 2);
}

#[test]
fn pattern_diffusion_view_matches_teacher() {
    let p = det_model();
    let tc = pretrain_config(DET_SEP);
    let held = pattern_stream(128);
    let batch = make_batch(p, &held, &tc, 99).unwrap();
    let kl = distill_loss(p, &batch, Objective::ForwardKl);
    assert!(kl < 0.05, "held-out kl {kl}");
}

#[test]
fn markov_backbone_reaches_source_entropy() {
    let h = conditional_entropy(&markov_transition());
    let held = markov_heldout().concatenated();
    let p = markov_backbone();
    let nll: f64 = held.chunks(256).take(40).map(|c| eval_nll(p, c)).sum::<f64>() / 40.0;
    assert!((nll - h).abs() < 0.05, "nll {nll} vs entropy {h}");
}

#[test]
fn training_is_deterministic() {
    let corpus = gen_deterministic_corpus(&[0, 1, 2], 3_000, 4, 5).unwrap();
    let run = || {
        let (mut p, a) = ar_pretrain(&corpus, &small(4), &quick(3), &mut ()).unwrap();
        let b = distill(&mut p, &corpus, &quick(3), &mut ()).unwrap();
        (a.losses, b.losses, p.frozen_checksum(), p)
    };
    let (a1, b1, c1, p1) = run();
    let (a2, b2, c2, p2) = run();
    assert_eq!(a1, a2);
    assert_eq!(b1, b2);
    assert_eq!(c1, c2);
    for id in p1.ids() {
        assert_eq!(p1.get(id).data, p2.get(id).data, "{}", p1.name(id));
    }
}

#[test]
fn distillation_leaves_backbone_untouched() {
    let corpus = gen_deterministic_corpus(&[0, 1, 2], 3_000, 4, 5).unwrap();
    let (mut p, _) = ar_pretrain(&corpus, &small(4), &quick(3), &mut ()).unwrap();
    let frozen: Vec<_> = p.frozen_ids().into_iter().map(|id| p.get(id).data.clone()).collect();
    let sum = p.frozen_checksum();
    distill(&mut p, &corpus, &quick(3), &mut ()).unwrap();
    assert_eq!(p.frozen_checksum(), sum);
    for (id, before) in p.frozen_ids().into_iter().zip(frozen) {
        assert_eq!(p.get(id).data, before);
    }
}

#[test]
fn teacher_is_detached() {
    let (p, tokens) = sharp_model();
    let batch = make_batch(&p, &tokens, &quick(10), 1).unwrap();
    let a = distill_eval(&p, &batch, Objective::ForwardKl);
    for id in p.frozen_ids() {
        assert!(a.grads.get(id).is_none_or(|g| g.iter().all(|&x| x == 0.0)));
    }
    let mut q = p.clone();
    q.randomize_diffusion(0.5, 77);
    let b = distill_eval(&q, &batch, Objective::ForwardKl);
    assert_eq!(a.teacher_rows, b.teacher_rows);
    assert_ne!(a.loss, b.loss);
}

fn rows_strategy() -> impl Strategy<Value = (Vec<f32>, Vec<f32>, usize)> {
    (1usize..5, 2usize..7).prop_flat_map(|(r, v)| {
        (
            prop::collection::vec(0.01f32..1.0, r * v),
            prop::collection::vec(-8.0f32..8.0, r * v),
            Just(v),
        )
    })
}

fn normalise(raw: &[f32], v: usize) -> Tensor {
    let mut t = Tensor::zeros(raw.len() / v, v);
    for (r, chunk) in raw.chunks(v).enumerate() {
        let s: f32 = chunk.iter().sum();
        for (d, x) in t.row_mut(r).iter_mut().zip(chunk) {
            *d = x / s;
        }
    }
    t
}

proptest! {
    #[test]
    fn kl_is_nonnegative_and_matches_oracle((raw, logits, v) in rows_strategy()) {
        let p = normalise(&raw, v);
        let mut s = Tensor::zeros(p.rows, v);
        s.data.copy_from_slice(&logits);
        let got = kl_loss(&p, &s);
        prop_assert!(got >= -1e-9);
        let want: f64 = (0..p.rows).map(|r| kl_oracle(p.row(r), s.row(r))).sum();
        prop_assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0), "{} vs {}", got, want);
        let same = kl_loss(&p, &{
            let mut t = Tensor::zeros(p.rows, v);
            for r in 0..p.rows {
                for (d, x) in t.row_mut(r).iter_mut().zip(p.row(r)) {
                    *d = x.ln();
                }
            }
            t
        });
        prop_assert!(same.abs() < 1e-5);
    }

    #[test]
    fn one_hot_teacher_reduces_kl_to_cross_entropy(
        (_, logits, v) in rows_strategy(),
        seed in 0u32..1000,
    ) {
        let rows = logits.len() / v;
        let targets: Vec<u32> = (0..rows).map(|r| ((seed as usize + r * 3) % v) as u32).collect();
        let mut p = Tensor::zeros(rows, v);
        for (r, &t) in targets.iter().enumerate() {
            p.row_mut(r)[t as usize] = 1.0;
        }
        let mut s = Tensor::zeros(rows, v);
        s.data.copy_from_slice(&logits);
        let kl = kl_loss(&p, &s) / rows as f64;
        let ce = ce_loss_variant(&targets, &s);
        prop_assert!((kl - ce).abs() < 1e-6 * ce.max(1.0));
    }
}

#[test]
fn masked_student_entry_gives_infinite_kl() {
    let p = Tensor::from_vec(1, 3, vec![0.5, 0.5, 0.0]);
    let s = Tensor::from_vec(1, 3, vec![0.0, f32::NEG_INFINITY, 0.0]);
    assert_eq!(kl_loss(&p, &s), f64::INFINITY);
    let q = Tensor::from_vec(1, 3, vec![0.5, 0.5, 0.0]);
    let ok = Tensor::from_vec(1, 3, vec![0.0, 0.0, f32::NEG_INFINITY]);
    assert!(kl_loss(&q, &ok).abs() < 1e-7);
    assert_eq!(softmax(ok.row(0))[2], 0.0);
}

#[test]
fn two_point_error_shrinks_with_epsilon() {
    let (p, tokens) = sharp_model();
    let batch = make_batch(&p, &tokens, &quick(10), 3).unwrap();
    let err = |eps: f32| {
        grad_check(&p, &batch, Objective::ForwardKl, eps, Stencil::TwoPoint, 6, 9).max_rel_err
    };
    // Truncation dominates at large steps and scales as eps².
    let (big, half) = (err(0.2), err(0.1));
    assert!(half < big / 2.0, "{half} vs {big}");
    let four = grad_check(&p, &batch, Objective::ForwardKl, 4e-2, Stencil::FourPoint, 6, 9);
    assert!(four.max_rel_err < 1e-2, "{}", four.max_rel_err);
    assert_eq!(four.frozen_grad_max_abs, 0.0);
}

#[test]
fn pattern_distillation_loss_falls() {
    let corpus = gen_deterministic_corpus(&[0, 1, 2], 6_000, 4, 2).unwrap();
    let (mut p, _) = ar_pretrain(&corpus, &small(4), &quick(3), &mut ()).unwrap();
    let r = distill(&mut p, &corpus, &quick(3), &mut ()).unwrap();
    let n = r.losses.len();
    assert!(n >= 8);
    let head: f32 = r.losses[..4].iter().sum::<f32>() / 4.0;
    let tail: f32 = r.losses[n - 4..].iter().sum::<f32>() / 4.0;
    assert!(tail < head, "{head} -> {tail}");
    assert!(r.trainable_fraction > 0.0 && r.trainable_fraction < 1.0);
}

#[test]
fn metrics_stream_one_json_object_per_step() {
    let corpus = gen_deterministic_corpus(&[0, 1, 2], 2_000, 4, 0).unwrap();
    let mut buf = Vec::new();
    let (_, report) = ar_pretrain(&corpus, &small(4), &quick(3), &mut JsonLines(&mut buf)).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), report.losses.len());
    for (i, v) in lines.iter().enumerate() {
        assert_eq!(v["step"].as_u64(), Some(i as u64));
        assert!(v["loss"].as_f64().unwrap().is_finite());
    }
}

#[test]
fn corpus_too_short_for_one_sequence_is_rejected() {
    let corpus = gen_deterministic_corpus(&[0, 1, 2], 64, 4, 0).unwrap();
    let cfg = TrainConfig {
        seq_len: 256,
        ..quick(3)
    };
    assert!(pack_sequences(&corpus, 256, 3, 0).unwrap().is_empty());
    assert!(matches!(ar_pretrain(&corpus, &small(4), &cfg, &mut ()), Err(OrthrusError::Config(_))));
}

#[test]
fn pattern_model_generates_the_cycle_from_any_phase() {
    let p = det_model();
    for start in 0..3u32 {
        let prompt = vec![start, (start + 1) % 3];
        let out = generate_ar_baseline(p, &prompt, &DecodeConfig { max_new_tokens: 12, ..Default::default() }).unwrap();
        let expect: Vec<u32> = (0..14).map(|i| (start + i) % 3).collect();
        assert_eq!(out.tokens, expect);
    }
}
