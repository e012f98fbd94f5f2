mod common;

use common::*;
use orthrus_core::bench::{
    ablate_block_size, ablate_objective, block_nll, cache_overhead_report, check_lossless, emit_report, merge_stats,
    run_suite, speedup_vs_baseline, ReportRow, CSV_HEADER,
};
use orthrus_core::inference::{DecodeConfig, DecodeMode};
use orthrus_core::training::{distill, Objective, TrainConfig};
use orthrus_core::OrthrusError;

fn greedy(n: usize) -> DecodeConfig {
    DecodeConfig {
        max_new_tokens: n,
        ..Default::default()
    }
}

#[test]
fn pattern_model_accepts_every_block_at_its_training_size() {
    let prompts = prompts_from(det_corpus(), 6);
    // 24 generated tokens split evenly into blocks of K + 1 for each K here
    for k in [1usize, 2, 3, 5, 7] {
        let p = det_distilled_at(k);
        let rows = ablate_block_size(&p, &prompts, &[k], &greedy(25)).unwrap();
        let r = &rows[0];
        assert_eq!(r.tokens, 6 * 24);
        assert_eq!(r.tpf, (k + 1) as f64 / 2.0, "K={k}");
        assert_eq!(r.mean_accept, (k + 1) as f64);
    }
}

#[test]
fn smaller_inference_blocks_stay_within_bounds() {
    let prompts = prompts_from(det_corpus(), 6);
    let rows = ablate_block_size(det_model(), &prompts, &[1, 2, 3, 4, 5, 6, 7, 8], &greedy(25)).unwrap();
    assert!(rows[0].tpf <= 1.0);
    for r in &rows {
        assert!(r.tpf >= 0.5 && r.tpf <= (r.k + 1) as f64 / 2.0, "{r:?}");
        let fast = run_suite(det_model(), &prompts, DecodeMode::Orthrus, &DecodeConfig { block_size: Some(r.k), ..greedy(25) }).unwrap();
        let slow = run_suite(det_model(), &prompts, DecodeMode::Ar, &greedy(25)).unwrap();
        check_lossless(&fast, &slow).unwrap();
    }
    assert!(rows[7].tpf >= rows[1].tpf);
}

#[test]
fn larger_blocks_do_not_lower_throughput() {
    let prompts = prompts_from(markov_heldout(), 20);
    let rows = ablate_block_size(&markov_distilled().0, &prompts, &[1, 2, 8], &greedy(48)).unwrap();
    assert_eq!(rows.iter().map(|r| r.k).collect::<Vec<_>>(), vec![1, 2, 8]);
    assert!(rows[0].tpf <= 1.0);
    assert!(rows[2].tpf >= rows[1].tpf, "{rows:?}");
}

#[test]
fn speedup_is_pass_ratio_of_identical_outputs() {
    let prompts = prompts_from(det_corpus(), 4);
    // 27 generated tokens fill exactly three blocks of nine
    let fast = run_suite(det_model(), &prompts, DecodeMode::Orthrus, &greedy(28)).unwrap();
    let slow = run_suite(det_model(), &prompts, DecodeMode::Ar, &greedy(28)).unwrap();
    check_lossless(&fast, &slow).unwrap();
    let s = speedup_vs_baseline(&fast, &slow).unwrap();
    assert_eq!(s, 4.5);
    assert_eq!(merge_stats(&slow).tpf().unwrap(), 1.0);
    let mut broken = slow.clone();
    broken[2].tokens[5] ^= 1;
    assert!(matches!(
        speedup_vs_baseline(&fast, &broken),
        Err(OrthrusError::LosslessnessViolation { index: 2 })
    ));
}

#[test]
fn suite_keeps_prompt_order() {
    let prompts = prompts_from(det_corpus(), 8);
    let runs = run_suite(det_model(), &prompts, DecodeMode::Orthrus, &greedy(10)).unwrap();
    for (p, r) in prompts.iter().zip(&runs) {
        assert_eq!(&r.tokens[..p.len()], &p[..]);
    }
}

#[test]
fn report_files_are_reproducible() {
    let prompts = prompts_from(det_corpus(), 5);
    let write = |dir: &std::path::Path| {
        let runs = run_suite(det_model(), &prompts, DecodeMode::Orthrus, &greedy(20)).unwrap();
        let rows: Vec<ReportRow> = runs.iter().enumerate().map(|(i, r)| ReportRow::from_run(i, "orthrus", r)).collect();
        emit_report(dir, &rows, &merge_stats(&runs)).unwrap();
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write(a.path());
    write(b.path());
    for f in ["report.csv", "summary.json"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let mut reader = csv::Reader::from_path(a.path().join("report.csv")).unwrap();
    assert_eq!(reader.headers().unwrap().iter().collect::<Vec<_>>(), CSV_HEADER.to_vec());
    let rows: Vec<ReportRow> = reader.deserialize().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.config == "orthrus" && r.tokens == 19));
}

#[test]
fn cache_overhead_is_one_block() {
    let p = det_model();
    let report = cache_overhead_report(p, &[0, 1, 2], &[32, 128, 400]).unwrap();
    assert!(report.committed_match());
    assert!(report.delta_is_constant());
    let per_block = 2 * p.config.n_layers * p.config.block_size * p.config.d_model;
    assert!(report.rows.iter().all(|r| r.transient_block_elements == per_block));
}

#[test]
fn objective_variants_agree_on_outputs() {
    let mut ce = markov_backbone().clone();
    let cfg = TrainConfig {
        epochs: 2,
        objective: Objective::CrossEntropy,
        ..distill_config(MARKOV_SEP)
    };
    distill(&mut ce, markov_corpus(), &cfg, &mut ()).unwrap();
    let mut kl = markov_backbone().clone();
    distill(&mut kl, markov_corpus(), &TrainConfig { objective: Objective::ForwardKl, ..cfg.clone() }, &mut ()).unwrap();
    let prompts = prompts_from(markov_heldout(), 10);
    let rows = ablate_objective(
        &[(Objective::ForwardKl, &kl), (Objective::CrossEntropy, &ce)],
        &prompts,
        &greedy(40),
    )
    .unwrap();
    assert_eq!(rows.len(), 2);
    let k = markov_backbone().config.block_size as f64;
    for r in &rows {
        assert!(r.tpf >= 0.5 && r.tpf <= k + 1.0, "{r:?}");
        assert!(r.accuracy_proxy_nll.is_finite() && r.accuracy_proxy_nll > 0.0);
    }
}

#[test]
fn block_nll_needs_a_full_block() {
    let p = det_model();
    assert_eq!(block_nll(p, &[0, 1, 2]).unwrap(), None);
    let tokens: Vec<u32> = (0..40).map(|i| i % 3).collect();
    let nll = block_nll(p, &tokens).unwrap().unwrap();
    assert!(nll < 0.1, "{nll}");
}
