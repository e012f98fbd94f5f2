//! Throughput and memory accounting over prompt suites.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{OrthrusError, Result};
use crate::inference::{generate_with, DecodeConfig, DecodeMode, DecodeStats, GenerationOutput};
use crate::masking::{build_training_batch, AnchorSet};
use crate::model::Parameters;
use crate::par;
use crate::training::{distill_loss, Objective};

pub fn compute_tpf(stats: &DecodeStats) -> Result<f64> {
    stats.tpf()
}

/// Sum the per-run statistics of a suite.
pub fn merge_stats(runs: &[GenerationOutput]) -> DecodeStats {
    let mut total = DecodeStats::default();
    for r in runs {
        let s = &r.stats;
        total.generated_tokens += s.generated_tokens;
        total.decode_forward_passes += s.decode_forward_passes;
        total.prefill_passes += s.prefill_passes;
        total.passes_by_view.ar += s.passes_by_view.ar;
        total.passes_by_view.diffusion += s.passes_by_view.diffusion;
        total.acceptance_lengths.extend_from_slice(&s.acceptance_lengths);
        total.peak_transient_kv_elements = total.peak_transient_kv_elements.max(s.peak_transient_kv_elements);
        total.wall_time_secs += s.wall_time_secs;
    }
    total
}

/// Fail on the first run whose tokens differ between the two suites.
pub fn check_lossless(a: &[GenerationOutput], b: &[GenerationOutput]) -> Result<()> {
    if a.len() != b.len() {
        return Err(OrthrusError::Config(format!(
            "suites differ in size: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    match a.iter().zip(b).position(|(x, y)| x.tokens != y.tokens) {
        Some(index) => Err(OrthrusError::LosslessnessViolation { index }),
        None => Ok(()),
    }
}

/// Baseline passes over accelerated passes, for runs that committed the
/// same tokens.
pub fn speedup_vs_baseline(orthrus: &[GenerationOutput], baseline: &[GenerationOutput]) -> Result<f64> {
    check_lossless(orthrus, baseline)?;
    let o = merge_stats(orthrus).decode_forward_passes;
    let b = merge_stats(baseline).decode_forward_passes;
    if o == 0 {
        return Err(OrthrusError::Undefined("speedup with zero decode passes"));
    }
    Ok(b as f64 / o as f64)
}

/// Decode every prompt; results keep prompt order.
pub fn run_suite(
    params: &Parameters,
    prompts: &[Vec<u32>],
    mode: DecodeMode,
    cfg: &DecodeConfig,
) -> Result<Vec<GenerationOutput>> {
    par::map_slice(prompts, |p| generate_with(mode, params, p, cfg))
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryRow {
    pub length: usize,
    pub orthrus_committed_elements: usize,
    pub ar_committed_elements: usize,
    pub transient_block_elements: usize,
    /// Peak Orthrus state minus AR state.
    pub delta: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub rows: Vec<MemoryRow>,
}

impl MemoryReport {
    pub fn delta_is_constant(&self) -> bool {
        self.rows.windows(2).all(|w| w[0].delta == w[1].delta)
    }

    pub fn committed_match(&self) -> bool {
        self.rows
            .iter()
            .all(|r| r.orthrus_committed_elements == r.ar_committed_elements)
    }
}

/// Decode to each target length with both decoders and compare cache sizes.
pub fn cache_overhead_report(params: &Parameters, prompt: &[u32], lengths: &[usize]) -> Result<MemoryReport> {
    let rows = par::map_slice(lengths, |&len| -> Result<MemoryRow> {
        if len > params.config.max_seq_len || len <= prompt.len() {
            return Err(OrthrusError::Config(format!(
                "length {len} must lie in ({}, {}]",
                prompt.len(),
                params.config.max_seq_len
            )));
        }
        let cfg = DecodeConfig {
            max_new_tokens: len - prompt.len(),
            ..Default::default()
        };
        let o = cache_after(params, prompt, DecodeMode::Orthrus, &cfg)?;
        let a = cache_after(params, prompt, DecodeMode::Ar, &cfg)?;
        Ok(MemoryRow {
            length: len,
            orthrus_committed_elements: o.0,
            ar_committed_elements: a.0,
            transient_block_elements: o.1,
            delta: (o.0 + o.1) as i64 - a.0 as i64,
        })
    });
    Ok(MemoryReport {
        rows: rows.into_iter().collect::<Result<_>>()?,
    })
}

/// Final committed cache elements and the peak transient block buffer.
fn cache_after(params: &Parameters, prompt: &[u32], mode: DecodeMode, cfg: &DecodeConfig) -> Result<(usize, usize)> {
    let out = generate_with(mode, params, prompt, cfg)?;
    Ok((
        out.stats.committed_cache_elements,
        out.stats.peak_transient_kv_elements,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSizeRow {
    pub k: usize,
    pub tpf: f64,
    pub passes: usize,
    pub tokens: usize,
    pub mean_accept: f64,
}

/// TPF of the suite at each inference block size.
pub fn ablate_block_size(
    params: &Parameters,
    prompts: &[Vec<u32>],
    k_values: &[usize],
    cfg: &DecodeConfig,
) -> Result<Vec<BlockSizeRow>> {
    k_values
        .iter()
        .map(|&k| {
            let c = DecodeConfig {
                block_size: Some(k),
                ..*cfg
            };
            let s = merge_stats(&run_suite(params, prompts, DecodeMode::Orthrus, &c)?);
            Ok(BlockSizeRow {
                k,
                tpf: s.tpf()?,
                passes: s.decode_forward_passes,
                tokens: s.generated_tokens,
                mean_accept: s.mean_acceptance().unwrap_or(0.0),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveRow {
    pub objective: Objective,
    /// Mean negative log-likelihood the diffusion view assigns to the
    /// committed outputs, block by block (lower is better).
    pub accuracy_proxy_nll: f64,
    pub tpf: f64,
}

/// Diffusion-view NLL of `tokens` over consecutive blocks anchored at
/// `1, 1 + K, …`.
pub fn block_nll(params: &Parameters, tokens: &[u32]) -> Result<Option<f64>> {
    let k = params.config.block_size;
    let anchors: Vec<usize> = (1..).step_by(k).take_while(|a| a + k <= tokens.len()).collect();
    if anchors.is_empty() {
        return Ok(None);
    }
    let set = AnchorSet::new(anchors, k, tokens.len())?;
    let batch = build_training_batch(tokens, &set, params.config.mask_token_id())?;
    Ok(Some(distill_loss(params, &batch, Objective::CrossEntropy)))
}

/// Compare checkpoints that differ only in distillation objective. Their
/// greedy outputs must agree.
pub fn ablate_objective(
    variants: &[(Objective, &Parameters)],
    prompts: &[Vec<u32>],
    cfg: &DecodeConfig,
) -> Result<Vec<ObjectiveRow>> {
    let greedy = DecodeConfig {
        temperature: 0.0,
        ..*cfg
    };
    let mut reference: Option<Vec<GenerationOutput>> = None;
    let mut rows = Vec::new();
    for &(objective, params) in variants {
        let runs = run_suite(params, prompts, DecodeMode::Orthrus, &greedy)?;
        if let Some(r) = &reference {
            check_lossless(r, &runs)?;
        }
        let nlls: Vec<f64> = runs
            .iter()
            .map(|r| block_nll(params, &r.tokens))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        let nll = if nlls.is_empty() {
            f64::NAN
        } else {
            nlls.iter().sum::<f64>() / nlls.len() as f64
        };
        rows.push(ObjectiveRow {
            objective,
            accuracy_proxy_nll: nll,
            tpf: merge_stats(&runs).tpf()?,
        });
        reference.get_or_insert(runs);
    }
    Ok(rows)
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub prompt_id: usize,
    pub config: String,
    pub tokens: usize,
    pub passes: usize,
    pub tpf: f64,
    pub mean_accept: f64,
}

impl ReportRow {
    pub fn from_run(prompt_id: usize, config: &str, run: &GenerationOutput) -> Self {
        let s = &run.stats;
        Self {
            prompt_id,
            config: config.to_string(),
            tokens: s.generated_tokens,
            passes: s.decode_forward_passes,
            tpf: s.tpf().unwrap_or(0.0),
            mean_accept: s.mean_acceptance().unwrap_or(0.0),
        }
    }
}

pub const CSV_HEADER: [&str; 6] = ["prompt_id", "config", "tokens", "passes", "tpf", "mean_accept"];

/// Write `report.csv` and `summary.json` into `dir`.
pub fn emit_report<S: Serialize>(dir: &Path, rows: &[ReportRow], summary: &S) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("report.csv")).map_err(csv_err)?;
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.prompt_id.to_string(),
            r.config.clone(),
            r.tokens.to_string(),
            r.passes.to_string(),
            format!("{:.6}", r.tpf),
            format!("{:.6}", r.mean_accept),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    let json = serde_json::to_string_pretty(summary)?;
    fs::write(dir.join("summary.json"), json + "\n")?;
    Ok(())
}

fn csv_err(e: csv::Error) -> OrthrusError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => OrthrusError::Io(io),
        other => OrthrusError::Format(format!("{other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(tokens: Vec<u32>, generated: usize, passes: usize, accept: Vec<usize>) -> GenerationOutput {
        GenerationOutput {
            tokens,
            stats: DecodeStats {
                generated_tokens: generated,
                decode_forward_passes: passes,
                acceptance_lengths: accept,
                ..Default::default()
            },
        }
    }

    #[test]
    fn tpf_examples() {
        let s = DecodeStats {
            generated_tokens: 100,
            decode_forward_passes: 20,
            ..Default::default()
        };
        assert_eq!(compute_tpf(&s).unwrap(), 5.0);
        let s = DecodeStats {
            generated_tokens: 5,
            decode_forward_passes: 2,
            ..Default::default()
        };
        assert_eq!(compute_tpf(&s).unwrap(), 2.5);
        assert!(matches!(
            compute_tpf(&DecodeStats::default()),
            Err(OrthrusError::Undefined(_))
        ));
    }

    #[test]
    fn speedup_is_pass_ratio() {
        let o = vec![run(vec![1, 2], 1, 25, vec![1])];
        let b = vec![run(vec![1, 2], 1, 100, vec![1])];
        assert_eq!(speedup_vs_baseline(&o, &b).unwrap(), 4.0);
        assert_eq!(speedup_vs_baseline(&b, &b).unwrap(), 1.0);
        let c = vec![run(vec![1, 3], 1, 100, vec![1])];
        assert!(matches!(
            speedup_vs_baseline(&o, &c),
            Err(OrthrusError::LosslessnessViolation { index: 0 })
        ));
    }

    #[test]
    fn empty_report_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        emit_report(dir.path(), &[], &serde_json::json!({})).unwrap();
        let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert_eq!(csv, "prompt_id,config,tokens,passes,tpf,mean_accept\n");
    }
}
