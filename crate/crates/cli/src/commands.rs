//! Subcommand implementations. Each writes its artifacts and returns.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use orthrus_core::bench::{
    ablate_block_size, ablate_objective, check_lossless, emit_report, merge_stats, run_suite, ReportRow,
};
use orthrus_core::data::{
    byte_tokenize, cycle_dominant_transition, detokenize, gen_deterministic_corpus, gen_markov_corpus, load_corpus,
    tokenize_text, Corpus,
};
use orthrus_core::inference::{generate_with, DecodeConfig, DecodeMode, DecodeStats};
use orthrus_core::model::{checkpoint, Parameters};
use orthrus_core::training::{ar_pretrain, distill, Masking, MetricsSink, Objective, StepMetrics, TrainConfig};
use orthrus_core::OrthrusError;
use serde::Serialize;
use serde_json::json;

use crate::config::{DataKind, RunConfig};
use crate::CliError;

/// Metrics log: a header record with the run config, then one record per step.
struct MetricsFile(BufWriter<fs::File>);

impl MetricsFile {
    fn create(path: &Path, header: serde_json::Value) -> Result<Self, CliError> {
        let mut w = BufWriter::new(fs::File::create(path).map_err(OrthrusError::from)?);
        writeln!(w, "{header}").map_err(OrthrusError::from)?;
        Ok(Self(w))
    }
}

impl MetricsSink for MetricsFile {
    fn record(&mut self, m: &StepMetrics) {
        if let Ok(line) = serde_json::to_string(m) {
            let _ = writeln!(self.0, "{line}");
        }
    }
}

fn metrics_path(out: &Path, given: Option<PathBuf>) -> PathBuf {
    given.unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".metrics.jsonl");
        PathBuf::from(s)
    })
}

pub fn build_corpus(run: &RunConfig) -> Result<Corpus, CliError> {
    let d = &run.data;
    let v = run.model.vocab_size;
    let path = || {
        d.path
            .as_ref()
            .map(PathBuf::from)
            .ok_or_else(|| CliError::config("data.path", "required for this data.kind"))
    };
    let corpus = match d.kind {
        DataKind::Deterministic => gen_deterministic_corpus(&d.pattern, d.tokens, v, d.seed)?,
        DataKind::Markov => gen_markov_corpus(&cycle_dominant_transition(d.states, d.dominant), d.tokens, v, d.seed)?,
        DataKind::Bytes => byte_tokenize(&path()?)?,
        DataKind::File => load_corpus(&path()?)?,
    };
    if corpus.vocab_size != v {
        return Err(CliError::config(
            "model.vocab_size",
            format!("corpus uses {} symbols but model.vocab_size is {v}", corpus.vocab_size),
        ));
    }
    Ok(corpus)
}

fn checkpoint_meta(run: &RunConfig, extra: &[(&str, String)]) -> checkpoint::Metadata {
    let mut meta = checkpoint::Metadata::new();
    meta.insert("run_config".into(), run.to_json().to_string());
    for (k, v) in extra {
        meta.insert((*k).into(), v.clone());
    }
    meta
}

pub fn pretrain(run: &RunConfig, out: &Path, metrics: Option<PathBuf>) -> Result<(), CliError> {
    let corpus = build_corpus(run)?;
    info!("pretraining on {} tokens", corpus.total_tokens());
    let mpath = metrics_path(out, metrics);
    let mut sink = MetricsFile::create(&mpath, json!({ "run_config": run.to_json(), "checkpoint_hash": null }))?;
    let (params, report) = ar_pretrain(&corpus, &run.model, &run.train, &mut sink)?;
    sink.0.flush().map_err(OrthrusError::from)?;
    checkpoint::save(out, &params, &checkpoint_meta(run, &[("stage", "pretrain".into())]))?;
    info!(
        "final loss {:.4} after {} steps; wrote {}",
        report.final_loss,
        report.losses.len(),
        out.display()
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(Parameters, String), CliError> {
    if !path.exists() {
        return Err(CliError::Input(format!("checkpoint {} does not exist", path.display())));
    }
    let (params, _) = checkpoint::load(path)?;
    Ok((params, checkpoint::content_hash(path)?))
}

/// Use the checkpoint's shape; warn if the config asked for another.
fn adopt_model(run: &mut RunConfig, params: &Parameters, explicit_model: bool) {
    if explicit_model && run.model != params.config {
        warn!("model.* settings differ from the checkpoint; using the checkpoint's shape");
    }
    run.model = params.config.clone();
}

pub fn distill_cmd(
    run: &mut RunConfig,
    explicit_model: bool,
    backbone: &Path,
    out: &Path,
    metrics: Option<PathBuf>,
) -> Result<(), CliError> {
    let (mut params, hash) = load_checkpoint(backbone)?;
    if !params.is_sealed() {
        return Err(OrthrusError::Unsealed.into());
    }
    adopt_model(run, &params, explicit_model);
    let before = params.frozen_checksum();
    let corpus = build_corpus(run)?;
    let mpath = metrics_path(out, metrics);
    let mut sink = MetricsFile::create(&mpath, json!({ "run_config": run.to_json(), "checkpoint_hash": hash }))?;
    let report = distill(&mut params, &corpus, &run.train, &mut sink)?;
    sink.0.flush().map_err(OrthrusError::from)?;
    let after = params.frozen_checksum();
    if after != before {
        return Err(OrthrusError::ChecksumMismatch {
            expected: before,
            found: after,
        }
        .into());
    }
    checkpoint::save(
        out,
        &params,
        &checkpoint_meta(run, &[("stage", "distill".into()), ("backbone_hash", hash)]),
    )?;
    info!(
        "distilled {} trainable parameters ({:.1}% of total); final loss {:.4}",
        report.trainable_params,
        report.trainable_fraction * 100.0,
        report.final_loss
    );
    Ok(())
}

pub fn read_prompts(path: &Path, vocab_size: usize) -> Result<Vec<Vec<u32>>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read prompts {}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| tokenize_text(l, vocab_size).map_err(CliError::from))
        .collect()
}

fn decode_config(run: &RunConfig) -> DecodeConfig {
    DecodeConfig {
        max_new_tokens: run.decode.max_new_tokens,
        temperature: run.decode.temperature,
        seed: run.decode.seed,
        eos: run.decode.eos,
        block_size: run.decode.k,
    }
}

#[derive(Serialize)]
struct Record {
    prompt_id: usize,
    prompt: String,
    tokens: Vec<u32>,
    text: String,
    stats: DecodeStats,
}

pub fn generate_cmd(
    run: &mut RunConfig,
    explicit_model: bool,
    ckpt: &Path,
    prompts: &Path,
    mode: DecodeMode,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let (params, hash) = load_checkpoint(ckpt)?;
    adopt_model(run, &params, explicit_model);
    let v = params.config.vocab_size;
    let prompts = read_prompts(prompts, v)?;
    let cfg = decode_config(run);
    let mut records = Vec::with_capacity(prompts.len());
    for (i, p) in prompts.iter().enumerate() {
        let g = generate_with(mode, &params, p, &cfg)?;
        records.push(Record {
            prompt_id: i,
            prompt: detokenize(p, v),
            text: detokenize(&g.tokens, v),
            tokens: g.tokens,
            stats: g.stats,
        });
    }
    let doc = json!({
        "run_config": run.to_json(),
        "checkpoint_hash": hash,
        "mode": mode.as_str(),
        "records": records,
    });
    let text = serde_json::to_string_pretty(&doc).map_err(OrthrusError::from)? + "\n";
    match out {
        Some(p) => fs::write(p, text).map_err(OrthrusError::from)?,
        None => std::io::stdout().write_all(text.as_bytes()).map_err(OrthrusError::from)?,
    }
    Ok(())
}

#[derive(Serialize)]
struct ConfigSummary {
    config: String,
    k: Option<usize>,
    tokens: usize,
    passes: usize,
    tpf: f64,
    mean_accept: f64,
    speedup_vs_ar: Option<f64>,
}

pub fn bench_cmd(
    run: &mut RunConfig,
    explicit_model: bool,
    ckpt: &Path,
    prompts: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let (params, hash) = load_checkpoint(ckpt)?;
    adopt_model(run, &params, explicit_model);
    let prompts = read_prompts(prompts, params.config.vocab_size)?;
    let base = decode_config(run);
    let ks = if run.bench.k_values.is_empty() {
        vec![run.decode.k.unwrap_or(params.config.block_size)]
    } else {
        run.bench.k_values.clone()
    };
    let baseline = run_suite(&params, &prompts, DecodeMode::Ar, &base)?;
    let ar_passes = merge_stats(&baseline).decode_forward_passes;
    let mut rows: Vec<ReportRow> = baseline
        .iter()
        .enumerate()
        .map(|(i, r)| ReportRow::from_run(i, "ar", r))
        .collect();
    let summarise = |label: String, k: Option<usize>, s: DecodeStats| ConfigSummary {
        config: label,
        k,
        tokens: s.generated_tokens,
        passes: s.decode_forward_passes,
        tpf: s.tpf().unwrap_or(0.0),
        mean_accept: s.mean_acceptance().unwrap_or(0.0),
        speedup_vs_ar: (s.decode_forward_passes > 0).then(|| ar_passes as f64 / s.decode_forward_passes as f64),
    };
    let mut configs = vec![summarise("ar".into(), None, merge_stats(&baseline))];
    let mut lossless = true;
    for k in ks {
        let cfg = DecodeConfig {
            block_size: Some(k),
            ..base
        };
        let runs = run_suite(&params, &prompts, DecodeMode::Orthrus, &cfg)?;
        if base.temperature == 0.0 {
            if let Err(e) = check_lossless(&runs, &baseline) {
                warn!("K={k}: {e}");
                lossless = false;
            }
        }
        let label = format!("orthrus_k{k}");
        rows.extend(runs.iter().enumerate().map(|(i, r)| ReportRow::from_run(i, &label, r)));
        configs.push(summarise(label, Some(k), merge_stats(&runs)));
    }
    let summary = json!({
        "run_config": run.to_json(),
        "checkpoint_hash": hash,
        "prompts": prompts.len(),
        "lossless": if base.temperature == 0.0 { json!(lossless) } else { json!(null) },
        "configs": configs,
    });
    emit_report(out, &rows, &summary)?;
    info!("wrote {} rows to {}", rows.len(), out.display());
    if !lossless {
        return Err(OrthrusError::LosslessnessViolation { index: 0 }.into());
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AblationKind {
    Objective,
    BlockSize,
    Multistep,
}

fn train_phi(run: &RunConfig, backbone: &Parameters, train: &TrainConfig) -> Result<Parameters, CliError> {
    let corpus = build_corpus(run)?;
    let mut p = backbone.clone();
    distill(&mut p, &corpus, train, &mut ())?;
    Ok(p)
}

pub fn ablate_cmd(
    run: &mut RunConfig,
    explicit_model: bool,
    kind: AblationKind,
    ckpt: &Path,
    prompts: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let (params, hash) = load_checkpoint(ckpt)?;
    adopt_model(run, &params, explicit_model);
    let prompts = read_prompts(prompts, params.config.vocab_size)?;
    let cfg = decode_config(run);
    let rows = match kind {
        AblationKind::BlockSize => {
            let ks = if run.bench.k_values.is_empty() {
                (1..=params.config.block_size).collect()
            } else {
                run.bench.k_values.clone()
            };
            serde_json::to_value(ablate_block_size(&params, &prompts, &ks, &cfg)?)
        }
        AblationKind::Objective => {
            if !params.is_sealed() {
                return Err(OrthrusError::Unsealed.into());
            }
            let kl = train_phi(run, &params, &TrainConfig { objective: Objective::ForwardKl, ..run.train.clone() })?;
            let ce = train_phi(run, &params, &TrainConfig { objective: Objective::CrossEntropy, ..run.train.clone() })?;
            serde_json::to_value(ablate_objective(
                &[(Objective::ForwardKl, &kl), (Objective::CrossEntropy, &ce)],
                &prompts,
                &cfg,
            )?)
        }
        AblationKind::Multistep => {
            if !params.is_sealed() {
                return Err(OrthrusError::Unsealed.into());
            }
            let single = train_phi(run, &params, &TrainConfig { masking: Masking::Full, ..run.train.clone() })?;
            let multi = train_phi(
                run,
                &params,
                &TrainConfig {
                    masking: Masking::ComplementaryHalf,
                    ..run.train.clone()
                },
            )?;
            let s = merge_stats(&run_suite(&single, &prompts, DecodeMode::Orthrus, &cfg)?);
            let m = merge_stats(&run_suite(&multi, &prompts, DecodeMode::Multistep, &cfg)?);
            let row = |variant: &str, s: &DecodeStats| {
                json!({
                    "variant": variant,
                    "tpf": s.tpf().unwrap_or(0.0),
                    "passes": s.decode_forward_passes,
                    "cycles": s.cycles(),
                    "passes_per_cycle": if s.cycles() > 0 { s.decode_forward_passes as f64 / s.cycles() as f64 } else { 0.0 },
                })
            };
            Ok(json!([row("single_step", &s), row("multi_step", &m)]))
        }
    }
    .map_err(OrthrusError::from)?;
    fs::create_dir_all(out).map_err(OrthrusError::from)?;
    let doc = json!({
        "run_config": run.to_json(),
        "checkpoint_hash": hash,
        "ablation": format!("{kind:?}").to_lowercase(),
        "rows": rows,
    });
    fs::write(
        out.join("ablation.json"),
        serde_json::to_string_pretty(&doc).map_err(OrthrusError::from)? + "\n",
    )
    .map_err(OrthrusError::from)?;
    Ok(())
}
