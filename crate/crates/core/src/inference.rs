//! Draft/verify decoding over the shared cache.
//!
//! The cache always holds every committed token except the newest one, the
//! *pending* token. A cycle drafts a block anchored at the pending token with
//! the diffusion view, then runs one AR pass over `[pending, drafts…]` which
//! both fills the pending token's cache entry and scores every draft.

use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OrthrusError, Result};
use crate::model::{ar_forward, diffusion_forward, Parameters, SharedKvCache};
use crate::tensor::{argmax, softmax, softmax_t, Tensor};

/// Generation settings shared by every decoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub max_new_tokens: usize,
    /// `0` means greedy.
    pub temperature: f32,
    pub seed: u64,
    /// Stop after committing this token.
    pub eos: Option<u32>,
    /// Draft block length; defaults to the model's `block_size`, which it
    /// may not exceed.
    pub block_size: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Orthrus,
    Ar,
    Multistep,
}

impl DecodeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DecodeMode::Orthrus => "orthrus",
            DecodeMode::Ar => "ar",
            DecodeMode::Multistep => "multistep",
        }
    }
}

impl std::str::FromStr for DecodeMode {
    type Err = OrthrusError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orthrus" => Ok(DecodeMode::Orthrus),
            "ar" => Ok(DecodeMode::Ar),
            "multistep" => Ok(DecodeMode::Multistep),
            _ => Err(OrthrusError::Config(format!(
                "unknown mode {s:?} (expected orthrus, ar or multistep)"
            ))),
        }
    }
}

/// Dispatch on `mode`.
pub fn generate_with(
    mode: DecodeMode,
    params: &Parameters,
    prompt: &[u32],
    cfg: &DecodeConfig,
) -> Result<GenerationOutput> {
    match mode {
        DecodeMode::Orthrus => generate(params, prompt, cfg),
        DecodeMode::Ar => generate_ar_baseline(params, prompt, cfg),
        DecodeMode::Multistep => generate_multistep_variant(params, prompt, cfg),
    }
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 64,
            temperature: 0.0,
            seed: 0,
            eos: None,
            block_size: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DecodeState {
    pub tokens: Vec<u32>,
    pub cache: SharedKvCache,
    /// Distribution the pending token was selected from.
    pub pending_distribution: Vec<f32>,
    pub temperature: f32,
    pub rng: ChaCha8Rng,
}

impl DecodeState {
    pub fn pending_token(&self) -> u32 {
        *self.tokens.last().expect("state always holds a pending token")
    }

    /// Position of the pending token, equal to the cache length.
    pub fn anchor_position(&self) -> usize {
        self.cache.committed_len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DraftResult {
    pub candidates: Vec<u32>,
    /// One distribution per candidate (temperature-scaled when sampling).
    pub draft_dists: Vec<Vec<f32>>,
    /// Key/value elements the draft pass held outside the cache.
    pub transient_kv_elements: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyResult {
    /// `K + 1` AR rows; the last one is the bonus row.
    pub target_dists: Vec<Vec<f32>>,
    /// Tokens committed this cycle (`j`), including the correction.
    pub j: usize,
    pub correction: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassesByView {
    pub ar: usize,
    pub diffusion: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeStats {
    /// Tokens committed after the prefill token.
    pub generated_tokens: usize,
    pub decode_forward_passes: usize,
    pub prefill_passes: usize,
    pub passes_by_view: PassesByView,
    pub acceptance_lengths: Vec<usize>,
    /// Largest block key/value buffer held outside the cache by a draft pass.
    pub peak_transient_kv_elements: usize,
    /// Cache elements when decoding stopped.
    pub committed_cache_elements: usize,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl DecodeStats {
    pub fn cycles(&self) -> usize {
        self.acceptance_lengths.len()
    }

    pub fn tpf(&self) -> Result<f64> {
        if self.decode_forward_passes == 0 {
            return Err(OrthrusError::Undefined("TPF with zero decode passes"));
        }
        Ok(self.generated_tokens as f64 / self.decode_forward_passes as f64)
    }

    pub fn mean_acceptance(&self) -> Option<f64> {
        if self.acceptance_lengths.is_empty() {
            return None;
        }
        Some(self.acceptance_lengths.iter().sum::<usize>() as f64 / self.cycles() as f64)
    }

    /// Counts of each acceptance length; index `j` holds the count for `j`.
    pub fn histogram(&self) -> Vec<usize> {
        let max = self.acceptance_lengths.iter().copied().max().unwrap_or(0);
        let mut h = vec![0; max + 1];
        for &j in &self.acceptance_lengths {
            h[j] += 1;
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationOutput {
    pub tokens: Vec<u32>,
    pub stats: DecodeStats,
}

fn row_distribution(row: &[f32], temperature: f32) -> Vec<f32> {
    if temperature > 0.0 {
        softmax_t(row, temperature)
    } else {
        softmax(row)
    }
}

/// Draw an index from `probs`. All-zero rows cannot occur for softmax output.
pub fn sample_categorical(probs: &[f32], rng: &mut impl Rng) -> u32 {
    let w: Vec<f64> = probs.iter().map(|&p| p as f64).collect();
    let dist = WeightedIndex::new(&w).expect("distribution has positive mass");
    dist.sample(rng) as u32
}

fn select(row: &[f32], dist: &[f32], temperature: f32, rng: &mut impl Rng) -> u32 {
    if temperature > 0.0 {
        sample_categorical(dist, rng)
    } else {
        argmax(row) as u32
    }
}

/// Run the prompt through the AR view and select the first new token.
pub fn prefill(params: &Parameters, prompt: &[u32], temperature: f32, seed: u64) -> Result<DecodeState> {
    if prompt.is_empty() {
        return Err(OrthrusError::EmptyPrompt);
    }
    let max = params.config.max_seq_len;
    if prompt.len() >= max {
        return Err(OrthrusError::CacheOverflow {
            needed: prompt.len() + 1,
            capacity: max,
        });
    }
    let mut cache = SharedKvCache::new(&params.config);
    let out = ar_forward(params, prompt, &mut cache, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let row = out.logits.row(prompt.len() - 1);
    let dist = row_distribution(row, temperature);
    let first = select(row, &dist, temperature, &mut rng);
    let mut tokens = prompt.to_vec();
    tokens.push(first);
    Ok(DecodeState {
        tokens,
        cache,
        pending_distribution: dist,
        temperature,
        rng,
    })
}

/// Draft `k` candidates from `[pending, mask × (k − 1)]`.
pub fn draft_block(params: &Parameters, state: &mut DecodeState, k: usize) -> Result<DraftResult> {
    let pos = state.anchor_position();
    let mask = params.config.mask_token_id();
    let mut block = vec![mask; k];
    block[0] = state.pending_token();
    let positions: Vec<usize> = (pos..pos + k).collect();
    let out = diffusion_forward(params, &block, &positions, &state.cache, None)?;
    Ok(select_drafts(&out.logits, out.transient_kv_elements, state))
}

fn select_drafts(logits: &Tensor, transient_kv_elements: usize, state: &mut DecodeState) -> DraftResult {
    let mut candidates = Vec::with_capacity(logits.rows);
    let mut draft_dists = Vec::with_capacity(logits.rows);
    for r in 0..logits.rows {
        let row = logits.row(r);
        let dist = row_distribution(row, state.temperature);
        let t = select(row, &dist, state.temperature, &mut state.rng);
        candidates.push(t);
        draft_dists.push(dist);
    }
    DraftResult {
        candidates,
        draft_dists,
        transient_kv_elements,
    }
}

/// First divergence between drafts and the AR argmaxes. `target_rows` has
/// one more row than `candidates`; any monotone transform of the logits works.
pub fn consensus_greedy(candidates: &[u32], target_rows: &[&[f32]]) -> (usize, u32) {
    assert_eq!(target_rows.len(), candidates.len() + 1);
    for (k, &c) in candidates.iter().enumerate() {
        let y = argmax(target_rows[k]) as u32;
        if y != c {
            return (k + 1, y);
        }
    }
    let k = candidates.len();
    (k + 1, argmax(target_rows[k]) as u32)
}

/// Speculative rejection sampling: accept `ŷ_k` with probability
/// `min(1, p_k(ŷ_k) / q_k(ŷ_k))`; on the first rejection sample from
/// `max(0, p_k − q_k)` renormalised; if everything is accepted, sample the
/// bonus from the last target row.
pub fn consensus_sampling(
    draft: &DraftResult,
    target_dists: &[Vec<f32>],
    rng: &mut impl Rng,
) -> (usize, u32) {
    let k = draft.candidates.len();
    assert_eq!(target_dists.len(), k + 1);
    for i in 0..k {
        let y = draft.candidates[i] as usize;
        let q = draft.draft_dists[i][y] as f64;
        let p = target_dists[i][y] as f64;
        assert!(q > 0.0, "drafted token has zero draft probability");
        let u: f64 = rng.random();
        if u * q < p {
            continue;
        }
        let residual: Vec<f32> = target_dists[i]
            .iter()
            .zip(&draft.draft_dists[i])
            .map(|(&p, &q)| (p - q).max(0.0))
            .collect();
        let token = if residual.iter().any(|&r| r > 0.0) {
            sample_categorical(&residual, rng)
        } else {
            sample_categorical(&target_dists[i], rng)
        };
        return (i + 1, token);
    }
    (k + 1, sample_categorical(&target_dists[k], rng))
}

/// Score `draft` with one AR pass, run consensus, commit `min(j, budget)`
/// tokens and roll the cache back to exclude the new pending token.
pub fn verify_block(
    params: &Parameters,
    state: &mut DecodeState,
    draft: &DraftResult,
    budget: usize,
) -> Result<VerifyResult> {
    let start = state.cache.committed_len();
    let mut input = Vec::with_capacity(draft.candidates.len() + 1);
    input.push(state.pending_token());
    input.extend_from_slice(&draft.candidates);
    let out = ar_forward(params, &input, &mut state.cache, true)?;
    let target_dists: Vec<Vec<f32>> = (0..input.len())
        .map(|r| row_distribution(out.logits.row(r), state.temperature))
        .collect();
    let (j, correction) = if state.temperature > 0.0 {
        consensus_sampling(draft, &target_dists, &mut state.rng)
    } else {
        let rows: Vec<&[f32]> = (0..input.len()).map(|r| out.logits.row(r)).collect();
        consensus_greedy(&draft.candidates, &rows)
    };
    let keep = j.min(budget);
    state.tokens.extend_from_slice(&draft.candidates[..keep - 1]);
    let last = if keep == j {
        correction
    } else {
        draft.candidates[keep - 1]
    };
    state.tokens.push(last);
    state.pending_distribution = target_dists[keep - 1].clone();
    state.cache.truncate(start + keep)?;
    Ok(VerifyResult {
        target_dists,
        j,
        correction,
    })
}

/// Tokens still allowed this run: bounded by the request and the context.
fn remaining(params: &Parameters, state: &DecodeState, generated: usize, cfg: &DecodeConfig) -> usize {
    let request = cfg.max_new_tokens.saturating_sub(1 + generated);
    let context = params.config.max_seq_len.saturating_sub(state.tokens.len());
    request.min(context)
}

/// Truncate the tokens committed in the last cycle at the first EOS.
/// Returns the number kept and whether EOS was hit.
fn apply_eos(state: &mut DecodeState, committed: usize, eos: Option<u32>) -> (usize, bool) {
    let Some(eos) = eos else {
        return (committed, false);
    };
    let start = state.tokens.len() - committed;
    match state.tokens[start..].iter().position(|&t| t == eos) {
        Some(i) => {
            state.tokens.truncate(start + i + 1);
            let len = state.tokens.len() - 1;
            state.cache.truncate(len).expect("cache covers the kept tokens");
            (i + 1, true)
        }
        None => (committed, false),
    }
}

fn finish(state: DecodeState, mut stats: DecodeStats, t0: Instant) -> GenerationOutput {
    stats.wall_time_secs = t0.elapsed().as_secs_f64();
    stats.committed_cache_elements = state.cache.total_elements();
    GenerationOutput {
        tokens: state.tokens,
        stats,
    }
}

fn start(params: &Parameters, prompt: &[u32], cfg: &DecodeConfig) -> Result<Option<(DecodeState, DecodeStats)>> {
    if prompt.is_empty() {
        return Err(OrthrusError::EmptyPrompt);
    }
    if cfg.max_new_tokens == 0 {
        return Ok(None);
    }
    let state = prefill(params, prompt, cfg.temperature, cfg.seed)?;
    let stats = DecodeStats {
        prefill_passes: 1,
        ..Default::default()
    };
    Ok(Some((state, stats)))
}

fn block_size(params: &Parameters, cfg: &DecodeConfig) -> Result<usize> {
    let max = params.config.block_size;
    match cfg.block_size {
        None => Ok(max),
        Some(k) if (1..=max).contains(&k) => Ok(k),
        Some(k) => Err(OrthrusError::BlockSize { len: k, max }),
    }
}

/// Generic draft/verify loop; `draft` produces the block for a given `K'`.
fn run_cycles<D>(
    params: &Parameters,
    prompt: &[u32],
    cfg: &DecodeConfig,
    diffusion_passes: usize,
    mut draft: D,
) -> Result<GenerationOutput>
where
    D: FnMut(&mut DecodeState, usize) -> Result<DraftResult>,
{
    let t0 = Instant::now();
    let Some((mut state, mut stats)) = start(params, prompt, cfg)? else {
        return Ok(GenerationOutput {
            tokens: prompt.to_vec(),
            stats: DecodeStats::default(),
        });
    };
    if cfg.eos == Some(state.pending_token()) {
        return Ok(finish(state, stats, t0));
    }
    let k = block_size(params, cfg)?;
    loop {
        let budget = remaining(params, &state, stats.generated_tokens, cfg);
        if budget == 0 {
            break;
        }
        let k_eff = k.min(budget);
        let d = draft(&mut state, k_eff)?;
        stats.peak_transient_kv_elements = stats.peak_transient_kv_elements.max(d.transient_kv_elements);
        let v = verify_block(params, &mut state, &d, budget)?;
        let (kept, hit_eos) = apply_eos(&mut state, v.j.min(budget), cfg.eos);
        stats.generated_tokens += kept;
        stats.acceptance_lengths.push(kept);
        stats.decode_forward_passes += diffusion_passes + 1;
        stats.passes_by_view.diffusion += diffusion_passes;
        stats.passes_by_view.ar += 1;
        if hit_eos {
            break;
        }
    }
    Ok(finish(state, stats, t0))
}

/// Draft/verify generation. The returned tokens include the prompt.
pub fn generate(params: &Parameters, prompt: &[u32], cfg: &DecodeConfig) -> Result<GenerationOutput> {
    run_cycles(params, prompt, cfg, 1, |state, k| draft_block(params, state, k))
}

/// One AR pass per token.
pub fn generate_ar_baseline(params: &Parameters, prompt: &[u32], cfg: &DecodeConfig) -> Result<GenerationOutput> {
    let t0 = Instant::now();
    let Some((mut state, mut stats)) = start(params, prompt, cfg)? else {
        return Ok(GenerationOutput {
            tokens: prompt.to_vec(),
            stats: DecodeStats::default(),
        });
    };
    let mut done = cfg.eos == Some(state.pending_token());
    while !done && remaining(params, &state, stats.generated_tokens, cfg) > 0 {
        let out = ar_forward(params, &[state.pending_token()], &mut state.cache, true)?;
        let row = out.logits.row(0);
        let dist = row_distribution(row, state.temperature);
        let t = select(row, &dist, state.temperature, &mut state.rng);
        state.tokens.push(t);
        state.pending_distribution = dist;
        stats.generated_tokens += 1;
        stats.decode_forward_passes += 1;
        stats.passes_by_view.ar += 1;
        stats.acceptance_lengths.push(1);
        done = cfg.eos == Some(t);
    }
    Ok(finish(state, stats, t0))
}

/// Two diffusion passes per cycle: the first predicts every slot, the
/// `⌈K/2⌉` most confident in-block predictions are written into their
/// slots, and the second pass predicts the rest. Greedy only.
pub fn generate_multistep_variant(
    params: &Parameters,
    prompt: &[u32],
    cfg: &DecodeConfig,
) -> Result<GenerationOutput> {
    let greedy = DecodeConfig {
        temperature: 0.0,
        ..*cfg
    };
    run_cycles(params, prompt, &greedy, 2, |state, k| multistep_draft(params, state, k))
}

fn multistep_draft(params: &Parameters, state: &mut DecodeState, k: usize) -> Result<DraftResult> {
    let first = draft_block(params, state, k)?;
    let pos = state.anchor_position();
    let mask = params.config.mask_token_id();
    // Row `r` predicts slot `r + 1`; only slots inside the block can be filled.
    let mut conf: Vec<(usize, f32)> = (0..k.saturating_sub(1))
        .map(|r| (r, first.draft_dists[r][first.candidates[r] as usize]))
        .collect();
    conf.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let keep = k.div_ceil(2).min(conf.len());
    let mut block = vec![mask; k];
    block[0] = state.pending_token();
    let mut kept = vec![false; k];
    for &(r, _) in &conf[..keep] {
        block[r + 1] = first.candidates[r];
        kept[r] = true;
    }
    let positions: Vec<usize> = (pos..pos + k).collect();
    let out = diffusion_forward(params, &block, &positions, &state.cache, None)?;
    let second = select_drafts(&out.logits, out.transient_kv_elements, state);
    let candidates = (0..k)
        .map(|r| if kept[r] { first.candidates[r] } else { second.candidates[r] })
        .collect();
    let draft_dists = (0..k)
        .map(|r| {
            if kept[r] {
                first.draft_dists[r].clone()
            } else {
                second.draft_dists[r].clone()
            }
        })
        .collect();
    Ok(DraftResult {
        candidates,
        draft_dists,
        transient_kv_elements: first.transient_kv_elements.max(second.transient_kv_elements),
    })
}
