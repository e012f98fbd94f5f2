//! Backbone pretraining (next-token NLL) and distillation of the diffusion
//! view against the frozen backbone.

pub mod loss;
pub mod optim;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttnMask, Gradients, Graph, KvPrefix};
use crate::data::{pack_sequences, Corpus, PackedSequence};
use crate::error::{OrthrusError, Result};
use crate::masking::{build_complementary_batch, build_training_batch, sample_anchors, TrainingBatch};
use crate::model::forward::build_stack;
use crate::model::{ModelConfig, ParamId, Parameters, View};
use crate::par;
use crate::tensor::{log_softmax, softmax, Tensor};

pub use loss::{ce_loss_variant, kl_loss};
use loss::{loss_and_grad, RowTarget};
use optim::{clip_grad_norm, cosine_lr, AdamW};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    ForwardKl,
    CrossEntropy,
}

/// How distillation blocks are corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Masking {
    /// Anchor followed by `K − 1` masks.
    Full,
    /// Half the slots masked, paired with the complementary block.
    ComplementaryHalf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub warmup_ratio: f32,
    pub grad_clip_norm: f32,
    pub weight_decay: f32,
    pub epochs: usize,
    pub micro_batch: usize,
    pub grad_accum: usize,
    /// Blocks per packed sequence (`B`).
    pub blocks_per_seq: usize,
    /// Packed sequence length (`L`).
    pub seq_len: usize,
    pub objective: Objective,
    pub masking: Masking,
    /// Document separator used when packing; defaults to the last vocabulary id.
    pub separator: Option<u32>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            warmup_ratio: 0.05,
            grad_clip_norm: 1.0,
            weight_decay: 0.0,
            epochs: 2,
            micro_batch: 1,
            grad_accum: 16,
            blocks_per_seq: 16,
            seq_len: 256,
            objective: Objective::ForwardKl,
            masking: Masking::Full,
            separator: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(OrthrusError::Config(m.to_string()));
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must be in [0, 1)");
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad("grad_clip_norm must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.micro_batch == 0 || self.grad_accum == 0 || self.blocks_per_seq == 0 {
            return bad("micro_batch, grad_accum and blocks_per_seq must be positive");
        }
        if self.seq_len < 2 {
            return bad("seq_len must be at least 2");
        }
        Ok(())
    }

    pub fn separator_for(&self, vocab_size: usize) -> u32 {
        self.separator.unwrap_or(vocab_size as u32 - 1)
    }

    fn sequences_per_step(&self) -> usize {
        self.micro_batch * self.grad_accum
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f32,
    pub lr: f32,
    pub grad_norm: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f32>,
    pub final_loss: f32,
    pub trainable_params: usize,
    pub trainable_fraction: f64,
    pub tokens_consumed: usize,
}

/// Receives one record per optimizer step.
pub trait MetricsSink {
    fn record(&mut self, m: &StepMetrics);
}

impl MetricsSink for () {
    fn record(&mut self, _: &StepMetrics) {}
}

/// Writes each record as one JSON line.
pub struct JsonLines<W: std::io::Write>(pub W);

impl<W: std::io::Write> MetricsSink for JsonLines<W> {
    fn record(&mut self, m: &StepMetrics) {
        if let Ok(line) = serde_json::to_string(m) {
            if let Err(e) = writeln!(self.0, "{line}") {
                log::warn!("metrics write failed: {e}");
            }
        }
    }
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.random::<u64>() ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Shared optimisation loop: per step, compute per-sequence losses and
/// gradients (in parallel), reduce them in sequence order, clip, and update.
struct Trainer<'c> {
    cfg: &'c TrainConfig,
    ids: Vec<ParamId>,
    opt: AdamW,
    total_steps: usize,
    step: usize,
    losses: Vec<f32>,
    tokens: usize,
}

impl<'c> Trainer<'c> {
    fn new(cfg: &'c TrainConfig, params: &Parameters, ids: Vec<ParamId>, total_steps: usize) -> Self {
        Self {
            cfg,
            ids,
            opt: AdamW::new(params.len(), cfg.weight_decay),
            total_steps: total_steps.max(1),
            step: 0,
            losses: Vec::new(),
            tokens: 0,
        }
    }

    fn run_epoch<F>(
        &mut self,
        params: &mut Parameters,
        sequences: &[PackedSequence],
        epoch: usize,
        sink: &mut dyn MetricsSink,
        per_sequence: F,
    ) -> Result<()>
    where
        F: Fn(&Parameters, &[u32], u64) -> Result<(f64, Gradients)> + Sync + Send,
    {
        let mut order: Vec<usize> = (0..sequences.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.seed, epoch as u64, 1)));
        for chunk in order.chunks(self.cfg.sequences_per_step()) {
            let results = {
                let p: &Parameters = params;
                let step = self.step as u64;
                par::map_slice(chunk, |&i| {
                    per_sequence(p, &sequences[i].tokens, mix_seed(self.cfg.seed, step, i as u64))
                })
            };
            let mut grads = Gradients::empty(params.len());
            let mut loss = 0.0f64;
            for r in results {
                let (l, g) = r?;
                loss += l;
                grads.accumulate(&g);
            }
            let n = chunk.len() as f32;
            let loss = (loss / n as f64) as f32;
            if !loss.is_finite() {
                return Err(OrthrusError::Divergence {
                    step: self.step,
                    loss,
                });
            }
            grads.scale(1.0 / n);
            let grad_norm = clip_grad_norm(&mut grads, self.cfg.grad_clip_norm);
            let lr = cosine_lr(
                self.cfg.learning_rate,
                self.step,
                self.total_steps,
                self.cfg.warmup_ratio,
            );
            self.opt.step(params, &grads, &self.ids, lr);
            sink.record(&StepMetrics {
                step: self.step,
                loss,
                lr,
                grad_norm,
            });
            self.losses.push(loss);
            self.tokens += chunk.iter().map(|&i| sequences[i].tokens.len()).sum::<usize>();
            self.step += 1;
        }
        Ok(())
    }

    fn report(self, params: &Parameters) -> TrainReport {
        TrainReport {
            final_loss: self.losses.last().copied().unwrap_or(f32::NAN),
            losses: self.losses,
            trainable_params: params.trainable_count(),
            trainable_fraction: params.trainable_fraction(),
            tokens_consumed: self.tokens,
        }
    }
}

fn steps_for(cfg: &TrainConfig, n_sequences: usize) -> usize {
    cfg.epochs * n_sequences.div_ceil(cfg.sequences_per_step())
}

/// Mean next-token NLL of `tokens` and its gradient w.r.t. every backbone tensor.
fn pretrain_grads(params: &Parameters, tokens: &[u32]) -> Result<(f64, Gradients)> {
    let frozen = params.frozen_ids();
    let mut g = Graph::new(params, &frozen);
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let prefixes = vec![KvPrefix::EMPTY; params.config.n_layers];
    let out = build_stack(
        &mut g,
        View::Ar,
        tokens,
        &positions,
        &prefixes,
        AttnMask::Causal { offset: 0 },
    );
    let rows: Vec<(usize, RowTarget<'_>)> = (0..tokens.len() - 1)
        .map(|i| (i, RowTarget::Hard(tokens[i + 1])))
        .collect();
    let (loss, dlogits) = loss_and_grad(g.value(out.logits), &rows);
    Ok((loss, g.backward(out.logits, dlogits)))
}

/// Train the backbone on `sequences` by next-token NLL. Refuses to touch a
/// sealed backbone.
pub fn pretrain_on(
    params: &mut Parameters,
    sequences: &[PackedSequence],
    cfg: &TrainConfig,
    sink: &mut dyn MetricsSink,
) -> Result<TrainReport> {
    cfg.validate()?;
    if params.is_sealed() {
        return Err(OrthrusError::Config("backbone is sealed".into()));
    }
    check_tokens(params, sequences)?;
    let ids = params.frozen_ids();
    let mut trainer = Trainer::new(cfg, params, ids, steps_for(cfg, sequences.len()));
    for epoch in 0..cfg.epochs {
        trainer.run_epoch(params, sequences, epoch, sink, |p, toks, _| pretrain_grads(p, toks))?;
    }
    Ok(trainer.report(params))
}

fn check_tokens(params: &Parameters, sequences: &[PackedSequence]) -> Result<()> {
    let v = params.config.vocab_size as u32;
    for s in sequences {
        if let Some(i) = s.tokens.iter().position(|&t| t >= v) {
            return Err(OrthrusError::InvalidToken {
                token: s.tokens[i],
                index: i,
            });
        }
    }
    Ok(())
}

/// Initialise a model, train the backbone on `corpus`, copy its projections
/// into the diffusion view and seal it.
pub fn ar_pretrain(
    corpus: &Corpus,
    model: &ModelConfig,
    cfg: &TrainConfig,
    sink: &mut dyn MetricsSink,
) -> Result<(Parameters, TrainReport)> {
    if corpus.total_tokens() == 0 {
        return Err(OrthrusError::Config("corpus is empty".into()));
    }
    if corpus.vocab_size > model.vocab_size {
        return Err(OrthrusError::Config(format!(
            "corpus vocabulary {} exceeds model vocabulary {}",
            corpus.vocab_size, model.vocab_size
        )));
    }
    let sequences = pack_sequences(corpus, cfg.seq_len, cfg.separator_for(model.vocab_size), cfg.seed)?;
    if sequences.is_empty() {
        return Err(OrthrusError::Config("corpus too small for one packed sequence".into()));
    }
    let mut params = Parameters::init(model, cfg.seed)?;
    let report = pretrain_on(&mut params, &sequences, cfg, sink)?;
    params.init_diffusion_from_ar();
    params.seal();
    Ok((params, report))
}

/// Mean next-token NLL (nats) of `tokens` under the backbone.
pub fn eval_nll(params: &Parameters, tokens: &[u32]) -> f64 {
    let mut g = Graph::new(params, &[]);
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let prefixes = vec![KvPrefix::EMPTY; params.config.n_layers];
    let out = build_stack(
        &mut g,
        View::Ar,
        tokens,
        &positions,
        &prefixes,
        AttnMask::Causal { offset: 0 },
    );
    let logits = g.value(out.logits);
    let n = tokens.len() - 1;
    (0..n)
        .map(|i| -log_softmax(logits.row(i))[tokens[i + 1] as usize])
        .sum::<f64>()
        / n as f64
}

/// Backbone pass over a clean sequence: teacher logits and per-layer keys
/// and values.
pub(crate) fn teacher_pass(params: &Parameters, tokens: &[u32]) -> (Tensor, Vec<(Tensor, Tensor)>) {
    let mut g = Graph::new(params, &[]);
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let prefixes = vec![KvPrefix::EMPTY; params.config.n_layers];
    let out = build_stack(
        &mut g,
        View::Ar,
        tokens,
        &positions,
        &prefixes,
        AttnMask::Causal { offset: 0 },
    );
    let kv = out
        .kv
        .iter()
        .map(|&(k, v)| (g.take_value(k), g.take_value(v)))
        .collect();
    (g.take_value(out.logits), kv)
}

/// Build the training batch for one sequence under `cfg`.
pub fn make_batch(params: &Parameters, tokens: &[u32], cfg: &TrainConfig, seed: u64) -> Result<TrainingBatch> {
    let k = params.config.block_size;
    let anchors = sample_anchors(tokens.len(), cfg.blocks_per_seq, k, seed)?;
    let mask = params.config.mask_token_id();
    match cfg.masking {
        Masking::Full => build_training_batch(tokens, &anchors, mask),
        Masking::ComplementaryHalf => {
            build_complementary_batch(tokens, &anchors, mask, seed.wrapping_add(1))
        }
    }
}

/// Result of evaluating the distillation objective on one batch.
pub struct DistillEval {
    pub loss: f64,
    pub grads: Gradients,
    /// Teacher rows as probabilities, one per block slot.
    pub teacher_rows: Tensor,
}

/// Teacher pass, diffusion pass under the block mask, objective and
/// gradient w.r.t. the diffusion subset.
pub fn distill_eval(params: &Parameters, batch: &TrainingBatch, objective: Objective) -> DistillEval {
    let (teacher_logits, clean_kv) = teacher_pass(params, &batch.clean);
    let vocab = params.config.vocab_size;
    let mut teacher_rows = Tensor::zeros(batch.slot_count(), vocab);
    for (s, &r) in batch.teacher_rows.iter().enumerate() {
        teacher_rows.row_mut(s).copy_from_slice(&softmax(teacher_logits.row(r)));
    }
    let trainable = params.diffusion_ids();
    let mut g = Graph::new(params, &trainable);
    let prefixes: Vec<KvPrefix<'_>> = clean_kv
        .iter()
        .map(|(k, v)| KvPrefix {
            keys: &k.data,
            values: &v.data,
            len: k.rows,
        })
        .collect();
    let out = build_stack(
        &mut g,
        View::Diffusion,
        &batch.blocks,
        &batch.positions,
        &prefixes,
        AttnMask::Dense(&batch.mask.data),
    );
    let rows: Vec<(usize, RowTarget<'_>)> = (0..batch.slot_count())
        .filter(|&s| batch.supervised[s])
        .filter_map(|s| match objective {
            Objective::ForwardKl => Some((s, RowTarget::Soft(teacher_rows.row(s)))),
            Objective::CrossEntropy => batch.hard_targets[s].map(|t| (s, RowTarget::Hard(t))),
        })
        .collect();
    let (loss, dlogits) = loss_and_grad(g.value(out.logits), &rows);
    let grads = g.backward(out.logits, dlogits);
    DistillEval {
        loss,
        grads,
        teacher_rows,
    }
}

/// Distillation objective only (no gradient).
pub fn distill_loss(params: &Parameters, batch: &TrainingBatch, objective: Objective) -> f64 {
    let (teacher_logits, clean_kv) = teacher_pass(params, &batch.clean);
    let mut g = Graph::new(params, &[]);
    let prefixes: Vec<KvPrefix<'_>> = clean_kv
        .iter()
        .map(|(k, v)| KvPrefix {
            keys: &k.data,
            values: &v.data,
            len: k.rows,
        })
        .collect();
    let out = build_stack(
        &mut g,
        View::Diffusion,
        &batch.blocks,
        &batch.positions,
        &prefixes,
        AttnMask::Dense(&batch.mask.data),
    );
    let logits = g.value(out.logits);
    let mut total = 0.0;
    let mut n = 0usize;
    for s in (0..batch.slot_count()).filter(|&s| batch.supervised[s]) {
        let logq = log_softmax(logits.row(s));
        match objective {
            Objective::ForwardKl => {
                let p = softmax(teacher_logits.row(batch.teacher_rows[s]));
                total += p
                    .iter()
                    .zip(&logq)
                    .filter(|(&pv, _)| pv > 0.0)
                    .map(|(&pv, &lq)| pv as f64 * ((pv as f64).ln() - lq))
                    .sum::<f64>();
                n += 1;
            }
            Objective::CrossEntropy => {
                if let Some(t) = batch.hard_targets[s] {
                    total -= logq[t as usize];
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Multi-epoch distillation with one optimizer and one schedule.
pub struct Distiller<'c> {
    trainer: Trainer<'c>,
    epoch: usize,
    checksum: String,
}

impl<'c> Distiller<'c> {
    pub fn new(params: &Parameters, cfg: &'c TrainConfig, total_steps: usize) -> Result<Self> {
        cfg.validate()?;
        if !params.is_sealed() {
            return Err(OrthrusError::Unsealed);
        }
        Ok(Self {
            trainer: Trainer::new(cfg, params, params.diffusion_ids(), total_steps),
            epoch: 0,
            checksum: params.frozen_checksum(),
        })
    }

    /// One pass over `sequences`.
    pub fn run_epoch(
        &mut self,
        params: &mut Parameters,
        sequences: &[PackedSequence],
        sink: &mut dyn MetricsSink,
    ) -> Result<()> {
        check_tokens(params, sequences)?;
        let cfg = self.trainer.cfg;
        let k = params.config.block_size;
        if let Some(s) = sequences.iter().find(|s| !s.admits_block(k)) {
            return Err(OrthrusError::SequenceTooShort {
                len: s.tokens.len(),
                block: k,
            });
        }
        self.trainer.run_epoch(params, sequences, self.epoch, sink, |p, toks, seed| {
            let batch = make_batch(p, toks, cfg, seed)?;
            let eval = distill_eval(p, &batch, cfg.objective);
            Ok((eval.loss, eval.grads))
        })?;
        self.epoch += 1;
        let now = params.frozen_checksum();
        assert_eq!(now, self.checksum, "frozen backbone modified during distillation");
        Ok(())
    }

    pub fn finish(self, params: &Parameters) -> TrainReport {
        self.trainer.report(params)
    }
}

/// One distillation epoch with a fresh optimizer whose schedule spans it.
pub fn distill_epoch(
    params: &mut Parameters,
    corpus: &Corpus,
    cfg: &TrainConfig,
    sink: &mut dyn MetricsSink,
) -> Result<TrainReport> {
    let one = TrainConfig {
        epochs: 1,
        ..cfg.clone()
    };
    distill(params, corpus, &one, sink)
}

/// `cfg.epochs` distillation epochs over the packed `corpus`.
pub fn distill(
    params: &mut Parameters,
    corpus: &Corpus,
    cfg: &TrainConfig,
    sink: &mut dyn MetricsSink,
) -> Result<TrainReport> {
    let sequences = pack_sequences(
        corpus,
        cfg.seq_len,
        cfg.separator_for(params.config.vocab_size),
        cfg.seed,
    )?;
    distill_on(params, &sequences, cfg, sink)
}

pub fn distill_on(
    params: &mut Parameters,
    sequences: &[PackedSequence],
    cfg: &TrainConfig,
    sink: &mut dyn MetricsSink,
) -> Result<TrainReport> {
    let mut d = Distiller::new(params, cfg, steps_for(cfg, sequences.len()))?;
    for _ in 0..cfg.epochs {
        d.run_epoch(params, sequences, sink)?;
    }
    Ok(d.finish(params))
}

#[derive(Debug, Clone, Serialize)]
pub struct TensorGradCheck {
    pub name: String,
    pub samples: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorGradCheck>,
    pub max_rel_err: f64,
    /// Largest |analytic gradient| over every frozen coordinate.
    pub frozen_grad_max_abs: f64,
}

/// Relative error floor: differences are measured against
/// `max(|analytic|, |numeric|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-3;

/// Central difference stencil.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, truncation error O(h²).
    TwoPoint,
    /// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`, truncation error O(h⁴).
    FourPoint,
}

fn central_difference<F: FnMut(f32) -> f64>(x: f32, h: f32, stencil: Stencil, mut f: F) -> f64 {
    let h64 = h as f64;
    match stencil {
        Stencil::TwoPoint => (f(x + h) - f(x - h)) / (2.0 * h64),
        Stencil::FourPoint => {
            (-f(x + 2.0 * h) + 8.0 * f(x + h) - 8.0 * f(x - h) + f(x - 2.0 * h)) / (12.0 * h64)
        }
    }
}

/// Compare analytic gradients of the distillation objective with central
/// differences at `samples` random coordinates of every diffusion tensor.
pub fn grad_check(
    params: &Parameters,
    batch: &TrainingBatch,
    objective: Objective,
    epsilon: f32,
    stencil: Stencil,
    samples: usize,
    seed: u64,
) -> GradCheckReport {
    let eval = distill_eval(params, batch, objective);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = Vec::new();
    for id in params.diffusion_ids() {
        let analytic = eval.grads.get(id).expect("diffusion tensors are trainable");
        let n = params.get(id).numel();
        let coords: Vec<usize> = (0..samples).map(|_| rng.random_range(0..n)).collect();
        let errs = par::map_slice(&coords, |&c| {
            let mut p = params.clone();
            let orig = p.get(id).data[c];
            let numeric = central_difference(orig, epsilon, stencil, |x| {
                p.get_mut(id).data[c] = x;
                distill_loss(&p, batch, objective)
            });
            let a = analytic[c] as f64;
            let abs = (a - numeric).abs();
            (abs / a.abs().max(numeric.abs()).max(REL_FLOOR), abs)
        });
        tensors.push(TensorGradCheck {
            name: params.name(id).to_string(),
            samples,
            max_rel_err: errs.iter().map(|e| e.0).fold(0.0, f64::max),
            max_abs_err: errs.iter().map(|e| e.1).fold(0.0, f64::max),
        });
    }
    let frozen_grad_max_abs = params
        .frozen_ids()
        .into_iter()
        .flat_map(|id| eval.grads.get(id).unwrap_or(&[]).to_vec())
        .map(|g| (g as f64).abs())
        .fold(0.0, f64::max);
    GradCheckReport {
        max_rel_err: tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max),
        tensors,
        frozen_grad_max_abs,
    }
}
